use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fdia_core::dataset::{episode_seed, sample_initial_state};
use fdia_core::experiments::{run_table, tune_detector, ExperimentConfig, Runner, Scale, TableId};
use fdia_core::grid::{simulate_episode, AttackSchedule, GridModel, DT, EPISODE_STEPS};
use fdia_core::rng::rng_from_seed;
use fdia_core::tuning::SearchSpace;
use serde_json::json;

/// Worker threads for parallel jobs; defaults to all cores.
const WORKERS_ENV: &str = "FDIA_WORKERS";

const EXIT_RUNTIME: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CHECK: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "fdia", version, about = "Droop-attack detection lab on a swing-equation grid")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON experiment config; unspecified fields take the scale defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default `fdia-out`, or the config's `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Default sizes when no config is given.
    #[arg(long, global = true, value_parser = ["desk", "full"])]
    scale: Option<String>,
    /// Exit with status 3 when any acceptance threshold fails.
    #[arg(long, global = true)]
    check: bool,
    /// Progress messages on stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate episodes to CSV files plus a manifest.
    Simulate(SimulateArgs),
    /// Run one table recipe, or `all` of them.
    RunTable {
        /// mae-noise, aggregation, sample-size, sliding, cyclic, position,
        /// noisy-detection, multiclass or all
        #[arg(value_parser = parse_table)]
        table: TableSel,
    },
    /// Random search over detector hyperparameters.
    Tune {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// Detector epochs per trial (config value when omitted).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Print the effective configuration as JSON.
    Config,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, default_value_t = 1)]
    episodes: usize,
    #[arg(long, default_value_t = EPISODE_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DT)]
    dt: f64,
    /// Bus whose droop coefficient is tampered.
    #[arg(long)]
    attack_bus: Option<usize>,
    /// First tampered timestep (inclusive).
    #[arg(long, default_value_t = 1, requires = "attack_bus")]
    attack_from: usize,
    /// Last tampered timestep (inclusive); defaults to the episode end.
    #[arg(long, requires = "attack_bus")]
    attack_to: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum TableSel {
    One(TableId),
    All,
}

fn parse_table(s: &str) -> std::result::Result<TableSel, String> {
    if s == "all" {
        return Ok(TableSel::All);
    }
    s.parse::<TableId>().map(TableSel::One).map_err(|e| e.to_string())
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => {
            let scale: Scale = c.scale.as_deref().unwrap_or("desk").parse()?;
            ExperimentConfig::for_scale(scale)
        }
    };
    if let (Some(_), Some(s)) = (&c.config, &c.scale) {
        if s.parse::<Scale>()? != cfg.scale {
            bail!("--scale {s} conflicts with the config file's scale");
        }
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    c.out.clone().or_else(|| cfg.out_dir.clone()).unwrap_or_else(|| PathBuf::from("fdia-out"))
}

fn configure_workers() -> Result<()> {
    if let Ok(v) = std::env::var(WORKERS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{WORKERS_ENV} must be a positive integer"))?;
        if n == 0 {
            bail!("{WORKERS_ENV} must be a positive integer");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    fdia_core::Error::InvalidArgument(msg.into()).into()
}

fn simulate(cfg: &ExperimentConfig, out: &Path, a: &SimulateArgs) -> Result<()> {
    let grid = match &cfg.grid {
        Some(p) => GridModel::load_config(p)?,
        None => GridModel::ten_bus_default(),
    };
    if a.episodes == 0 || a.steps < 2 {
        return Err(usage("need at least one episode of at least two steps"));
    }
    let schedule = match a.attack_bus {
        Some(b) => {
            if b >= grid.n_buses() {
                return Err(usage(format!("attack bus {b} outside 0..{}", grid.n_buses())));
            }
            let last = a.attack_to.unwrap_or(a.steps - 1);
            AttackSchedule::on_bus(b, a.attack_from..=last)
        }
        None => AttackSchedule::new(),
    };
    std::fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for e in 0..a.episodes {
        let seed = episode_seed(cfg.seed, e);
        let init = sample_initial_state(&mut rng_from_seed(seed), grid.n_buses());
        let ep = simulate_episode(&init, &grid, &schedule, a.steps, a.dt, seed)?;
        let file = format!("episode_{e:05}.csv");
        ep.write_csv(out.join(&file))?;
        entries.push(json!({"file": file, "index": e, "seed": seed, "schedule_digest": schedule.digest()}));
    }
    let manifest = json!({
        "seed": cfg.seed,
        "steps": a.steps,
        "dt": a.dt,
        "grid": grid.to_config_string(),
        "attack": {
            "bus": a.attack_bus,
            "entries": schedule.len(),
            "value": schedule.attack_value(),
            "digest": schedule.digest(),
        },
        "episodes": entries,
    });
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    println!("wrote {} episodes to {}", a.episodes, out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    configure_workers()?;
    let cfg = load_config(&cli.common)?;
    let out = out_dir(&cli.common, &cfg);
    match cli.command {
        Command::Config => {
            let _ = writeln!(std::io::stdout(), "{}", cfg.to_json());
            Ok(0)
        }
        Command::Simulate(a) => {
            simulate(&cfg, &out, &a)?;
            Ok(0)
        }
        Command::RunTable { table } => {
            let mut runner = Runner::new(cfg, &out)?;
            runner.verbose = cli.common.verbose;
            let tables: Vec<TableId> = match table {
                TableSel::One(t) => vec![t],
                TableSel::All => TableId::ALL.to_vec(),
            };
            let start = std::time::Instant::now();
            let mut failed = Vec::new();
            let mut summary = Vec::new();
            for t in tables {
                let report = run_table(&runner, t)?;
                print!("{}", report.render());
                if !report.passed() {
                    failed.push(t.to_string());
                }
                summary.push(json!({"table": t, "passed": report.passed(), "seconds": report.seconds}));
            }
            let total = start.elapsed().as_secs_f64();
            let doc = json!({"seconds": total, "tables": summary, "failed": failed});
            std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
            println!("total {total:.1} s; {} table(s) with failing checks", failed.len());
            Ok(if cli.common.check && !failed.is_empty() { EXIT_CHECK } else { 0 })
        }
        Command::Tune { trials, epochs } => {
            let gap_max = cfg.checks.tuning_gap_max;
            let mut runner = Runner::new(cfg, &out)?;
            runner.verbose = cli.common.verbose;
            let rep = tune_detector(&runner, &SearchSpace::default(), trials, epochs)?;
            println!("predictor        {}", rep.predictor);
            println!("trials           {}", rep.trials);
            println!("best hidden      {:?}", rep.best_hidden);
            println!("best lr          {:.5}", rep.best_lr);
            println!("best val loss    {:.5}", rep.best_validation_loss);
            println!("best test acc    {:.4}", rep.best_test_accuracy);
            println!("published acc    {:.4}", rep.published_test_accuracy);
            if let Some(imp) = &rep.importance {
                println!("importance       layers {:.3}  units {:.3}  lr {:.3}", imp.n_layers, imp.n_units, imp.lr);
            }
            std::fs::write(out.join("tuning.json"), serde_json::to_string_pretty(&rep)? + "\n")?;
            let gap = (rep.best_test_accuracy - rep.published_test_accuracy).abs();
            Ok(if cli.common.check && gap > gap_max { EXIT_CHECK } else { 0 })
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e.downcast_ref::<fdia_core::Error>().is_some_and(|e| matches!(e, fdia_core::Error::InvalidArgument(_)));
            ExitCode::from(if usage { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
