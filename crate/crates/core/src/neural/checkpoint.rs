//! Checkpoint container: text header carrying a JSON architecture
//! descriptor, followed by the parameters as little-endian `f64`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "FDIA-CHECKPOINT";
const VERSION: u32 = 1;

pub fn write_checkpoint(path: impl AsRef<Path>, kind: &str, descriptor: &serde_json::Value, params: &[&Tensor]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let total: usize = params.iter().map(|t| t.len()).sum();
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "version {VERSION}")?;
    writeln!(w, "kind {kind}")?;
    writeln!(w, "descriptor {}", serde_json::to_string(descriptor)?)?;
    writeln!(w, "n_values {total}")?;
    writeln!(w, "end")?;
    for t in params {
        for x in t.data() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct Checkpoint {
    pub kind: String,
    pub descriptor: serde_json::Value,
    pub values: Vec<f64>,
}

impl Checkpoint {
    /// Copies the payload into `params` in order; lengths must match exactly.
    pub fn fill(&self, params: Vec<&mut Tensor>) -> Result<()> {
        let need: usize = params.iter().map(|t| t.len()).sum();
        if need != self.values.len() {
            return Err(Error::Dimension { what: "checkpoint payload", expected: need, got: self.values.len() });
        }
        let mut off = 0;
        for t in params {
            let n = t.len();
            t.data_mut().copy_from_slice(&self.values[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>, expected_kind: &str) -> Result<Checkpoint> {
    let path = path.as_ref();
    let corrupt = |msg: String| Error::Corrupt { path: path.to_path_buf(), msg };
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let mut kind = None;
    let mut descriptor = None;
    let mut n_values = None;
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(corrupt("header ended before `end`".into()));
        }
        let l = line.trim_end();
        if l == "end" {
            break;
        }
        let (k, v) = l.split_once(' ').ok_or_else(|| corrupt(format!("bad header line {l:?}")))?;
        match k {
            "version" => {
                let found: u32 = v.parse().map_err(|_| corrupt(format!("bad version {v:?}")))?;
                if found != VERSION {
                    return Err(Error::Version { found, expected: VERSION });
                }
            }
            "kind" => kind = Some(v.to_string()),
            "descriptor" => descriptor = Some(serde_json::from_str(v)?),
            "n_values" => n_values = Some(v.parse::<usize>().map_err(|_| corrupt(format!("bad n_values {v:?}")))?),
            _ => return Err(corrupt(format!("unknown header field {k:?}"))),
        }
    }
    let kind = kind.ok_or_else(|| corrupt("missing kind".into()))?;
    if kind != expected_kind {
        return Err(Error::Format(format!("checkpoint holds a {kind}, expected a {expected_kind}")));
    }
    let n = n_values.ok_or_else(|| corrupt("missing n_values".into()))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != 8 * n {
        return Err(corrupt(format!("payload is {} bytes, expected {}", payload.len(), 8 * n)));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok(Checkpoint { kind, descriptor: descriptor.ok_or_else(|| corrupt("missing descriptor".into()))?, values })
}
