use serde::{Deserialize, Serialize};

use super::TableId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.to_string(), passed, detail: detail.into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableReport {
    pub table: TableId,
    pub seed: u64,
    pub records: Vec<serde_json::Value>,
    pub checks: Vec<CheckOutcome>,
    pub seconds: f64,
    #[serde(skip)]
    pub text: String,
}

impl TableReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// The aligned table followed by one line per check.
    pub fn render(&self) -> String {
        let mut s = format!("== {} ==\n{}", self.table, self.text);
        for c in &self.checks {
            s.push_str(&format!("[{}] {}: {}\n", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        s.push_str(&format!("({:.1} s)\n", self.seconds));
        s
    }
}

/// Plain-text table with right-aligned columns.
#[derive(Debug, Clone, Default)]
pub struct TextTable {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl TextTable {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let cols = self.header.len();
        let mut width = vec![0; cols];
        for r in std::iter::once(&self.header).chain(&self.rows) {
            for (w, c) in width.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |r: &Vec<String>| {
            let cells: Vec<String> = (0..cols).map(|i| format!("{:>w$}", r.get(i).map_or("", |s| s.as_str()), w = width[i])).collect();
            cells.join("  ") + "\n"
        };
        let mut out = line(&self.header);
        out.push_str(&(width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n"));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }
}

pub fn fmt_sci(x: f64) -> String {
    format!("{x:.3e}")
}

pub fn fmt_acc(x: f64) -> String {
    format!("{x:.4}")
}
