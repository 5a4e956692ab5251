use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// One counted layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEntry {
    pub path: String,
    pub kind: String,
    pub params: u64,
    pub macs: u64,
}

impl CostEntry {
    pub fn new(path: &str, kind: &str, params: u64, macs: u64) -> Self {
        Self {
            path: path.to_string(),
            kind: kind.to_string(),
            params,
            macs,
        }
    }
}

/// Per-layer parameter and multiply-accumulate counts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub entries: Vec<CostEntry>,
    pub flop_per_mac: u64,
}

impl Default for CostReport {
    fn default() -> Self {
        Self {
            entries: Vec::new(),
            flop_per_mac: 2,
        }
    }
}

impl CostReport {
    pub fn push(&mut self, entry: CostEntry) {
        self.entries.push(entry);
    }

    /// Append `other`'s entries under `prefix`.
    pub fn absorb(&mut self, prefix: &str, other: CostReport) {
        for mut e in other.entries {
            e.path = crate::nn::join(prefix, &e.path);
            self.entries.push(e);
        }
    }

    pub fn total_params(&self) -> u64 {
        self.entries.iter().map(|e| e.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.entries.iter().map(|e| e.macs).sum()
    }

    pub fn flops(&self) -> u64 {
        self.total_macs() * self.flop_per_mac
    }

    /// Totals restricted to entries whose path starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> (u64, u64) {
        self.entries
            .iter()
            .filter(|e| e.path == prefix || e.path.starts_with(&format!("{prefix}.")))
            .fold((0, 0), |(p, m), e| (p + e.params, m + e.macs))
    }

    /// Aligned plain-text table with a totals line.
    pub fn to_table(&self) -> String {
        let pw = self.entries.iter().map(|e| e.path.len()).max().unwrap_or(4).max(5);
        let kw = self.entries.iter().map(|e| e.kind.len()).max().unwrap_or(4).max(4);
        let mut s = String::new();
        let _ = writeln!(s, "{:<pw$}  {:<kw$}  {:>12}  {:>16}", "path", "kind", "params", "macs");
        for e in &self.entries {
            let _ = writeln!(s, "{:<pw$}  {:<kw$}  {:>12}  {:>16}", e.path, e.kind, e.params, e.macs);
        }
        let _ = writeln!(s, "{:<pw$}  {:<kw$}  {:>12}  {:>16}", "total", "", self.total_params(), self.total_macs());
        let _ = writeln!(
            s,
            "params {:.4}M  macs {:.4}G  flops {:.4}G ({} per mac)",
            self.total_params() as f64 / 1e6,
            self.total_macs() as f64 / 1e9,
            self.flops() as f64 / 1e9,
            self.flop_per_mac
        );
        s
    }

    /// One tab-separated `path kind params macs` record per line.
    pub fn to_records(&self) -> String {
        self.entries
            .iter()
            .map(|e| format!("{}\t{}\t{}\t{}\n", e.path, e.kind, e.params, e.macs))
            .collect()
    }
}
