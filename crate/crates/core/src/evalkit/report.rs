//! Evaluation reports: per-item values kept next to their aggregates so the
//! aggregates can be re-derived and checked.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Stats;
use crate::fsutil::write_atomic;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub values: Vec<f64>,
    pub stats: Stats,
}

impl Metric {
    pub fn new(values: Vec<f64>) -> Self {
        let stats = Stats::of(&values);
        Self { values, stats }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub label: String,
    pub seed: u64,
    /// Checksums of the checkpoints involved, by role.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, Metric>,
    /// Scalar facts that are not aggregates (counts, settings).
    pub info: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn new(kind: &str, label: &str, seed: u64) -> Self {
        Self { kind: kind.into(), label: label.into(), seed, ..Default::default() }
    }

    pub fn add_metric(&mut self, name: &str, values: Vec<f64>) {
        self.metrics.insert(name.into(), Metric::new(values));
    }

    pub fn stats(&self, name: &str) -> Option<Stats> {
        self.metrics.get(name).map(|m| m.stats)
    }

    /// Recomputes every aggregate from its values; any difference is an error.
    pub fn verify(&self) -> Result<()> {
        for (name, m) in &self.metrics {
            let s = Stats::of(&m.values);
            let same = |a: f64, b: f64| a.to_bits() == b.to_bits();
            if s.n != m.stats.n || !same(s.mean, m.stats.mean) || !same(s.std, m.stats.std) {
                return Err(Error::Format(format!("{}: aggregate of `{name}` does not match its values", self.label)));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: Self = serde_json::from_str(&text)?;
        r.verify()?;
        Ok(r)
    }

    /// One line per metric: `name: mean ± std (n)`.
    pub fn summary(&self) -> String {
        let mut s = format!("[{}] {}\n", self.kind, self.label);
        for (name, m) in &self.metrics {
            s.push_str(&format!("  {name}: {} (n={})\n", m.stats, m.stats.n));
        }
        for (name, v) in &self.info {
            s.push_str(&format!("  {name} = {v}\n"));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tampered_aggregate_is_detected() {
        let mut r = EvalReport::new("test", "x", 0);
        r.add_metric("err", vec![1.0, 2.0, 4.0]);
        r.verify().unwrap();
        r.metrics.get_mut("err").unwrap().stats.mean += 1e-12;
        assert!(r.verify().is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = EvalReport::new("test", "x", 3);
        r.add_metric("a", vec![0.1, 0.7, 1e-9]);
        r.info.insert("count".into(), 3.0);
        let path = dir.path().join("r.json");
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
    }
}
