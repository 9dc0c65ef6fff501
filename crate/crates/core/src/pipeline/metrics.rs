use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::associate::RecoveryReport;
use crate::error::{Error, Result};

/// One row of the model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub variant: String,
    pub n_features: usize,
    pub standardized: bool,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub train_seconds: f64,
}

pub fn write_accuracy_csv<W: Write>(out: W, rows: &[AccuracyRow]) -> Result<()> {
    let mut w = BufWriter::new(out);
    let io = |e| Error::io("accuracy csv", e);
    writeln!(
        w,
        "variant,n_features,standardized,epochs_run,best_epoch,val_acc,test_acc,train_seconds"
    )
    .map_err(io)?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{:.3}",
            r.variant,
            r.n_features,
            r.standardized,
            r.epochs_run,
            r.best_epoch,
            r.val_acc,
            r.test_acc,
            r.train_seconds
        )
        .map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Match-probability histogram split by truth, on uniform bins over [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    pub n_match: Vec<u64>,
    pub n_no_match: Vec<u64>,
}

impl ScoreHistogram {
    pub fn new(bins: usize) -> Self {
        Self {
            n_match: vec![0; bins],
            n_no_match: vec![0; bins],
        }
    }

    pub fn bins(&self) -> usize {
        self.n_match.len()
    }

    /// Bin of `score`; the top edge 1.0 belongs to the last bin.
    pub fn bin_of(&self, score: f64) -> usize {
        let b = self.bins();
        ((score.clamp(0.0, 1.0) * b as f64) as usize).min(b - 1)
    }

    pub fn add(&mut self, score: f64, is_match: bool) {
        let k = self.bin_of(score);
        if is_match {
            self.n_match[k] += 1;
        } else {
            self.n_no_match[k] += 1;
        }
    }

    pub fn total(&self) -> u64 {
        self.n_match.iter().sum::<u64>() + self.n_no_match.iter().sum::<u64>()
    }

    pub fn base_rate(&self) -> f64 {
        self.n_match.iter().sum::<u64>() as f64 / self.total() as f64
    }

    /// Empirical match rate of bin `k`; NaN for an empty bin.
    pub fn match_rate(&self, k: usize) -> f64 {
        let n = self.n_match[k] + self.n_no_match[k];
        if n == 0 {
            f64::NAN
        } else {
            self.n_match[k] as f64 / n as f64
        }
    }

    /// `bin_lo,bin_hi,n_match,n_no_match,match_rate`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("histogram csv", e);
        writeln!(w, "bin_lo,bin_hi,n_match,n_no_match,match_rate").map_err(io)?;
        let b = self.bins() as f64;
        for k in 0..self.bins() {
            let rate = self.match_rate(k);
            let rate = if rate.is_nan() { String::new() } else { rate.to_string() };
            writeln!(
                w,
                "{},{},{},{},{rate}",
                k as f64 / b,
                (k + 1) as f64 / b,
                self.n_match[k],
                self.n_no_match[k]
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }
}

/// Summary of an all-pairs scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    /// Accuracy on the listed balanced test pairs.
    pub balanced_test_acc: f64,
    pub n_observations: usize,
    pub n_rso: usize,
    pub n_pairs: u64,
    pub n_match_pairs: u64,
    pub base_rate: f64,
    /// Pairs scoring strictly above 0.95.
    pub n_above_095: u64,
    pub match_rate_above_095: f64,
    pub no_match_below_02_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetadata {
    pub command: String,
    pub master_seed: u64,
    pub config_sha256: String,
    pub version: String,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
}

/// Metrics emitted by one command; absent sections are omitted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsBundle {
    pub metadata: RunMetadata,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub accuracy: Vec<AccuracyRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub calibration: Option<CalibrationSummary>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub histogram: Option<ScoreHistogram>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recovery: Option<RecoveryReport>,
}

impl MetricsBundle {
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}
