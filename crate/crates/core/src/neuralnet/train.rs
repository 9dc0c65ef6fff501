use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{nll_loss, Adam, AdamConfig, MlpModel, Mode};
use crate::error::{Error, Result};
use crate::featurize::{Label, PairFeatures};

const EVAL_CHUNK: usize = 4096;

/// Labelled, already standardized feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<Label>) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape {
                expected: features.nrows(),
                found: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn from_pairs(pairs: &[PairFeatures]) -> Result<Self> {
        let cols = pairs.first().map_or(0, |p| p.features.len());
        let mut flat = Vec::with_capacity(pairs.len() * cols);
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.features.len() != cols {
                return Err(Error::Shape {
                    expected: cols,
                    found: p.features.len(),
                });
            }
            flat.extend_from_slice(&p.features);
            labels.push(p.label.ok_or_else(|| {
                Error::MissingLabels(format!("pair {:?} is unlabelled", p.obs_ids))
            })?);
        }
        let features = Array2::from_shape_vec((pairs.len(), cols), flat).expect("consistent shape");
        Ok(Self { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Keep only the first `n` feature columns.
    pub fn truncate_features(&self, n: usize) -> Self {
        Self {
            features: self.features.slice(ndarray::s![.., ..n]).to_owned(),
            labels: self.labels.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub start: f64,
    pub floor: f64,
    /// Multiplier applied when validation accuracy plateaus.
    pub decay: f64,
    /// Epochs without validation improvement before decaying.
    pub patience: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            start: 1e-4,
            floor: 1e-6,
            decay: 0.1,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// Stop once the learning rate sits at its floor and validation accuracy
    /// has not improved for another `patience` epochs.
    pub early_stop: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32, 16, 16, 8, 8],
            batch_size: 256,
            epochs: 100,
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            early_stop: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if !(1e-6..=1e-4).contains(&s.start) || !(1e-6..=1e-4).contains(&s.floor) || s.floor > s.start {
            return Err(Error::Config(format!(
                "learning rates must satisfy 1e-6 <= floor ({}) <= start ({}) <= 1e-4",
                s.floor, s.start
            )));
        }
        if !(s.decay > 0.0 && s.decay < 1.0) {
            return Err(Error::Config("lr decay must be in (0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid batch-norm constants".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub test_acc: Option<f64>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = BufWriter::new(out);
        let io = |e| Error::io("train report", e);
        writeln!(w, "epoch,train_loss,train_acc,val_acc").map_err(io)?;
        for e in &self.epochs {
            writeln!(w, "{},{},{},{}", e.epoch, e.train_loss, e.train_acc, e.val_acc).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path).map_err(|e| Error::io(path, e))?)
    }
}

fn predicted(lp: ArrayView2<f64>, i: usize) -> Label {
    if lp[[i, 1]] > lp[[i, 0]] {
        Label::Match
    } else {
        Label::NoMatch
    }
}

/// Fraction of rows whose most likely class equals the label (eval mode).
pub fn accuracy(model: &MlpModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty dataset".into()));
    }
    let mut correct = 0usize;
    for (start, chunk) in data
        .features
        .axis_chunks_iter(Axis(0), EVAL_CHUNK)
        .enumerate()
        .map(|(k, c)| (k * EVAL_CHUNK, c))
    {
        let lp = model.predict_log_probs(chunk)?;
        correct += (0..chunk.nrows())
            .filter(|&i| predicted(lp.view(), i) == data.labels[start + i])
            .count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train a fresh model and return the snapshot with the best validation
/// accuracy, in eval mode.
pub fn train(train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(MlpModel, TrainReport)> {
    cfg.validate()?;
    if train_set.len() < 2 || val_set.is_empty() {
        return Err(Error::InvalidInput("training needs at least 2 rows and a validation set".into()));
    }
    let matches = train_set.labels.iter().filter(|&&l| l == Label::Match).count();
    if 2 * matches != train_set.len() {
        return Err(Error::InvalidInput(format!(
            "training labels are not balanced ({matches} matches of {})",
            train_set.len()
        )));
    }
    if val_set.features.ncols() != train_set.features.ncols() {
        return Err(Error::Shape {
            expected: train_set.features.ncols(),
            found: val_set.features.ncols(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::new(train_set.features.ncols(), &cfg.hidden, &mut rng)?;
    model.bn_eps = cfg.bn_eps;
    model.bn_momentum = cfg.bn_momentum;
    let mut adam = Adam::new(cfg.adam);
    let mut lr = cfg.schedule.start;
    let at_floor = |lr: f64| lr <= cfg.schedule.floor * (1.0 + 1e-9);

    let mut report = TrainReport::default();
    let mut best: Option<MlpModel> = None;
    let mut stale = 0usize;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.set_mode(Mode::Train);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch_idx in order.chunks(cfg.batch_size) {
            if batch_idx.len() < 2 {
                continue;
            }
            let x = train_set.features.select(Axis(0), batch_idx);
            let y: Vec<Label> = batch_idx.iter().map(|&i| train_set.labels[i]).collect();
            let cache = model.forward_pass(x.view(), Mode::Train)?;
            let loss = nll_loss(&cache.log_probs, &y)?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became {loss} in epoch {epoch} after {} steps",
                    adam.steps()
                )));
            }
            let grads = model.backward(&cache, &y)?;
            model.update_running_stats(&cache)?;
            adam.step(&mut model, &grads, lr)?;

            loss_sum += loss * y.len() as f64;
            seen += y.len();
            correct += (0..y.len())
                .filter(|&i| predicted(cache.log_probs.view(), i) == y[i])
                .count();
        }
        if !model.all_finite() {
            return Err(Error::Divergence(format!("non-finite parameters in epoch {epoch}")));
        }
        model.set_mode(Mode::Eval);
        let val_acc = accuracy(&model, val_set)?;
        report.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc,
            lr,
        });

        if best.is_none() || val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = epoch;
            best = Some(model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.schedule.patience {
                if at_floor(lr) {
                    if cfg.early_stop {
                        break;
                    }
                } else {
                    lr = (lr * cfg.schedule.decay).max(cfg.schedule.floor);
                }
                stale = 0;
            }
        }
    }
    let mut model = best.expect("at least one epoch");
    model.set_mode(Mode::Eval);
    Ok((model, report))
}
