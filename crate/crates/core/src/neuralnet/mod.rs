//! Dense pair classifier: six hidden `affine -> ReLU -> batch-norm` blocks and
//! a two-way log-softmax output, with hand-written backpropagation.
//!
//! Output class 0 is "no match", class 1 is "match".

mod adam;
mod io;
mod train;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::featurize::Label;

pub use adam::{Adam, AdamConfig};
pub use io::{load_model, read_model, save_model, write_model};
pub use train::{accuracy, train, Dataset, EpochStats, LrSchedule, TrainConfig, TrainReport};

pub const HIDDEN_LAYERS: usize = 6;
pub const N_CLASSES: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `HIDDEN_LAYERS + 1` affine layers; the last one produces the logits.
    pub dense: Vec<Dense>,
    /// One batch-norm per hidden layer.
    pub norms: Vec<BatchNorm>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    mode: Mode,
}

/// Gradients with the same layout as the model's trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dense: Vec<Dense>,
    pub gamma: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
}

impl Gradients {
    /// Flat views in [`MlpModel::parameters_mut`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.dense.len() + 2 * self.gamma.len());
        for d in &self.dense {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for (g, b) in self.gamma.iter().zip(&self.beta) {
            out.push(g.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

/// Intermediate values of one forward pass, needed by backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    mode: Mode,
    /// Input of each affine layer.
    inputs: Vec<Array2<f64>>,
    /// Post-ReLU activations of each hidden layer.
    activations: Vec<Array2<f64>>,
    /// Normalized activations before scale and shift.
    pub normalized: Vec<Array2<f64>>,
    inv_std: Vec<Array1<f64>>,
    batch_mean: Vec<Array1<f64>>,
    batch_var: Vec<Array1<f64>>,
    pub log_probs: Array2<f64>,
}

impl ForwardCache {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.log_probs.nrows()
    }
}

fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

/// Mean negative log-likelihood of the true classes.
pub fn nll_loss(log_probs: &Array2<f64>, labels: &[Label]) -> Result<f64> {
    if labels.len() != log_probs.nrows() || labels.is_empty() {
        return Err(Error::Shape {
            expected: log_probs.nrows(),
            found: labels.len(),
        });
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, l)| -log_probs[[i, l.class()]])
        .sum();
    Ok(total / labels.len() as f64)
}

impl MlpModel {
    /// He-initialized model, `input -> hidden[0] -> ... -> hidden[5] -> 2`.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(input, hidden)?;
        for d in &mut model.dense {
            let fan_in = d.weights.nrows() as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
            d.weights.mapv_inplace(|_| normal.sample(rng));
        }
        Ok(model)
    }

    /// All weights and biases zero, batch-norm at its identity initialization.
    pub fn zeros(input: usize, hidden: &[usize]) -> Result<Self> {
        if hidden.len() != HIDDEN_LAYERS {
            return Err(Error::Config(format!(
                "expected {HIDDEN_LAYERS} hidden layers, got {}",
                hidden.len()
            )));
        }
        if input == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(N_CLASSES);
        let dense = dims
            .windows(2)
            .map(|w| Dense {
                weights: Array2::zeros((w[0], w[1])),
                bias: Array1::zeros(w[1]),
            })
            .collect();
        let norms = hidden.iter().map(|&w| BatchNorm::new(w)).collect();
        Ok(Self {
            dense,
            norms,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            mode: Mode::Train,
        })
    }

    pub(crate) fn from_parts(dense: Vec<Dense>, norms: Vec<BatchNorm>, bn_eps: f64, bn_momentum: f64) -> Self {
        Self {
            dense,
            norms,
            bn_eps,
            bn_momentum,
            mode: Mode::Eval,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn input_dim(&self) -> usize {
        self.dense[0].weights.nrows()
    }

    /// Widths of every layer, input and output included.
    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.dense.iter().map(|d| d.weights.ncols()));
        dims
    }

    pub fn n_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Trainable parameters as flat slices: each layer's weights and bias,
    /// then each batch-norm's scale and shift.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for d in &self.dense {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
        }
        for n in &self.norms {
            out.push(n.gamma.as_slice().expect("standard layout"));
            out.push(n.beta.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for d in &mut self.dense {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
        }
        for n in &mut self.norms {
            out.push(n.gamma.as_slice_mut().expect("standard layout"));
            out.push(n.beta.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.parameters().iter().all(|p| p.iter().all(|x| x.is_finite()))
            && self
                .norms
                .iter()
                .all(|n| n.running_mean.iter().chain(&n.running_var).all(|x| x.is_finite()))
    }

    /// Forward pass without touching any model state.
    ///
    /// `Mode::Train` normalizes with batch statistics (needs at least two
    /// rows); `Mode::Eval` uses the running statistics.
    pub fn forward_pass(&self, batch: ArrayView2<f64>, mode: Mode) -> Result<ForwardCache> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                found: batch.ncols(),
            });
        }
        let n = batch.nrows();
        if mode == Mode::Train && n < 2 {
            return Err(Error::InvalidInput(
                "train-mode batch normalization needs at least 2 rows".into(),
            ));
        }
        let hidden = self.norms.len();
        let mut cache = ForwardCache {
            mode,
            inputs: Vec::with_capacity(hidden + 1),
            activations: Vec::with_capacity(hidden),
            normalized: Vec::with_capacity(hidden),
            inv_std: Vec::with_capacity(hidden),
            batch_mean: Vec::with_capacity(hidden),
            batch_var: Vec::with_capacity(hidden),
            log_probs: Array2::zeros((0, N_CLASSES)),
        };
        let mut x = batch.to_owned();
        for (layer, norm) in self.dense.iter().zip(&self.norms) {
            let mut a = x.dot(&layer.weights);
            a += &layer.bias;
            a.mapv_inplace(|v| v.max(0.0));

            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = a.mean_axis(Axis(0)).expect("non-empty batch");
                    let var = a
                        .axis_iter(Axis(0))
                        .fold(Array1::zeros(a.ncols()), |acc, row| {
                            let d = &row - &mean;
                            acc + &d * &d
                        })
                        / n as f64;
                    (mean, var)
                }
                Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
            };
            let inv_std = var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
            let mut xhat = &a - &mean;
            xhat *= &inv_std;
            let mut y = &xhat * &norm.gamma;
            y += &norm.beta;

            cache.inputs.push(x);
            cache.activations.push(a);
            cache.normalized.push(xhat);
            cache.inv_std.push(inv_std);
            cache.batch_mean.push(mean);
            cache.batch_var.push(var);
            x = y;
        }
        let out = self.dense.last().expect("output layer");
        let mut logits = x.dot(&out.weights);
        logits += &out.bias;
        cache.inputs.push(x);
        cache.log_probs = log_softmax(&logits);
        Ok(cache)
    }

    /// Forward pass in the model's current mode. In train mode the running
    /// statistics are updated from the batch.
    pub fn forward(&mut self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        let cache = self.forward_pass(batch, self.mode)?;
        if self.mode == Mode::Train {
            self.update_running_stats(&cache)?;
        }
        Ok(cache.log_probs)
    }

    /// Exponential moving average of the batch statistics in `cache`.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::State("running statistics need a train-mode pass".into()));
        }
        let n = cache.batch_size() as f64;
        let m = self.bn_momentum;
        for (norm, (mean, var)) in self
            .norms
            .iter_mut()
            .zip(cache.batch_mean.iter().zip(&cache.batch_var))
        {
            Zip::from(&mut norm.running_mean)
                .and(mean)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            Zip::from(&mut norm.running_var)
                .and(var)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * n / (n - 1.0));
        }
        Ok(())
    }

    /// Backpropagate `d_logits` (gradient of a scalar w.r.t. the logits)
    /// through the cached pass. Returns parameter and input gradients.
    fn backprop(&self, cache: &ForwardCache, d_logits: Array2<f64>, want_input: bool) -> (Gradients, Option<Array2<f64>>) {
        let hidden = self.norms.len();
        let n = cache.batch_size() as f64;
        let mut dense_grads = Vec::with_capacity(hidden + 1);
        let mut gammas = Vec::with_capacity(hidden);
        let mut betas = Vec::with_capacity(hidden);

        let out = &self.dense[hidden];
        dense_grads.push(Dense {
            weights: cache.inputs[hidden].t().dot(&d_logits),
            bias: d_logits.sum_axis(Axis(0)),
        });
        let mut dx = d_logits.dot(&out.weights.t());

        for h in (0..hidden).rev() {
            let norm = &self.norms[h];
            let xhat = &cache.normalized[h];
            let inv_std = &cache.inv_std[h];
            gammas.push((&dx * xhat).sum_axis(Axis(0)));
            betas.push(dx.sum_axis(Axis(0)));

            let dxhat = dx * &norm.gamma;
            let mut da = match cache.mode {
                Mode::Train => {
                    let sum_d = dxhat.sum_axis(Axis(0));
                    let sum_dx = (&dxhat * xhat).sum_axis(Axis(0));
                    let mut da = dxhat * n;
                    da -= &sum_d;
                    da -= &(xhat * &sum_dx);
                    da *= &(inv_std / n);
                    da
                }
                Mode::Eval => dxhat * inv_std,
            };
            Zip::from(&mut da)
                .and(&cache.activations[h])
                .for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            let layer = &self.dense[h];
            dense_grads.push(Dense {
                weights: cache.inputs[h].t().dot(&da),
                bias: da.sum_axis(Axis(0)),
            });
            dx = if h > 0 || want_input {
                da.dot(&layer.weights.t())
            } else {
                Array2::zeros((0, 0))
            };
        }
        dense_grads.reverse();
        gammas.reverse();
        betas.reverse();
        let grads = Gradients {
            dense: dense_grads,
            gamma: gammas,
            beta: betas,
        };
        (grads, want_input.then_some(dx))
    }

    /// Exact gradients of [`nll_loss`] for the batch behind `cache`.
    pub fn backward(&self, cache: &ForwardCache, labels: &[Label]) -> Result<Gradients> {
        if cache.mode != Mode::Train {
            return Err(Error::State(
                "backward needs the cache of a train-mode forward pass".into(),
            ));
        }
        if cache.inputs.len() != self.dense.len()
            || cache.inputs[0].ncols() != self.input_dim()
        {
            return Err(Error::State("forward cache does not belong to this model".into()));
        }
        let n = cache.batch_size();
        if labels.len() != n {
            return Err(Error::Shape {
                expected: n,
                found: labels.len(),
            });
        }
        let mut d_logits = cache.log_probs.mapv(f64::exp);
        for (i, l) in labels.iter().enumerate() {
            d_logits[[i, l.class()]] -= 1.0;
        }
        d_logits /= n as f64;
        Ok(self.backprop(cache, d_logits, false).0)
    }

    /// Loss and gradients of one batch in train mode, leaving state untouched.
    pub fn loss_and_gradients(&self, batch: ArrayView2<f64>, labels: &[Label]) -> Result<(f64, Gradients)> {
        let cache = self.forward_pass(batch, Mode::Train)?;
        let loss = nll_loss(&cache.log_probs, labels)?;
        Ok((loss, self.backward(&cache, labels)?))
    }

    /// Gradient of the `class` log-probability w.r.t. each input feature of
    /// every row, using the running statistics.
    pub fn input_gradients(&self, batch: ArrayView2<f64>, class: usize) -> Result<Array2<f64>> {
        if class >= N_CLASSES {
            return Err(Error::Domain(format!("class index {class} not in {{0, 1}}")));
        }
        let cache = self.forward_pass(batch, Mode::Eval)?;
        let mut d_logits = cache.log_probs.mapv(|lp| -lp.exp());
        d_logits.column_mut(class).mapv_inplace(|v| v + 1.0);
        let (_, dx) = self.backprop(&cache, d_logits, true);
        Ok(dx.expect("input gradient requested"))
    }

    /// Log-probabilities with running statistics; requires eval mode.
    pub fn predict_log_probs(&self, batch: ArrayView2<f64>) -> Result<Array2<f64>> {
        if self.mode != Mode::Eval {
            return Err(Error::State("model is not finalized (still in train mode)".into()));
        }
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape {
                expected: self.input_dim(),
                found: batch.ncols(),
            });
        }
        let mut x: Option<Array2<f64>> = None;
        for (layer, norm) in self.dense.iter().zip(&self.norms) {
            let mut a = match &x {
                None => batch.dot(&layer.weights),
                Some(x) => x.dot(&layer.weights),
            };
            let inv_std = norm.running_var.mapv(|v| 1.0 / (v + self.bn_eps).sqrt());
            for mut row in a.rows_mut() {
                for (k, v) in row.iter_mut().enumerate() {
                    let h = (*v + layer.bias[k]).max(0.0);
                    *v = ((h - norm.running_mean[k]) * inv_std[k]) * norm.gamma[k] + norm.beta[k];
                }
            }
            x = Some(a);
        }
        let out = self.dense.last().expect("output layer");
        let mut logits = match &x {
            None => batch.dot(&out.weights),
            Some(x) => x.dot(&out.weights),
        };
        logits += &out.bias;
        Ok(log_softmax(&logits))
    }

    /// Probability of the "match" class for every row.
    pub fn predict_match_prob(&self, batch: ArrayView2<f64>) -> Result<Vec<f64>> {
        let lp = self.predict_log_probs(batch)?;
        Ok(lp.column(Label::Match.class()).iter().map(|x| x.exp()).collect())
    }
}
