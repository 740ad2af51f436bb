//! Offline-trained MLP backbone with one sigmoid head per action.
//!
//! Training runs in f64 on standardized inputs. Freezing drops the heads,
//! folds the standardization into the first layer and rounds the weights to
//! f32, which is also what the bundle file stores.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{BanditError, ProfilingDataset};
use crate::types::ActionSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Optimizer {
    /// Plain mini-batch gradient descent.
    Sgd,
    Adam,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 64],
            latent_dim: 64,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl ExtractorConfig {
    pub fn from_system(cfg: &crate::config::SystemConfig) -> Self {
        Self {
            learning_rate: cfg.train_learning_rate,
            epochs: cfg.train_epochs,
            batch_size: cfg.train_batch_size,
            seed: cfg.seed,
            ..Self::default()
        }
    }

    fn widths(&self, input_dim: usize) -> Vec<usize> {
        let mut w = vec![input_dim];
        w.extend(&self.hidden);
        w.push(self.latent_dim);
        w
    }
}

/// Frozen dense layer, `rows` outputs × `cols` inputs, row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f32>,
    pub biases: Vec<f32>,
}

/// Frozen backbone φ: context → latent u, ReLU after every layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    pub layers: Vec<FrozenLayer>,
}

impl Extractor {
    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.cols)
    }

    pub fn latent_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.rows)
    }

    pub fn validate(&self) -> Result<(), BanditError> {
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.rows * l.cols || l.biases.len() != l.rows {
                return Err(BanditError::Shape(format!(
                    "layer {i} buffers do not match {}×{}",
                    l.rows, l.cols
                )));
            }
            if i > 0 && self.layers[i - 1].rows != l.cols {
                return Err(BanditError::Shape(format!(
                    "layer {i} input {} != previous output",
                    l.cols
                )));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(BanditError::Shape(format!(
                    "layer {i} has non-finite parameters"
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, context: &[f64]) -> Result<Vec<f64>, BanditError> {
        if context.len() != self.input_dim() {
            return Err(BanditError::DimMismatch {
                expected: self.input_dim(),
                got: context.len(),
            });
        }
        let mut x = context.to_vec();
        for l in &self.layers {
            x = (0..l.rows)
                .map(|r| {
                    let row = &l.weights[r * l.cols..(r + 1) * l.cols];
                    let z = l.biases[r] as f64
                        + row.iter().zip(&x).map(|(&w, &v)| w as f64 * v).sum::<f64>();
                    z.max(0.0)
                })
                .collect();
        }
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    w: DMatrix<f64>,
    b: DVector<f64>,
}

impl Dense {
    fn he(rows: usize, cols: usize, gain: f64, rng: &mut StdRng) -> Self {
        let normal = Normal::new(0.0, (gain / cols as f64).sqrt()).expect("positive std");
        Self {
            w: DMatrix::from_fn(rows, cols, |_, _| normal.sample(rng)),
            b: DVector::zeros(rows),
        }
    }

    /// `x` is batch × cols; returns batch × rows.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = x * self.w.transpose();
        for mut row in z.row_iter_mut() {
            row += self.b.transpose();
        }
        z
    }
}

/// Trainable network: backbone plus heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    backbone: Vec<Dense>,
    heads: Dense,
}

/// Gradient buffers shaped like the network parameters.
#[derive(Debug, Clone)]
pub struct Gradients {
    backbone: Vec<Dense>,
    heads: Dense,
}

impl Network {
    pub fn new(input_dim: usize, cfg: &ExtractorConfig, heads: usize, seed: u64) -> Self {
        let mut rng = StdRng::seed_from_u64(seed);
        let widths = cfg.widths(input_dim);
        let backbone = widths
            .windows(2)
            .map(|w| Dense::he(w[1], w[0], 2.0, &mut rng))
            .collect();
        let heads = Dense::he(heads, cfg.latent_dim, 1.0, &mut rng);
        Self { backbone, heads }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.w.nrows()
    }

    /// All parameters, layer by layer (weights row-major, then biases), heads last.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.backbone.iter().chain([&self.heads]) {
            out.extend(l.w.transpose().iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let mut i = 0;
        for l in self.backbone.iter_mut().chain([&mut self.heads]) {
            let (r, c) = l.w.shape();
            l.w = DMatrix::from_row_slice(r, c, &p[i..i + r * c]);
            i += r * c;
            l.b = DVector::from_column_slice(&p[i..i + r]);
            i += r;
        }
    }

    pub fn zero_all(&mut self) {
        for l in self.backbone.iter_mut().chain([&mut self.heads]) {
            l.w.fill(0.0);
            l.b.fill(0.0);
        }
    }

    pub fn set_head_biases(&mut self, biases: &[f64]) {
        self.heads.b = DVector::from_column_slice(biases);
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, DMatrix<f64>) {
        let mut acts = vec![x.clone()];
        for l in &self.backbone {
            let z = l.apply(acts.last().expect("input present"));
            acts.push(z.map(|v| v.max(0.0)));
        }
        let logits = self.heads.apply(acts.last().expect("latent present"));
        (acts, logits)
    }

    /// Sigmoid output of every head for each row of `x`.
    pub fn head_probs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).1.map(sigmoid)
    }

    pub fn latent(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0.pop().expect("latent present")
    }

    /// Masked binary cross-entropy: row j only scores head `heads[j]`.
    pub fn loss(&self, x: &DMatrix<f64>, heads: &[usize], labels: &[f64]) -> f64 {
        let logits = self.forward_cached(x).1;
        heads
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(j, (&h, &y))| bce_with_logit(logits[(j, h)], y))
            .sum::<f64>()
            / heads.len() as f64
    }

    pub fn loss_and_gradients(
        &self,
        x: &DMatrix<f64>,
        heads: &[usize],
        labels: &[f64],
    ) -> (f64, Gradients) {
        let n = heads.len() as f64;
        let (acts, logits) = self.forward_cached(x);
        let mut d_logits = DMatrix::zeros(logits.nrows(), logits.ncols());
        let mut loss = 0.0;
        for (j, (&h, &y)) in heads.iter().zip(labels).enumerate() {
            let z = logits[(j, h)];
            loss += bce_with_logit(z, y);
            d_logits[(j, h)] = (sigmoid(z) - y) / n;
        }
        let latent = acts.last().expect("latent present");
        let heads_grad = Dense {
            w: d_logits.transpose() * latent,
            b: column_sums(&d_logits),
        };
        let mut d_act = &d_logits * &self.heads.w;
        let mut grads = Vec::with_capacity(self.backbone.len());
        for (k, l) in self.backbone.iter().enumerate().rev() {
            let out = &acts[k + 1];
            let d_pre = d_act.zip_map(out, |g, a| if a > 0.0 { g } else { 0.0 });
            let input = &acts[k];
            grads.push(Dense {
                w: d_pre.transpose() * input,
                b: column_sums(&d_pre),
            });
            if k > 0 {
                d_act = &d_pre * &l.w;
            }
        }
        grads.reverse();
        (
            loss / n,
            Gradients {
                backbone: grads,
                heads: heads_grad,
            },
        )
    }

    fn freeze(&self, mean: &[f64], std: &[f64]) -> Extractor {
        let layers = self
            .backbone
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let (rows, cols) = l.w.shape();
                let mut w = l.w.clone();
                let mut b = l.b.clone();
                if k == 0 {
                    for r in 0..rows {
                        for c in 0..cols {
                            w[(r, c)] = l.w[(r, c)] / std[c];
                            b[r] -= l.w[(r, c)] * mean[c] / std[c];
                        }
                    }
                }
                FrozenLayer {
                    rows,
                    cols,
                    weights: w.transpose().iter().map(|&v| v as f32).collect(),
                    biases: b.iter().map(|&v| v as f32).collect(),
                }
            })
            .collect();
        Extractor { layers }
    }
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in self.backbone.iter().chain([&self.heads]) {
            out.extend(l.w.transpose().iter());
            out.extend(l.b.iter());
        }
        out
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// −[y ln σ(z) + (1−y) ln(1−σ(z))], evaluated without overflow.
fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rows: usize,
    pub epochs: usize,
    pub final_loss: f64,
    /// Rows whose own head, thresholded at 0.5, matches the label.
    pub train_accuracy: f64,
    /// Action indices with no rows; their heads never received gradient.
    pub untrained_heads: Vec<usize>,
}

/// Standardized design matrix plus per-feature statistics.
fn standardize(rows: &[Vec<f64>], dim: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; dim];
    for r in rows {
        for ((s, v), m) in std.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut std {
        *s = if *s > 1e-16 { s.sqrt() } else { 1.0 };
    }
    let x = DMatrix::from_fn(rows.len(), dim, |r, c| (rows[r][c] - mean[c]) / std[c]);
    (x, mean, std)
}

pub const MIN_PROFILING_ROWS: usize = 200;

/// Trains backbone and heads, then returns the frozen backbone.
pub fn train_extractor(
    data: &ProfilingDataset,
    actions: &ActionSet,
    cfg: &ExtractorConfig,
) -> Result<(Extractor, TrainReport), BanditError> {
    let (net, report, mean, std) = train_network(data, actions, cfg)?;
    Ok((net.freeze(&mean, &std), report))
}

/// Training without freezing; exposes the heads for evaluation.
pub fn train_network(
    data: &ProfilingDataset,
    actions: &ActionSet,
    cfg: &ExtractorConfig,
) -> Result<(Network, TrainReport, Vec<f64>, Vec<f64>), BanditError> {
    let dim = data.context_dim().ok_or(BanditError::EmptyDataset)?;
    let m = data.rows.len();
    if m < MIN_PROFILING_ROWS {
        log::warn!("profiling set has {m} rows (< {MIN_PROFILING_ROWS})");
    }
    let mut heads = Vec::with_capacity(m);
    let mut labels = Vec::with_capacity(m);
    let mut contexts = Vec::with_capacity(m);
    for (i, row) in data.rows.iter().enumerate() {
        if row.context.len() != dim {
            return Err(BanditError::DimMismatch {
                expected: dim,
                got: row.context.len(),
            });
        }
        let h = actions
            .index_of(crate::types::Action::new(row.density))
            .ok_or(BanditError::UnknownAction {
                row: i,
                density: row.density,
            })?;
        heads.push(h);
        labels.push(if row.label { 1.0 } else { 0.0 });
        contexts.push(row.context.clone());
    }
    let untrained_heads: Vec<usize> = (0..actions.len()).filter(|h| !heads.contains(h)).collect();
    if !untrained_heads.is_empty() {
        log::warn!(
            "no profiling rows for action indices {untrained_heads:?}; heads left untrained"
        );
    }

    let (x, mean, std) = standardize(&contexts, dim);
    let mut net = Network::new(dim, cfg, actions.len(), cfg.seed);
    let mut rng = StdRng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_DA7A);
    let mut order: Vec<usize> = (0..m).collect();
    let batch = cfg.batch_size.max(1);
    let mut adam = AdamState {
        m: vec![0.0; net.params().len()],
        v: vec![0.0; net.params().len()],
        t: 0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let xb = x.select_rows(chunk);
            let hb: Vec<usize> = chunk.iter().map(|&i| heads[i]).collect();
            let yb: Vec<f64> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, g) = net.loss_and_gradients(&xb, &hb, &yb);
            let mut p = net.params();
            let g = g.flatten();
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (pi, gi) in p.iter_mut().zip(&g) {
                        *pi -= cfg.learning_rate * gi;
                    }
                }
                Optimizer::Adam => {
                    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
                    adam.t += 1;
                    let c1 = 1.0 - b1.powi(adam.t);
                    let c2 = 1.0 - b2.powi(adam.t);
                    for i in 0..p.len() {
                        adam.m[i] = b1 * adam.m[i] + (1.0 - b1) * g[i];
                        adam.v[i] = b2 * adam.v[i] + (1.0 - b2) * g[i] * g[i];
                        p[i] -=
                            cfg.learning_rate * (adam.m[i] / c1) / ((adam.v[i] / c2).sqrt() + eps);
                    }
                }
            }
            net.set_params(&p);
        }
    }

    let final_loss = net.loss(&x, &heads, &labels);
    let probs = net.head_probs(&x);
    let hits = (0..m)
        .filter(|&j| (probs[(j, heads[j])] >= 0.5) == (labels[j] == 1.0))
        .count();
    let report = TrainReport {
        rows: m,
        epochs: cfg.epochs,
        final_loss,
        train_accuracy: hits as f64 / m as f64,
        untrained_heads,
    };
    Ok((net, report, mean, std))
}
