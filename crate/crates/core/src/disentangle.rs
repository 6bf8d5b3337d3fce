//! Style (T) and semantics (S) heads trained with opposing supervised
//! contrastive objectives.
//!
//! With `L_c` the contrastive loss under cluster labels and `L_fr` under
//! real/fake labels, the style head minimizes `L_fr − L_c` and the semantics
//! head minimizes `L_c − L_fr`. Both heads are bias-free `D×D` projections
//! whose outputs are renormalized to the unit sphere before the loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Label, Split};
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};
use crate::supcon::{supcon_loss_and_grad, ContrastiveBatch, DEFAULT_TEMPERATURE};

pub const MODEL_MAGIC: &[u8; 5] = b"CPRJ1";

const INIT_NOISE: f64 = 0.01;
const MIN_PROJECTED_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Style,
    Semantics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub kind: HeadKind,
    pub weights: Matrix<f32>,
}

impl LinearHead {
    pub fn new(kind: HeadKind, weights: Matrix<f32>) -> Result<Self> {
        if weights.rows() != weights.cols() {
            return Err(Error::shape(
                "square weights",
                format!("{}x{}", weights.rows(), weights.cols()),
            ));
        }
        if weights.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::Train("head weights must be finite".into()));
        }
        Ok(Self { kind, weights })
    }

    pub fn identity(kind: HeadKind, dim: usize) -> Self {
        Self {
            kind,
            weights: Matrix::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights_f64(&self) -> Matrix<f64> {
        self.weights.to_f64()
    }
}

/// The (T, S) pair as stored in a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadPair {
    pub style: LinearHead,
    pub semantics: LinearHead,
}

impl HeadPair {
    pub fn dim(&self) -> usize {
        self.style.dim()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            batch_size: 1024,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            temperature: DEFAULT_TEMPERATURE,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Train("epochs must be >= 1".into()));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Train("betas must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Train("learning rate must be > 0".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Train("temperature must be > 0".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Train("eps must be > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

/// Loss components on one set of projected features. `l_t + l_s == 0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Objectives {
    pub l_c: f64,
    pub l_fr: f64,
    pub l_t: f64,
    pub l_s: f64,
}

impl Objectives {
    pub fn from_components(l_c: f64, l_fr: f64) -> Self {
        Self {
            l_c,
            l_fr,
            l_t: l_fr - l_c,
            l_s: l_c - l_fr,
        }
    }

    fn accumulate(&mut self, other: &Objectives) {
        self.l_c += other.l_c;
        self.l_fr += other.l_fr;
        self.l_t += other.l_t;
        self.l_s += other.l_s;
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            l_c: self.l_c * k,
            l_fr: self.l_fr * k,
            l_t: self.l_t * k,
            l_s: self.l_s * k,
        }
    }
}

/// Per-epoch means over batches. `style` is measured on T-projected features
/// (T minimizes its `l_t`), `semantics` on S-projected features (S minimizes
/// its `l_s`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub batches: usize,
    pub style: Objectives,
    pub semantics: Objectives,
}

impl EpochRecord {
    pub fn mean_l_t(&self) -> f64 {
        self.style.l_t
    }

    pub fn mean_l_s(&self) -> f64 {
        self.semantics.l_s
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone)]
pub struct TrainedHeads {
    pub heads: HeadPair,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchItem {
    pub row: usize,
    /// Index of the cluster within the split.
    pub cluster: usize,
    pub label: Label,
}

/// Splits the clusters of `split` into batches of whole clusters, shuffled by
/// `(seed, epoch)`. Clusters are packed in shuffled order while they fit in
/// `batch_size` items; a trailing batch with fewer than two clusters is
/// dropped.
pub fn sample_batches(
    dataset: &EmbeddingDataset,
    split: Split,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<BatchItem>>> {
    let clusters = dataset.split(split);
    if clusters.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    if let Some(c) = clusters.iter().find(|c| c.size() > batch_size) {
        return Err(Error::Train(format!(
            "batch size {batch_size} is smaller than cluster {} ({} items)",
            c.cluster_id,
            c.size()
        )));
    }
    let mut order: Vec<usize> = (0..clusters.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);

    let mut batches = Vec::new();
    let mut current: Vec<BatchItem> = Vec::new();
    let mut in_current = 0usize;
    for k in order {
        let c = &clusters[k];
        if current.len() + c.size() > batch_size {
            batches.push(std::mem::take(&mut current));
            in_current = 0;
        }
        current.extend(c.members().map(|(row, label)| BatchItem {
            row,
            cluster: k,
            label,
        }));
        in_current += 1;
    }
    if in_current >= 2 {
        batches.push(current);
    }
    Ok(batches)
}

/// Projection output with the intermediates needed for backprop.
#[derive(Debug, Clone)]
pub struct Projected {
    pub unit: Matrix<f64>,
    pub norms: Vec<f64>,
}

/// Row `i` of the result is `normalize(W · x_i)`.
pub fn project_rows(weights: &Matrix<f64>, features: &Matrix<f64>) -> Result<Projected> {
    let d = weights.rows();
    if weights.cols() != features.cols() {
        return Err(Error::shape(
            format!("features with {} columns", weights.cols()),
            features.cols(),
        ));
    }
    let mut unit = Matrix::zeros(features.rows(), d);
    let mut norms = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let x = features.row(i);
        let out = unit.row_mut(i);
        for (a, o) in out.iter_mut().enumerate() {
            *o = dot(weights.row(a), x);
        }
        let n = dot(out, out).sqrt();
        if !(n >= MIN_PROJECTED_NORM) {
            return Err(Error::DegenerateProjection(i));
        }
        out.iter_mut().for_each(|v| *v /= n);
        norms.push(n);
    }
    Ok(Projected { unit, norms })
}

/// Projects f32 features through a head; output rows have unit norm.
pub fn project(head: &LinearHead, features: &Matrix<f32>) -> Result<Matrix<f32>> {
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Train("non-finite input to projection".into()));
    }
    project_rows(&head.weights_f64(), &features.to_f64()).map(|p| p.unit.to_f32())
}

/// Objectives of a head on one batch and the gradient of that head's own loss
/// (`l_t` for style, `l_s` for semantics) with respect to its weights.
pub fn head_objective_and_grad(
    weights: &Matrix<f64>,
    features: &Matrix<f64>,
    cluster_labels: &[usize],
    fake_labels: &[usize],
    kind: HeadKind,
    temperature: f64,
) -> Result<(Objectives, Vec<f64>)> {
    let d = weights.rows();
    let proj = project_rows(weights, features)?;
    let z = proj.unit.as_slice();
    let (l_c, g_c) = supcon_loss_and_grad(&ContrastiveBatch::new(z, d, cluster_labels, temperature)?)?;
    let (l_fr, g_fr) = supcon_loss_and_grad(&ContrastiveBatch::new(z, d, fake_labels, temperature)?)?;
    let objectives = Objectives::from_components(l_c, l_fr);

    let sign = match kind {
        HeadKind::Style => 1.0,
        HeadKind::Semantics => -1.0,
    };
    let mut grad_w = vec![0.0; d * d];
    let mut gy = vec![0.0; d];
    for i in 0..features.rows() {
        let zi = proj.unit.row(i);
        let gz: Vec<f64> = (0..d)
            .map(|c| sign * (g_fr[i * d + c] - g_c[i * d + c]))
            .collect();
        // d normalize(y)/dy = (I − z zᵀ)/‖y‖
        let radial = dot(&gz, zi);
        for c in 0..d {
            gy[c] = (gz[c] - radial * zi[c]) / proj.norms[i];
        }
        let x = features.row(i);
        for (a, &ga) in gy.iter().enumerate() {
            if ga == 0.0 {
                continue;
            }
            let row = &mut grad_w[a * d..(a + 1) * d];
            for (g, &xb) in row.iter_mut().zip(x) {
                *g += ga * xb;
            }
        }
    }
    Ok((objectives, grad_w))
}

/// Identity plus uniform noise in ±0.01, T drawn before S.
pub fn init_heads(dim: usize, seed: u64) -> HeadPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |kind| {
        let mut w = Matrix::<f32>::identity(dim);
        for v in w.as_mut_slice() {
            *v += rng.random_range(-INIT_NOISE..INIT_NOISE) as f32;
        }
        LinearHead { kind, weights: w }
    };
    let style = draw(HeadKind::Style);
    let semantics = draw(HeadKind::Semantics);
    HeadPair { style, semantics }
}

/// Trains both heads on the train split.
pub fn train_disentangle(dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<TrainedHeads> {
    config.validate()?;
    if !dataset.is_normalized() {
        return Err(Error::NotNormalized("training dataset"));
    }
    let clusters = dataset.split(Split::Train);
    if clusters.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let min_size = clusters.iter().map(|c| c.size()).min().unwrap_or(0);
    if config.batch_size < 2 * min_size {
        return Err(Error::Train(format!(
            "batch size {} must hold at least two clusters of {} items",
            config.batch_size, min_size
        )));
    }

    let d = dataset.dim();
    let init = init_heads(d, config.seed);
    let mut w_t = init.style.weights_f64();
    let mut w_s = init.semantics.weights_f64();
    let mut state_t = AdamWState::new(d * d);
    let mut state_s = AdamWState::new(d * d);
    let opt = config.optimizer();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        let batches = sample_batches(dataset, Split::Train, config.batch_size, config.seed, epoch as u64)?;
        if batches.is_empty() {
            return Err(Error::Train(format!("epoch {epoch}: no batch with two clusters")));
        }
        let mut style_sum = Objectives::default();
        let mut sem_sum = Objectives::default();
        for (bi, batch) in batches.iter().enumerate() {
            let mut x = Matrix::<f64>::zeros(batch.len(), d);
            for (i, item) in batch.iter().enumerate() {
                for (o, &v) in x.row_mut(i).iter_mut().zip(dataset.images().row(item.row)) {
                    *o = v as f64;
                }
            }
            let cl: Vec<usize> = batch.iter().map(|it| it.cluster).collect();
            let fr: Vec<usize> = batch.iter().map(|it| it.label.as_index()).collect();
            let step_err = |e: Error| Error::Train(format!("epoch {epoch} batch {bi}: {e}"));

            let (obj_t, g_t) =
                head_objective_and_grad(&w_t, &x, &cl, &fr, HeadKind::Style, config.temperature)
                    .map_err(step_err)?;
            let (obj_s, g_s) =
                head_objective_and_grad(&w_s, &x, &cl, &fr, HeadKind::Semantics, config.temperature)
                    .map_err(step_err)?;

            let b = batch.len() as f64;
            let bound = b * ((b - 1.0).ln() + 2.0 / config.temperature);
            for obj in [&obj_t, &obj_s] {
                if !(obj.l_t.is_finite() && obj.l_s.is_finite()) {
                    return Err(Error::Train(format!("epoch {epoch} batch {bi}: non-finite loss")));
                }
                if obj.l_t.abs() > bound {
                    return Err(Error::Train(format!(
                        "epoch {epoch} batch {bi}: |loss| {} exceeds bound {bound}",
                        obj.l_t.abs()
                    )));
                }
                debug_assert_eq!(obj.l_t + obj.l_s, 0.0);
            }
            if g_t.iter().chain(&g_s).any(|g| !g.is_finite()) {
                return Err(Error::Train(format!("epoch {epoch} batch {bi}: non-finite gradient")));
            }
            style_sum.accumulate(&obj_t);
            sem_sum.accumulate(&obj_s);

            adamw_step(w_t.as_mut_slice(), &g_t, &mut state_t, &opt)?;
            adamw_step(w_s.as_mut_slice(), &g_s, &mut state_s, &opt)?;
        }
        let k = 1.0 / batches.len() as f64;
        history.epochs.push(EpochRecord {
            epoch,
            batches: batches.len(),
            style: style_sum.scaled(k),
            semantics: sem_sum.scaled(k),
        });
    }

    Ok(TrainedHeads {
        heads: HeadPair {
            style: LinearHead::new(HeadKind::Style, w_t.to_f32())?,
            semantics: LinearHead::new(HeadKind::Semantics, w_s.to_f32())?,
        },
        history,
    })
}

/// `CPRJ1`, u32 LE dim, then T and S as row-major f32 LE.
pub fn encode_heads(heads: &HeadPair) -> Vec<u8> {
    let d = heads.dim();
    let mut out = Vec::with_capacity(9 + 8 * d * d);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(d as u32).to_le_bytes());
    for head in [&heads.style, &heads.semantics] {
        for v in head.weights.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_heads(bytes: &[u8]) -> Result<HeadPair> {
    let bad = |reason: String| Error::Format {
        what: "model",
        reason,
    };
    if bytes.len() < 9 || &bytes[..5] != MODEL_MAGIC {
        return Err(bad("missing CPRJ1 magic".into()));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let expected = 9 + 8 * d * d;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for dim {d}, got {}", bytes.len())));
    }
    let floats: Vec<f32> = bytes[9..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let (t, s) = floats.split_at(d * d);
    Ok(HeadPair {
        style: LinearHead::new(HeadKind::Style, Matrix::from_vec(d, d, t.to_vec())?)?,
        semantics: LinearHead::new(HeadKind::Semantics, Matrix::from_vec(d, d, s.to_vec())?)?,
    })
}

pub fn save_heads(heads: &HeadPair, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_heads(heads)).map_err(|e| Error::io(path, e))
}

pub fn load_heads(path: impl AsRef<Path>) -> Result<HeadPair> {
    let path = path.as_ref();
    decode_heads(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
