//! Linear real/fake probe: ℓ2-penalized logistic regression.
//!
//! The objective is the mean logistic loss plus `λ‖w‖²/2`, bias unpenalized.
//! It is minimized with damped Newton steps (Cholesky solve, Armijo
//! backtracking) until the gradient norm drops to `1e-6`.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{balanced_sample, EmbeddingDataset, Label, Split};
use crate::disentangle::HeadPair;
use crate::error::{Error, Result};
use crate::features::{gather, FeatureSpace, Source};
use crate::matrix::Matrix;

pub const PROBE_MAGIC: &[u8; 5] = b"CPPB1";
pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const GRAD_TOLERANCE: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 200;
/// Candidate penalties for the optional validation sweep.
pub const SWEEP_LAMBDAS: [f64; 9] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1e0, 1e1, 1e2];

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub weights: Vec<f32>,
    pub bias: f32,
    pub space: FeatureSpace,
    /// Not stored in probe files.
    pub lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub score: f64,
}

impl ProbeModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(x)
            .map(|(&w, &v)| w as f64 * v)
            .sum::<f64>()
            + self.bias as f64
    }
}

/// Logistic objective over a fixed design, parameters laid out as `[w; b]`.
pub struct LogisticObjective<'a> {
    x: &'a Matrix<f64>,
    y: Vec<f64>,
    lambda: f64,
}

impl<'a> LogisticObjective<'a> {
    pub fn new(x: &'a Matrix<f64>, labels: &[Label], lambda: f64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::shape(format!("{} labels", x.rows()), labels.len()));
        }
        if x.rows() == 0 {
            return Err(Error::Probe("empty training set".into()));
        }
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Probe(format!("lambda must be finite and >= 0, got {lambda}")));
        }
        Ok(Self {
            x,
            y: labels.iter().map(|&l| l.as_index() as f64).collect(),
            lambda,
        })
    }

    fn dim(&self) -> usize {
        self.x.cols()
    }

    fn score(&self, i: usize, theta: &[f64]) -> f64 {
        let d = self.dim();
        self.x.row(i).iter().zip(&theta[..d]).map(|(a, b)| a * b).sum::<f64>() + theta[d]
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let d = self.dim();
        let n = self.x.rows() as f64;
        let data: f64 = (0..self.x.rows())
            .map(|i| {
                let s = self.score(i, theta);
                softplus(s) - self.y[i] * s
            })
            .sum();
        let penalty: f64 = theta[..d].iter().map(|w| w * w).sum();
        data / n + 0.5 * self.lambda * penalty
    }

    pub fn gradient(&self, theta: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let n = self.x.rows() as f64;
        let mut g = vec![0.0; d + 1];
        for i in 0..self.x.rows() {
            let r = sigmoid(self.score(i, theta)) - self.y[i];
            for (gj, xj) in g.iter_mut().zip(self.x.row(i)) {
                *gj += r * xj;
            }
            g[d] += r;
        }
        for (j, gj) in g.iter_mut().enumerate() {
            *gj /= n;
            if j < d {
                *gj += self.lambda * theta[j];
            }
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> DMatrix<f64> {
        let d = self.dim();
        let n = self.x.rows() as f64;
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        let mut xt = vec![0.0; d + 1];
        for i in 0..self.x.rows() {
            let p = sigmoid(self.score(i, theta));
            let w = p * (1.0 - p) / n;
            xt[..d].copy_from_slice(self.x.row(i));
            xt[d] = 1.0;
            for a in 0..=d {
                let wa = w * xt[a];
                for b in a..=d {
                    h[(a, b)] += wa * xt[b];
                }
            }
        }
        for a in 0..=d {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
            if a < d {
                h[(a, a)] += self.lambda;
            }
        }
        h
    }
}

fn softplus(s: f64) -> f64 {
    if s > 0.0 {
        s + (-s).exp().ln_1p()
    } else {
        s.exp().ln_1p()
    }
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minimizes the objective from zero. Returns `[w; b]`.
pub fn minimize(objective: &LogisticObjective<'_>) -> Result<Vec<f64>> {
    let d = objective.dim();
    let mut theta = vec![0.0; d + 1];
    let mut value = objective.value(&theta);
    let mut grad = objective.gradient(&theta);
    for _ in 0..MAX_ITERATIONS {
        if l2(&grad) <= GRAD_TOLERANCE {
            return Ok(theta);
        }
        let h = objective.hessian(&theta);
        let g = DVector::from_column_slice(&grad);
        let mut jitter = 0.0;
        let step = loop {
            let mut hj = h.clone();
            for a in 0..=d {
                hj[(a, a)] += jitter;
            }
            if let Some(ch) = hj.cholesky() {
                break ch.solve(&g);
            }
            jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
            if jitter > 1e6 {
                return Err(Error::NoConvergence {
                    iterations: MAX_ITERATIONS,
                    grad_norm: l2(&grad),
                });
            }
        };
        let slope: f64 = -step.iter().zip(&grad).map(|(s, g)| s * g).sum::<f64>();
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(p, s)| p - t * s).collect();
            let v = objective.value(&trial);
            if v <= value + 1e-4 * t * slope {
                theta = trial;
                value = v;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        grad = objective.gradient(&theta);
        if !accepted {
            break;
        }
    }
    let grad_norm = l2(&grad);
    if grad_norm <= GRAD_TOLERANCE {
        Ok(theta)
    } else {
        Err(Error::NoConvergence {
            iterations: MAX_ITERATIONS,
            grad_norm,
        })
    }
}

/// Fits a probe on arbitrary labeled features.
pub fn fit_features(
    x: &Matrix<f64>,
    labels: &[Label],
    lambda: f64,
    space: FeatureSpace,
) -> Result<ProbeModel> {
    let objective = LogisticObjective::new(x, labels, lambda)?;
    let theta = minimize(&objective)?;
    let d = x.cols();
    Ok(ProbeModel {
        weights: theta[..d].iter().map(|&w| w as f32).collect(),
        bias: theta[d] as f32,
        space,
        lambda: Some(lambda),
    })
}

fn probe_features(
    dataset: &EmbeddingDataset,
    rows: &[usize],
    space: FeatureSpace,
    heads: Option<&HeadPair>,
) -> Result<Matrix<f64>> {
    if let Some(h) = heads {
        if h.dim() != dataset.dim() {
            return Err(Error::shape(format!("heads of dim {}", dataset.dim()), h.dim()));
        }
    }
    gather(dataset, Source::Images, rows, space, heads, false)
}

/// Fits on the balanced train sample (every real plus one fake per cluster).
pub fn fit_probe(
    dataset: &EmbeddingDataset,
    space: FeatureSpace,
    heads: Option<&HeadPair>,
    lambda: f64,
    seed: u64,
) -> Result<ProbeModel> {
    let sample = balanced_sample(dataset, Split::Train, seed)?;
    if sample.is_empty() {
        return Err(Error::EmptySplit(Split::Train.to_string()));
    }
    let rows: Vec<usize> = sample.iter().map(|s| s.0).collect();
    let labels: Vec<Label> = sample.iter().map(|s| s.1).collect();
    let x = probe_features(dataset, &rows, space, heads)?;
    fit_features(&x, &labels, lambda, space)
}

/// Fits one probe per candidate λ and keeps the one with the best overall
/// accuracy on the validation split; ties go to the smaller λ.
pub fn fit_probe_sweep(
    dataset: &EmbeddingDataset,
    space: FeatureSpace,
    heads: Option<&HeadPair>,
    seed: u64,
) -> Result<ProbeModel> {
    let items = dataset.split_items(Split::Validation);
    if items.is_empty() {
        return Err(Error::EmptySplit(Split::Validation.to_string()));
    }
    let rows: Vec<usize> = items.iter().map(|i| i.0).collect();
    let x_val = probe_features(dataset, &rows, space, heads)?;
    let mut best: Option<(f64, ProbeModel)> = None;
    for &lambda in &SWEEP_LAMBDAS {
        let model = match fit_probe(dataset, space, heads, lambda, seed) {
            Ok(m) => m,
            Err(Error::NoConvergence { .. }) => continue,
            Err(e) => return Err(e),
        };
        let preds = predict(&model, &x_val)?;
        let correct = preds.iter().zip(&items).filter(|(p, it)| p.label == it.1).count();
        let acc = correct as f64 / items.len() as f64;
        if best.as_ref().is_none_or(|(b, _)| acc > *b) {
            best = Some((acc, model));
        }
    }
    best.map(|(_, m)| m).ok_or(Error::NoConvergence {
        iterations: MAX_ITERATIONS,
        grad_norm: f64::NAN,
    })
}

/// `fake` iff `w·x + b > 0`.
pub fn predict(model: &ProbeModel, features: &Matrix<f64>) -> Result<Vec<Prediction>> {
    if features.cols() != model.dim() {
        return Err(Error::shape(format!("{} columns", model.dim()), features.cols()));
    }
    Ok(features
        .iter_rows()
        .map(|x| {
            let score = model.score(x);
            Prediction {
                label: if score > 0.0 { Label::Fake } else { Label::Real },
                score,
            }
        })
        .collect())
}

/// `CPPB1`, u32 LE dim, dim+1 f32 LE (weights then bias), one space tag byte.
pub fn encode_probe(model: &ProbeModel) -> Vec<u8> {
    let mut out = Vec::with_capacity(10 + 4 * (model.dim() + 1));
    out.extend_from_slice(PROBE_MAGIC);
    out.extend_from_slice(&(model.dim() as u32).to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&model.bias.to_le_bytes());
    out.push(model.space.tag());
    out
}

pub fn decode_probe(bytes: &[u8]) -> Result<ProbeModel> {
    let bad = |reason: String| Error::Format {
        what: "probe",
        reason,
    };
    if bytes.len() < 9 || &bytes[..5] != PROBE_MAGIC {
        return Err(bad("missing CPPB1 magic".into()));
    }
    let d = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let expected = 9 + 4 * (d + 1) + 1;
    if bytes.len() != expected {
        return Err(bad(format!("expected {expected} bytes for dim {d}, got {}", bytes.len())));
    }
    let vals: Vec<f32> = bytes[9..expected - 1]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    let tag = bytes[expected - 1];
    let space = FeatureSpace::from_tag(tag).ok_or_else(|| bad(format!("unknown space tag {tag}")))?;
    Ok(ProbeModel {
        weights: vals[..d].to_vec(),
        bias: vals[d],
        space,
        lambda: None,
    })
}

pub fn save_probe(model: &ProbeModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_probe(model)).map_err(|e| Error::io(path, e))
}

pub fn load_probe(path: impl AsRef<Path>) -> Result<ProbeModel> {
    let path = path.as_ref();
    decode_probe(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
