//! Exact O(n²) t-SNE.
//!
//! Gaussian conditionals are calibrated per point by bisection on the
//! precision until the entropy matches `ln(perplexity)` within 1e-5, then
//! symmetrized. The embedding starts from a Gaussian with standard deviation
//! 1e-4 and follows the classical schedule: early exaggeration ×12 and
//! momentum 0.5 for the first 250 iterations, then momentum 0.8, with
//! per-coordinate adaptive gains. Momentum and gains restart with the second
//! phase.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Largest input accepted by the exact implementation.
pub const MAX_POINTS: usize = 5000;
pub const KL_CHECKPOINT_EVERY: usize = 50;

const ENTROPY_TOLERANCE: f64 = 1e-5;
const MAX_BISECTION_STEPS: usize = 200;
const MIN_PROBABILITY: f64 = 1e-12;
const MIN_GAIN: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iterations: usize,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iterations: 250,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn describe(&self) -> String {
        format!(
            "perplexity={} iterations={} learning_rate={} exaggeration={} exaggeration_iterations={} momentum={}/{} seed={}",
            self.perplexity,
            self.iterations,
            self.learning_rate,
            self.exaggeration,
            self.exaggeration_iterations,
            self.initial_momentum,
            self.final_momentum,
            self.seed
        )
    }
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// n×2
    pub coords: Matrix<f64>,
    /// (iteration, KL(P‖Q)) after every checkpoint iteration (1-based).
    pub kl_history: Vec<(usize, f64)>,
}

impl TsneResult {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_history
            .iter()
            .find(|(it, _)| *it == iteration)
            .map(|(_, kl)| *kl)
    }
}

fn squared_distances(x: &Matrix<f64>) -> Vec<f64> {
    let n = x.rows();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = x.row(i);
        for (j, out) in row.iter_mut().enumerate() {
            if j != i {
                *out = xi
                    .iter()
                    .zip(x.row(j))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
            }
        }
    });
    d
}

/// Conditional distribution of row `i` at precision `beta`, and its entropy.
fn conditional(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut sum = 0.0;
    let mut weighted = 0.0;
    for (j, (&d, p)) in dist.iter().zip(out.iter_mut()).enumerate() {
        if j == i {
            *p = 0.0;
            continue;
        }
        // shift by the nearest distance so the closest neighbor never underflows
        *p = (-(d - min) * beta).exp();
        sum += *p;
        weighted += (d - min) * *p;
    }
    for p in out.iter_mut() {
        *p /= sum;
    }
    sum.ln() + beta * weighted / sum
}

/// Symmetric joint affinities `P` (n×n, row-major, zero diagonal, sums to 1).
pub fn affinities(x: &Matrix<f64>, perplexity: f64) -> Result<Vec<f64>> {
    let n = x.rows();
    if !(perplexity > 0.0) || perplexity >= (n as f64 - 1.0) {
        return Err(Error::Tsne(format!(
            "perplexity {perplexity} must lie in (0, n-1) for n = {n}"
        )));
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    cond.par_chunks_mut(n)
        .enumerate()
        .try_for_each(|(i, row)| {
            let di = &dist[i * n..(i + 1) * n];
            let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
            for _ in 0..MAX_BISECTION_STEPS {
                let h = conditional(di, i, beta, row);
                if !h.is_finite() {
                    return Err(Error::Tsne(format!("non-finite entropy at row {i}")));
                }
                if (h - target).abs() < ENTROPY_TOLERANCE {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_infinite() { beta * 2.0 } else { (beta + hi) / 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
            }
            Ok(())
        })?;
    let mut p = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) * scale).max(MIN_PROBABILITY);
            }
        }
    }
    Ok(p)
}

fn kl_divergence(p: &[f64], y: &[f64], n: usize) -> f64 {
    let (num, total) = student_t(y, n);
    let mut kl = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let pij = p[i * n + j];
                let qij = (num[i * n + j] / total).max(MIN_PROBABILITY);
                kl += pij * (pij / qij).ln();
            }
        }
    }
    kl
}

/// Unnormalized Student-t kernel and its sum.
fn student_t(y: &[f64], n: usize) -> (Vec<f64>, f64) {
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if j != i {
                let dx = y[2 * i] - y[2 * j];
                let dy = y[2 * i + 1] - y[2 * j + 1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let total = num.iter().sum();
    (num, total)
}

pub fn tsne_embed(features: &Matrix<f64>, config: &TsneConfig) -> Result<TsneResult> {
    let n = features.rows();
    if n < 4 {
        return Err(Error::Tsne(format!("need at least 4 points, got {n}")));
    }
    if n > MAX_POINTS {
        return Err(Error::Tsne(format!(
            "{n} points exceed the exact-method limit of {MAX_POINTS}; subsample first"
        )));
    }
    if config.iterations == 0 {
        return Err(Error::Tsne("iterations must be >= 1".into()));
    }
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::Tsne("non-finite input feature".into()));
    }
    let p = affinities(features, config.perplexity)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0; 2 * n];
    let mut grad = vec![0.0; 2 * n];
    let mut kl_history = Vec::new();

    for it in 0..config.iterations {
        if it == config.exaggeration_iterations {
            // the second phase starts from rest so exaggerated steps do not carry over
            update.fill(0.0);
            gains.fill(1.0);
        }
        let early = it < config.exaggeration_iterations;
        let exaggeration = if early { config.exaggeration } else { 1.0 };
        let momentum = if early {
            config.initial_momentum
        } else {
            config.final_momentum
        };

        let (num, total) = student_t(&y, n);
        grad.par_chunks_mut(2).enumerate().for_each(|(i, g)| {
            let (mut gx, mut gy) = (0.0, 0.0);
            for j in 0..n {
                if j == i {
                    continue;
                }
                let w = num[i * n + j];
                let m = (exaggeration * p[i * n + j] - w / total) * w;
                gx += m * (y[2 * i] - y[2 * j]);
                gy += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            g[0] = 4.0 * gx;
            g[1] = 4.0 * gy;
        });

        for k in 0..2 * n {
            let gain: f64 = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                gains[k] * 0.8
            };
            gains[k] = gain.max(MIN_GAIN);
            update[k] = momentum * update[k] - config.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let mean = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            for i in 0..n {
                y[2 * i + c] -= mean;
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Tsne(format!("non-finite embedding at iteration {}", it + 1)));
        }

        let done = it + 1;
        if done % KL_CHECKPOINT_EVERY == 0 || done == config.iterations {
            let kl = kl_divergence(&p, &y, n);
            if !kl.is_finite() {
                return Err(Error::Tsne(format!("non-finite KL at iteration {done}")));
            }
            kl_history.push((done, kl));
        }
    }
    Ok(TsneResult {
        coords: Matrix::from_vec(n, 2, y)?,
        kl_history,
    })
}

/// Per-point metadata for plot output.
#[derive(Debug, Clone)]
pub struct PointInfo {
    pub row: usize,
    pub label: Label,
    pub cluster_id: String,
}

/// CSV with a leading `#` comment echoing the configuration, then
/// `row,label,cluster_id,x,y`.
pub fn write_csv<W: Write>(
    out: W,
    comment: &str,
    points: &[PointInfo],
    coords: &Matrix<f64>,
) -> Result<()> {
    let mut out = out;
    writeln!(out, "# {comment}").map_err(|e| Error::io("csv", e))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Tsne(format!("csv: {e}"));
    w.write_record(["row", "label", "cluster_id", "x", "y"])
        .map_err(csv_err)?;
    for (p, xy) in points.iter().zip(coords.iter_rows()) {
        w.write_record([
            p.row.to_string(),
            p.label.to_string(),
            p.cluster_id.clone(),
            xy[0].to_string(),
            xy[1].to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("csv", e))
}

pub const REAL_COLOR: &str = "#1f77b4";
pub const FAKE_COLOR: &str = "#d62728";

/// Scatter plot: real points blue, fake points red.
pub fn render_svg(points: &[PointInfo], coords: &Matrix<f64>) -> String {
    let size = 800.0;
    let margin = 20.0;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for r in coords.iter_rows() {
        xmin = xmin.min(r[0]);
        xmax = xmax.max(r[0]);
        ymin = ymin.min(r[1]);
        ymax = ymax.max(r[1]);
    }
    let span = (xmax - xmin).max(ymax - ymin).max(1e-12);
    let scale = (size - 2.0 * margin) / span;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (p, r) in points.iter().zip(coords.iter_rows()) {
        let cx = margin + (r[0] - xmin) * scale;
        let cy = size - margin - (r[1] - ymin) * scale;
        let fill = match p.label {
            Label::Real => REAL_COLOR,
            Label::Fake => FAKE_COLOR,
        };
        svg.push_str(&format!(
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{fill}\" fill-opacity=\"0.8\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
