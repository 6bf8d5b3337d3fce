//! Synthetic clustered datasets with a planted fake-only style direction.
//!
//! Cluster centroids are drawn uniformly on the unit sphere of the subspace
//! orthogonal to a single global style direction `s`. For cluster `k`:
//!
//! * real = normalize(c_k + σ·ε)
//! * fake_i = normalize(c_k + σ·ε_i + δ·s)
//! * caption_i = normalize(c_k + σ_t·ε'_i), paired with fake_i
//!
//! where each ε is isotropic Gaussian with `E‖ε‖² = 1`, so σ is the expected
//! noise norm independent of the dimension.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, SemanticCluster, Splits};
use crate::error::{Error, Result};
use crate::matrix::{dot, norm, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub clusters: usize,
    pub fakes: usize,
    pub dim: usize,
    pub style_offset: f64,
    pub semantic_noise: f64,
    pub caption_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            clusters: 200,
            fakes: 5,
            dim: 64,
            style_offset: 0.5,
            semantic_noise: 0.1,
            caption_noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Synth(format!("dim must be >= 2, got {}", self.dim)));
        }
        if self.fakes == 0 {
            return Err(Error::Synth("fakes per cluster must be >= 1".into()));
        }
        if self.clusters < 3 {
            return Err(Error::Synth(format!(
                "need at least 3 clusters to fill train/validation/test, got {}",
                self.clusters
            )));
        }
        for (name, v) in [
            ("style offset", self.style_offset),
            ("semantic noise", self.semantic_noise),
            ("caption noise", self.caption_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Synth(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// (train, validation, test) cluster counts: 80/10/10, each nonempty.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let tenth = ((self.clusters as f64) * 0.1).round().max(1.0) as usize;
        (self.clusters - 2 * tenth, tenth, tenth)
    }
}

/// Generator internals, for tests that need to see what was planted.
#[derive(Debug, Clone)]
pub struct SynthTruth {
    pub style_direction: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    /// Image rows before normalization.
    pub raw_images: Vec<Vec<f64>>,
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<EmbeddingDataset> {
    generate_with_truth(config).map(|(ds, _)| ds)
}

pub fn generate_with_truth(config: &SynthConfig) -> Result<(EmbeddingDataset, SynthTruth)> {
    config.validate()?;
    let d = config.dim;
    let n = config.fakes;
    let k = config.clusters;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise_scale = 1.0 / (d as f64).sqrt();
    let mut gaussian = |scale: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    };

    let style = unit(gaussian(1.0));
    let mut centroids = Vec::with_capacity(k);
    while centroids.len() < k {
        let mut c = gaussian(1.0);
        let along = dot(&c, &style);
        for (ci, si) in c.iter_mut().zip(&style) {
            *ci -= along * si;
        }
        if norm(&c) > 1e-6 {
            centroids.push(unit(c));
        }
    }

    let mut raw_images = Vec::with_capacity(k * (n + 1));
    let mut raw_texts = Vec::with_capacity(k * n);
    for c in &centroids {
        let eps = gaussian(noise_scale);
        raw_images.push(axpy(c, config.semantic_noise, &eps));
        for _ in 0..n {
            let eps = gaussian(noise_scale);
            let mut v = axpy(c, config.semantic_noise, &eps);
            for (vi, si) in v.iter_mut().zip(&style) {
                *vi += config.style_offset * si;
            }
            raw_images.push(v);
        }
        for _ in 0..n {
            let eps = gaussian(noise_scale);
            raw_texts.push(axpy(c, config.caption_noise, &eps));
        }
    }

    let to_rows = |rows: &[Vec<f64>]| -> Vec<Vec<f32>> {
        rows.iter()
            .map(|r| {
                let nr = norm(r);
                r.iter().map(|&v| (v / nr) as f32).collect()
            })
            .collect()
    };
    let images = Matrix::from_rows(d, &to_rows(&raw_images))?;
    let texts = Matrix::from_rows(d, &to_rows(&raw_texts))?;

    let (n_train, n_val, _) = config.split_sizes();
    let mut splits = Splits::default();
    for ci in 0..k {
        let base = ci * (n + 1);
        let cluster = SemanticCluster::new(
            format!("synth-{ci:05}"),
            base,
            (base + 1..base + 1 + n).collect(),
            (ci * n..(ci + 1) * n).collect(),
        );
        if ci < n_train {
            splits.train.push(cluster);
        } else if ci < n_train + n_val {
            splits.validation.push(cluster);
        } else {
            splits.test.push(cluster);
        }
    }

    let ds = EmbeddingDataset::new(images, texts, splits, true)?;
    Ok((
        ds,
        SynthTruth {
            style_direction: style,
            centroids,
            raw_images,
        },
    ))
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn axpy(base: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    base.iter().zip(x).map(|(b, xi)| b + a * xi).collect()
}
