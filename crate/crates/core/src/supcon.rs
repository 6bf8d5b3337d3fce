//! Supervised contrastive loss over a batch of unit-norm features.
//!
//! For anchors `i` with positives `P(i)` (same label, excluding `i`) and
//! candidates `A(i)` (everything except `i`):
//!
//! ```text
//! L = Σ_i  -1/|P(i)| Σ_{p∈P(i)} log( exp(z_i·z_p/τ) / Σ_{a∈A(i)} exp(z_i·z_a/τ) )
//! ```
//!
//! Anchors without positives contribute zero. The loss is a sum over anchors,
//! not a mean. Everything is computed in f64.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::dot;

pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Unit-norm tolerance for batch rows.
const UNIT_TOLERANCE: f64 = 1e-4;

/// Borrowed view of a labeled batch, validated on construction.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a> {
    features: &'a [f64],
    dim: usize,
    labels: &'a [usize],
    temperature: f64,
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(features: &'a [f64], dim: usize, labels: &'a [usize], temperature: f64) -> Result<Self> {
        let b = labels.len();
        if b < 2 {
            return Err(Error::Contrastive(format!("batch needs at least 2 rows, got {b}")));
        }
        if dim == 0 || features.len() != b * dim {
            return Err(Error::shape(format!("{b}x{dim} features"), features.len()));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Contrastive(format!("temperature must be > 0, got {temperature}")));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contrastive(format!("non-finite feature in row {}", i / dim)));
        }
        for (i, row) in features.chunks_exact(dim).enumerate() {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Contrastive(format!("row {i} has norm {n}, expected 1")));
            }
        }
        Ok(Self {
            features,
            dim,
            labels,
            temperature,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn supcon_loss(batch: &ContrastiveBatch<'_>) -> Result<f64> {
    Ok(anchor_terms(batch).iter().map(|t| t.loss).sum())
}

pub fn supcon_grad(batch: &ContrastiveBatch<'_>) -> Result<Vec<f64>> {
    supcon_loss_and_grad(batch).map(|(_, g)| g)
}

/// Loss and `∂L/∂features` (row-major, same shape as the features).
pub fn supcon_loss_and_grad(batch: &ContrastiveBatch<'_>) -> Result<(f64, Vec<f64>)> {
    let terms = anchor_terms(batch);
    let loss: f64 = terms.iter().map(|t| t.loss).sum();
    if !loss.is_finite() {
        return Err(Error::Contrastive("loss is not finite".into()));
    }

    // dL/ds_ij = G_ij, s_ij = z_i·z_j/τ  =>  dL/dz_k = Σ_j (G_kj + G_jk) z_j / τ
    let b = batch.len();
    let d = batch.dim;
    let inv_tau = 1.0 / batch.temperature;
    let mut grad = vec![0.0; b * d];
    grad.par_chunks_mut(d).enumerate().for_each(|(k, gk)| {
        for j in 0..b {
            if j == k {
                continue;
            }
            let coeff = (terms[k].coupling(j, batch) + terms[j].coupling(k, batch)) * inv_tau;
            if coeff != 0.0 {
                for (g, z) in gk.iter_mut().zip(batch.row(j)) {
                    *g += coeff * z;
                }
            }
        }
    });
    Ok((loss, grad))
}

struct AnchorTerm {
    anchor: usize,
    loss: f64,
    /// log Σ_{a≠i} exp(s_ia); NaN marks an anchor without positives.
    log_partition: f64,
    /// 1/|P(i)|
    positive_weight: f64,
    sims: Vec<f64>,
}

impl AnchorTerm {
    /// ∂(anchor loss)/∂s_ij for j ≠ i.
    fn coupling(&self, j: usize, batch: &ContrastiveBatch<'_>) -> f64 {
        if self.positive_weight == 0.0 {
            return 0.0;
        }
        let soft = (self.sims[j] - self.log_partition).exp();
        if batch.labels[j] == batch.labels[self.anchor] {
            soft - self.positive_weight
        } else {
            soft
        }
    }
}

fn anchor_terms(batch: &ContrastiveBatch<'_>) -> Vec<AnchorTerm> {
    let b = batch.len();
    let inv_tau = 1.0 / batch.temperature;
    (0..b)
        .into_par_iter()
        .map(|i| {
            let zi = batch.row(i);
            let sims: Vec<f64> = (0..b)
                .map(|j| if j == i { 0.0 } else { dot(zi, batch.row(j)) * inv_tau })
                .collect();
            let positives = (0..b)
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .count();
            if positives == 0 {
                return AnchorTerm {
                    anchor: i,
                    loss: 0.0,
                    log_partition: f64::NAN,
                    positive_weight: 0.0,
                    sims,
                };
            }
            let max = (0..b)
                .filter(|&j| j != i)
                .map(|j| sims[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = (0..b).filter(|&j| j != i).map(|j| (sims[j] - max).exp()).sum();
            let log_partition = max + sum.ln();
            let pos_sum: f64 = (0..b)
                .filter(|&j| j != i && batch.labels[j] == batch.labels[i])
                .map(|j| sims[j])
                .sum();
            let positive_weight = 1.0 / positives as f64;
            AnchorTerm {
                anchor: i,
                loss: log_partition - pos_sum * positive_weight,
                log_partition,
                positive_weight,
                sims,
            }
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Direct scalar evaluation of the formula, no shared code with the
    /// implementation: plain exp/ln without max-shift.
    pub(crate) fn brute_force_loss(features: &[Vec<f64>], labels: &[usize], tau: f64) -> f64 {
        let b = features.len();
        let mut total = 0.0;
        for i in 0..b {
            let p: Vec<usize> = (0..b).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if p.is_empty() {
                continue;
            }
            let sim = |a: usize| -> f64 {
                features[i].iter().zip(&features[a]).map(|(x, y)| x * y).sum::<f64>() / tau
            };
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| sim(a).exp()).sum();
            let mut inner = 0.0;
            for &q in &p {
                inner += (sim(q).exp() / denom).ln();
            }
            total += -inner / p.len() as f64;
        }
        total
    }

    pub(crate) fn random_unit_batch(rng: &mut ChaCha8Rng, b: usize, d: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(b * d);
        for _ in 0..b {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = dot(&v, &v).sqrt();
            out.extend(v.iter().map(|x| x / n));
        }
        out
    }

    /// Loss without the unit-norm precondition, for finite differences.
    fn loss_unchecked(features: &[f64], dim: usize, labels: &[usize], tau: f64) -> f64 {
        let batch = ContrastiveBatch {
            features,
            dim,
            labels,
            temperature: tau,
        };
        supcon_loss(&batch).unwrap()
    }

    pub(crate) fn fd_max_rel_error(features: &[f64], dim: usize, labels: &[usize], tau: f64, h: f64) -> f64 {
        let batch = ContrastiveBatch::new(features, dim, labels, tau).unwrap();
        let grad = supcon_grad(&batch).unwrap();
        let mut x = features.to_vec();
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let orig = x[idx];
            x[idx] = orig + h;
            let plus = loss_unchecked(&x, dim, labels, tau);
            x[idx] = orig - h;
            let minus = loss_unchecked(&x, dim, labels, tau);
            x[idx] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (grad[idx] - numeric).abs() / grad[idx].abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn three_identical_same_label() {
        let f = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        for tau in [0.05, 0.1, 1.0, 7.0] {
            let b = ContrastiveBatch::new(&f, 2, &[4, 4, 4], tau).unwrap();
            let l = supcon_loss(&b).unwrap();
            assert!((l - 3.0 * 2f64.ln()).abs() < 1e-9, "tau {tau}: {l}");
        }
    }

    #[test]
    fn distinct_labels_give_zero_loss_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_unit_batch(&mut rng, 6, 4);
        let labels = [0, 1, 2, 3, 4, 5];
        let b = ContrastiveBatch::new(&f, 4, &labels, 0.1).unwrap();
        let (l, g) = supcon_loss_and_grad(&b).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_example_matches_brute_force() {
        let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]];
        let flat: Vec<f64> = rows.concat();
        let labels = [0, 0, 1, 1];
        let b = ContrastiveBatch::new(&flat, 2, &labels, 0.5).unwrap();
        let expected = brute_force_loss(&rows, &labels, 0.5);
        // Each anchor: ln(e^2 + 2) - 2
        let closed = 4.0 * ((2f64.exp() + 2.0).ln() - 2.0);
        assert!((expected - closed).abs() < 1e-12);
        assert!((supcon_loss(&b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn two_identical_rows_have_opposite_gradients() {
        let f = [0.6, 0.8, 0.6, 0.8];
        let b = ContrastiveBatch::new(&f, 2, &[1, 1], 0.1).unwrap();
        let g = supcon_grad(&b).unwrap();
        for c in 0..2 {
            assert!((g[c] + g[2 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_batches() {
        let f = [1.0, 0.0, 0.0, 1.0];
        assert!(ContrastiveBatch::new(&f, 2, &[0, 0], 0.0).is_err());
        assert!(ContrastiveBatch::new(&f[..2], 2, &[0], 0.1).is_err());
        assert!(ContrastiveBatch::new(&[2.0, 0.0, 0.0, 1.0], 2, &[0, 0], 0.1).is_err());
        assert!(ContrastiveBatch::new(&[f64::NAN, 0.0, 0.0, 1.0], 2, &[0, 0], 0.1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_unit_batch(&mut rng, 12, 8);
            let labels: Vec<usize> = (0..12).map(|_| rng.random_range(0..3)).collect();
            let err = fd_max_rel_error(&f, 8, &labels, DEFAULT_TEMPERATURE, 1e-5);
            prop_assert!(err < 1e-5, "max rel error {}", err);
        }

        #[test]
        fn matches_brute_force_and_is_bounded(seed in any::<u64>(), b in 2usize..16, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_unit_batch(&mut rng, b, 5);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
            let batch = ContrastiveBatch::new(&f, 5, &labels, tau).unwrap();
            let l = supcon_loss(&batch).unwrap();
            let rows: Vec<Vec<f64>> = f.chunks(5).map(|r| r.to_vec()).collect();
            let oracle = brute_force_loss(&rows, &labels, tau);
            prop_assert!((l - oracle).abs() <= 1e-9 * oracle.abs().max(1.0));
            let bound = b as f64 * (((b - 1) as f64).ln() + 2.0 / tau);
            prop_assert!(l >= 0.0 && l <= bound);
        }

        #[test]
        fn permutation_equivariance(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, d) = (9, 4);
            let f = random_unit_batch(&mut rng, b, d);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
            let mut perm: Vec<usize> = (0..b).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let pf: Vec<f64> = perm.iter().flat_map(|&p| f[p * d..(p + 1) * d].to_vec()).collect();
            let pl: Vec<usize> = perm.iter().map(|&p| labels[p]).collect();
            let (l0, g0) = supcon_loss_and_grad(&ContrastiveBatch::new(&f, d, &labels, 0.1).unwrap()).unwrap();
            let (l1, g1) = supcon_loss_and_grad(&ContrastiveBatch::new(&pf, d, &pl, 0.1).unwrap()).unwrap();
            prop_assert!((l0 - l1).abs() < 1e-9);
            for (new_i, &old_i) in perm.iter().enumerate() {
                for c in 0..d {
                    prop_assert!((g1[new_i * d + c] - g0[old_i * d + c]).abs() < 1e-9);
                }
            }
        }
    }
}
