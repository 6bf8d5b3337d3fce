//! Test-only oracles and fixtures shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use clusterprobe::dataset::{EmbeddingDataset, Label, SemanticCluster, Split, Splits};
use clusterprobe::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gaussian_vec(rng, d);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// Random small dataset with every cluster in the test split. Rows are not
/// normalized; some captions are exact copies of others to exercise ties.
/// With `uniform`, every cluster has the same number of fakes.
pub fn random_dataset(seed: u64, max_k: usize, max_n: usize, max_d: usize, uniform: bool) -> EmbeddingDataset {
    let mut r = rng(seed);
    let k = r.random_range(1..=max_k);
    let d = r.random_range(2..=max_d);
    let shared_n = r.random_range(1..=max_n);
    let mut images: Vec<Vec<f32>> = Vec::new();
    let mut texts: Vec<Vec<f32>> = Vec::new();
    let mut clusters = Vec::new();
    for c in 0..k {
        let n = if uniform { shared_n } else { r.random_range(1..=max_n) };
        let real = images.len();
        images.push(gaussian_vec(&mut r, d).iter().map(|&v| v as f32).collect());
        let mut fakes = Vec::new();
        let mut caps = Vec::new();
        for _ in 0..n {
            fakes.push(images.len());
            images.push(gaussian_vec(&mut r, d).iter().map(|&v| v as f32).collect());
            caps.push(texts.len());
            let t = if !texts.is_empty() && r.random_bool(0.2) {
                texts[r.random_range(0..texts.len())].clone()
            } else {
                gaussian_vec(&mut r, d).iter().map(|&v| v as f32).collect()
            };
            texts.push(t);
        }
        clusters.push(SemanticCluster::new(format!("c{c}"), real, fakes, caps));
    }
    // shuffle row order so cluster membership is not contiguous
    let perm_i = permutation(&mut r, images.len());
    let perm_t = permutation(&mut r, texts.len());
    let mut img2 = vec![Vec::new(); images.len()];
    for (old, &new) in perm_i.iter().enumerate() {
        img2[new] = images[old].clone();
    }
    let mut txt2 = vec![Vec::new(); texts.len()];
    for (old, &new) in perm_t.iter().enumerate() {
        txt2[new] = texts[old].clone();
    }
    for c in &mut clusters {
        c.real_row = perm_i[c.real_row];
        c.fake_rows.iter_mut().for_each(|x| *x = perm_i[*x]);
        c.caption_rows.iter_mut().for_each(|x| *x = perm_t[*x]);
    }
    EmbeddingDataset::new(
        Matrix::from_rows(d, &img2).unwrap(),
        Matrix::from_rows(d, &txt2).unwrap(),
        Splits {
            test: clusters,
            ..Default::default()
        },
        false,
    )
    .unwrap()
}

fn permutation(r: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(r);
    p
}

pub fn random_predictions(seed: u64, ds: &EmbeddingDataset, split: Split) -> BTreeMap<usize, Label> {
    let mut r = rng(seed);
    let p_correct = r.random_range(0.0..1.0);
    let mut out = BTreeMap::new();
    for c in ds.split(split) {
        for (row, label) in c.members() {
            let wrong = if label == Label::Real { Label::Fake } else { Label::Real };
            out.insert(row, if r.random_bool(p_correct) { label } else { wrong });
        }
    }
    out
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

pub mod naive {
    use super::*;

    pub fn overall(preds: &BTreeMap<usize, Label>, ds: &EmbeddingDataset, split: Split) -> f64 {
        let mut hit = 0;
        let mut all = 0;
        for c in ds.split(split) {
            all += 1 + c.fake_rows.len();
            hit += (preds[&c.real_row] == Label::Real) as usize;
            hit += c.fake_rows.iter().filter(|r| preds[r] == Label::Fake).count();
        }
        hit as f64 / all as f64
    }

    pub fn full_cluster(preds: &BTreeMap<usize, Label>, ds: &EmbeddingDataset, split: Split) -> f64 {
        let cs = ds.split(split);
        let good = cs
            .iter()
            .filter(|c| {
                preds[&c.real_row] == Label::Real && c.fake_rows.iter().all(|r| preds[r] == Label::Fake)
            })
            .count();
        good as f64 / cs.len() as f64
    }

    /// Cosine distances from raw (unnormalized) rows.
    pub fn min_max(ds: &EmbeddingDataset, split: Split) -> (f64, f64) {
        let cs = ds.split(split);
        let (mut min_hits, mut max_hits) = (0, 0);
        for c in cs {
            let mut rows = vec![c.real_row];
            rows.extend(&c.fake_rows);
            let mean: Vec<f64> = rows
                .iter()
                .map(|&i| {
                    let mut s = 0.0;
                    for &j in &rows {
                        if j != i {
                            s += 1.0 - cosine(ds.images().row(i), ds.images().row(j));
                        }
                    }
                    s / (rows.len() - 1) as f64
                })
                .collect();
            let smaller = mean[1..].iter().filter(|&&m| m <= mean[0]).count();
            let larger = mean[1..].iter().filter(|&&m| m >= mean[0]).count();
            min_hits += (smaller == 0) as usize;
            max_hits += (larger == 0) as usize;
        }
        (min_hits as f64 / cs.len() as f64, max_hits as f64 / cs.len() as f64)
    }

    /// Rank of `target` among `pool` for query `q`: one plus the captions
    /// that beat it (higher similarity, or equal similarity and lower row).
    fn rank(ds: &EmbeddingDataset, q: &[f32], pool: &[usize], target: usize) -> usize {
        let st = cosine(q, ds.texts().row(target));
        1 + pool
            .iter()
            .filter(|&&p| {
                let s = cosine(q, ds.texts().row(p));
                s > st || (s == st && p < target)
            })
            .count()
    }

    /// (exact_pair@k, intra_cluster@k) for each k.
    pub fn recall(ds: &EmbeddingDataset, split: Split, ks: &[usize]) -> (Vec<f64>, Vec<f64>) {
        let cs = ds.split(split);
        let mut pool: Vec<usize> = cs.iter().flat_map(|c| c.caption_rows.clone()).collect();
        pool.sort();
        pool.dedup();
        let mut exact = vec![0usize; ks.len()];
        let mut intra = vec![0usize; ks.len()];
        let mut fakes = 0;
        for c in cs {
            for (i, &f) in c.fake_rows.iter().enumerate() {
                fakes += 1;
                let q = ds.images().row(f);
                let own = rank(ds, q, &pool, c.caption_rows[i]);
                let best = c.caption_rows.iter().map(|&t| rank(ds, q, &pool, t)).min().unwrap();
                for (j, &k) in ks.iter().enumerate() {
                    exact[j] += (own <= k) as usize;
                    intra[j] += (best <= k) as usize;
                }
            }
        }
        let rate = |v: Vec<usize>| v.into_iter().map(|h| h as f64 / fakes as f64).collect();
        (rate(exact), rate(intra))
    }
}

/// Central-difference check of an analytic gradient; returns the max of
/// `|a − n| / max(|a|, |n|, 1)` over all coordinates.
pub fn fd_max_rel_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> f64 {
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    for k in 0..x.len() {
        p[k] = x[k] + h;
        let up = f(&p);
        p[k] = x[k] - h;
        let down = f(&p);
        p[k] = x[k];
        let num = (up - down) / (2.0 * h);
        let err = (analytic[k] - num).abs() / analytic[k].abs().max(num.abs()).max(1.0);
        worst = worst.max(err);
    }
    worst
}
