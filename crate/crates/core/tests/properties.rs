mod support;

use approx::assert_abs_diff_eq;
use clusterprobe::dataset::{EmbeddingDataset, Split};
use clusterprobe::metrics::{min_max_dist_accuracy, retrieval_recall, RECALL_KS};
use clusterprobe::synth::generate_with_truth;
use clusterprobe::tsne::affinities;
use clusterprobe::*;
use rand::Rng;
use support::{gaussian_vec, rng};

fn rotate(m: &Matrix<f32>, q: &Matrix<f64>) -> Matrix<f32> {
    let d = m.cols();
    let mut out = Matrix::<f32>::zeros(m.rows(), d);
    for i in 0..m.rows() {
        for a in 0..d {
            let v: f64 = (0..d).map(|b| q.get(a, b) * m.get(i, b) as f64).sum();
            out.set(i, a, v as f32);
        }
    }
    out
}

/// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
fn orthogonal(seed: u64, d: usize) -> Matrix<f64> {
    let mut r = rng(seed);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    while basis.len() < d {
        let mut v = gaussian_vec(&mut r, d);
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(d, &basis).unwrap()
}

#[test]
fn metrics_are_rotation_invariant() {
    for seed in 0..20 {
        let ds = support::random_dataset(seed, 8, 4, 8, false);
        let q = orthogonal(seed + 100, ds.dim());
        let rotated = EmbeddingDataset::new(
            rotate(ds.images(), &q),
            rotate(ds.texts(), &q),
            ds.splits().clone(),
            false,
        )
        .unwrap();
        let a = min_max_dist_accuracy(&ds, Split::Test, FeatureSpace::Raw, None).unwrap();
        let b = min_max_dist_accuracy(&rotated, Split::Test, FeatureSpace::Raw, None).unwrap();
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-5);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-5);
        let ra = retrieval_recall(&ds, Split::Test, FeatureSpace::Raw, None, &RECALL_KS).unwrap();
        let rb = retrieval_recall(&rotated, Split::Test, FeatureSpace::Raw, None, &RECALL_KS).unwrap();
        for (x, y) in ra.exact_pair.iter().chain(&ra.intra_cluster).zip(rb.exact_pair.iter().chain(&rb.intra_cluster)) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-5);
        }
    }
}

#[test]
fn synthetic_semantics_recover_centroids() {
    let config = SynthConfig::default();
    let (ds, truth) = generate_with_truth(&config).unwrap();
    let trained = train_disentangle(&ds, &TrainConfig::default()).unwrap();
    // nearest projected centroid among the test clusters' centroids
    let test = ds.split(Split::Test);
    let centroids: Vec<Vec<f32>> = test
        .iter()
        .map(|c| {
            let k: usize = c.cluster_id.trim_start_matches("synth-").parse().unwrap();
            truth.centroids[k].iter().map(|&v| v as f32).collect()
        })
        .collect();
    let centroids = Matrix::from_rows(ds.dim(), &centroids).unwrap();
    let s_centroids = project(&trained.heads.semantics, &centroids).unwrap();
    let mut hits = 0;
    let mut total = 0;
    for (k, c) in test.iter().enumerate() {
        let rows: Vec<Vec<f32>> = c.members().map(|(r, _)| ds.images().row(r).to_vec()).collect();
        let z = project(&trained.heads.semantics, &Matrix::from_rows(ds.dim(), &rows).unwrap()).unwrap();
        for zi in z.iter_rows() {
            let best = (0..test.len())
                .max_by(|&a, &b| {
                    let sa: f32 = zi.iter().zip(s_centroids.row(a)).map(|(x, y)| x * y).sum();
                    let sb: f32 = zi.iter().zip(s_centroids.row(b)).map(|(x, y)| x * y).sum();
                    sa.total_cmp(&sb)
                })
                .unwrap();
            hits += (best == k) as usize;
            total += 1;
        }
    }
    let acc = hits as f64 / total as f64;
    assert!(acc >= 0.95, "nearest-centroid accuracy {acc}");
}

#[test]
fn tsne_keeps_duplicates_together() {
    let mut good_runs = 0;
    for seed in 0..20u64 {
        let mut r = rng(900 + seed);
        let mut rows: Vec<Vec<f64>> = (0..90).map(|_| gaussian_vec(&mut r, 10)).collect();
        let twins: Vec<usize> = (0..10).map(|i| i * 9).collect();
        for &t in &twins {
            rows.push(rows[t].clone());
        }
        let x = Matrix::from_rows(10, &rows).unwrap();
        let y = tsne_embed(&x, &TsneConfig { seed, ..Default::default() }).unwrap().coords;
        let nearest = |i: usize| {
            (0..y.rows())
                .filter(|&j| j != i)
                .min_by(|&a, &b| {
                    let da = (y.get(a, 0) - y.get(i, 0)).powi(2) + (y.get(a, 1) - y.get(i, 1)).powi(2);
                    let db = (y.get(b, 0) - y.get(i, 0)).powi(2) + (y.get(b, 1) - y.get(i, 1)).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap()
        };
        let mutual = twins
            .iter()
            .enumerate()
            .all(|(k, &t)| nearest(t) == 90 + k && nearest(90 + k) == t);
        good_runs += mutual as usize;
    }
    assert!(good_runs >= 18, "{good_runs}/20 runs kept every duplicate pair mutual");
}

#[test]
fn affinities_are_translation_invariant() {
    let mut r = rng(3);
    // dyadic coordinates keep the shifted differences exact
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|_| (0..6).map(|_| r.random_range(-64i32..64) as f64 / 8.0).collect())
        .collect();
    let shift: Vec<f64> = (0..6).map(|_| r.random_range(-256i32..256) as f64 / 4.0).collect();
    let moved: Vec<Vec<f64>> = rows
        .iter()
        .map(|v| v.iter().zip(&shift).map(|(a, b)| a + b).collect())
        .collect();
    let p = affinities(&Matrix::from_rows(6, &rows).unwrap(), 10.0).unwrap();
    let q = affinities(&Matrix::from_rows(6, &moved).unwrap(), 10.0).unwrap();
    assert!(p.iter().zip(&q).all(|(a, b)| a.to_bits() == b.to_bits()));
}
