//! Cluster-aware detection and retrieval metrics.
//!
//! * overall accuracy: per-image correctness over every member of the split;
//! * full-cluster accuracy: fraction of clusters with every member correct;
//! * min/max distance accuracy: fraction of clusters whose real member has the
//!   strictly smallest / largest mean cosine distance to the other members
//!   (ties fail);
//! * exact-pair / intra-cluster recall@k: a fake retrieves, among all captions
//!   of the split, its own generating caption / any caption of its cluster
//!   within the top k (ranked by cosine similarity, ties by ascending row).

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, Label, Split};
use crate::disentangle::HeadPair;
use crate::error::{Error, Result};
use crate::features::{gather, FeatureSpace, Source};
use crate::matrix::{dot, Matrix};
use crate::probe::{predict, ProbeModel};

pub const RECALL_KS: [usize; 3] = [1, 3, 5];

/// Predicted label per image row.
pub type Predictions = BTreeMap<usize, Label>;

fn lookup(preds: &Predictions, row: usize) -> Result<Label> {
    preds
        .get(&row)
        .copied()
        .ok_or_else(|| Error::Metrics(format!("missing prediction for image row {row}")))
}

fn nonempty(dataset: &EmbeddingDataset, split: Split) -> Result<()> {
    if dataset.split(split).is_empty() {
        Err(Error::EmptySplit(split.to_string()))
    } else {
        Ok(())
    }
}

pub fn overall_accuracy(preds: &Predictions, dataset: &EmbeddingDataset, split: Split) -> Result<f64> {
    nonempty(dataset, split)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for c in dataset.split(split) {
        for (row, label) in c.members() {
            total += 1;
            if lookup(preds, row)? == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / total as f64)
}

pub fn full_cluster_accuracy(preds: &Predictions, dataset: &EmbeddingDataset, split: Split) -> Result<f64> {
    nonempty(dataset, split)?;
    let clusters = dataset.split(split);
    let mut perfect = 0usize;
    for c in clusters {
        let mut all = true;
        for (row, label) in c.members() {
            all &= lookup(preds, row)? == label;
        }
        perfect += all as usize;
    }
    Ok(perfect as f64 / clusters.len() as f64)
}

/// Outcome for one cluster: (real is strict argmin, real is strict argmax).
fn cluster_extremes(members: &Matrix<f64>) -> (bool, bool) {
    let m = members.rows();
    let mean_dist: Vec<f64> = (0..m)
        .map(|i| {
            let s: f64 = (0..m)
                .filter(|&j| j != i)
                .map(|j| 1.0 - dot(members.row(i), members.row(j)))
                .sum();
            s / (m - 1) as f64
        })
        .collect();
    let real = mean_dist[0];
    let others = &mean_dist[1..];
    (
        others.iter().all(|&d| real < d),
        others.iter().all(|&d| real > d),
    )
}

/// `(min_rate, max_rate)` over the clusters of `split`.
pub fn min_max_dist_accuracy(
    dataset: &EmbeddingDataset,
    split: Split,
    space: FeatureSpace,
    heads: Option<&HeadPair>,
) -> Result<(f64, f64)> {
    nonempty(dataset, split)?;
    let clusters = dataset.split(split);
    let outcomes: Vec<(bool, bool)> = clusters
        .par_iter()
        .map(|c| {
            if c.fake_rows.is_empty() {
                return Err(Error::Metrics(format!("cluster {} has no fakes", c.cluster_id)));
            }
            let rows: Vec<usize> = c.members().map(|m| m.0).collect();
            let f = gather(dataset, Source::Images, &rows, space, heads, true)?;
            Ok(cluster_extremes(&f))
        })
        .collect::<Result<_>>()?;
    let k = clusters.len() as f64;
    let min = outcomes.iter().filter(|o| o.0).count() as f64 / k;
    let max = outcomes.iter().filter(|o| o.1).count() as f64 / k;
    Ok((min, max))
}

/// Recall rates aligned with `ks`.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalRecall {
    pub ks: Vec<usize>,
    pub exact_pair: Vec<f64>,
    pub intra_cluster: Vec<f64>,
}

pub fn retrieval_recall(
    dataset: &EmbeddingDataset,
    split: Split,
    space: FeatureSpace,
    heads: Option<&HeadPair>,
    ks: &[usize],
) -> Result<RetrievalRecall> {
    nonempty(dataset, split)?;
    let clusters = dataset.split(split);
    if let Some(c) = clusters.iter().find(|c| c.caption_rows.is_empty()) {
        return Err(Error::Metrics(format!(
            "cluster {} has no captions; retrieval needs a caption pool",
            c.cluster_id
        )));
    }
    let pool: Vec<usize> = clusters
        .iter()
        .flat_map(|c| c.caption_rows.iter().copied())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.is_empty() {
        return Err(Error::Metrics("empty caption pool".into()));
    }
    let captions = gather(dataset, Source::Texts, &pool, space, heads, true)?;
    let max_k = ks.iter().copied().max().unwrap_or(0).min(pool.len());

    // (rank of own caption, best rank of any cluster caption), 1-based
    let per_fake: Vec<Vec<(usize, usize)>> = clusters
        .par_iter()
        .map(|c| {
            let fakes = gather(dataset, Source::Images, &c.fake_rows, space, heads, true)?;
            let in_cluster: BTreeSet<usize> = c.caption_rows.iter().copied().collect();
            Ok((0..c.fake_rows.len())
                .map(|i| {
                    let q = fakes.row(i);
                    let mut order: Vec<(f64, usize)> = pool
                        .iter()
                        .enumerate()
                        .map(|(p, &row)| (dot(q, captions.row(p)), row))
                        .collect();
                    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                    let own = c.caption_rows[i];
                    let exact = order.iter().position(|o| o.1 == own).unwrap() + 1;
                    let intra = order[..max_k]
                        .iter()
                        .position(|o| in_cluster.contains(&o.1))
                        .map_or(usize::MAX, |p| p + 1);
                    (exact, intra)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let ranks: Vec<(usize, usize)> = per_fake.into_iter().flatten().collect();
    let n = ranks.len() as f64;
    let rate = |f: &dyn Fn(&(usize, usize)) -> bool| ranks.iter().filter(|r| f(r)).count() as f64 / n;
    Ok(RetrievalRecall {
        ks: ks.to_vec(),
        exact_pair: ks.iter().map(|&k| rate(&|r| r.0 <= k)).collect(),
        intra_cluster: ks.iter().map(|&k| rate(&|r| r.1 <= k)).collect(),
    })
}

/// Probe predictions for every image in `split`, in the probe's space.
pub fn predict_split(
    dataset: &EmbeddingDataset,
    split: Split,
    probe: &ProbeModel,
    heads: Option<&HeadPair>,
) -> Result<Predictions> {
    let rows: Vec<usize> = dataset.split_items(split).iter().map(|i| i.0).collect();
    let x = gather(dataset, Source::Images, &rows, probe.space, heads, false)?;
    let preds = predict(probe, &x)?;
    Ok(rows.into_iter().zip(preds.into_iter().map(|p| p.label)).collect())
}

/// A rate with its percentage rendering (two decimals).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub rate: f64,
    pub percent: f64,
}

impl Rate {
    pub fn new(rate: f64) -> Self {
        Self {
            rate,
            percent: (rate * 10_000.0).round() / 100.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallSet {
    pub at_1: Rate,
    pub at_3: Rate,
    pub at_5: Rate,
}

/// All six metrics for one (split, space).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub split: Split,
    pub feature_space: FeatureSpace,
    pub overall_accuracy: Option<Rate>,
    pub full_cluster_accuracy: Option<Rate>,
    pub min_dist_accuracy: Rate,
    pub max_dist_accuracy: Rate,
    /// `None` when the split has no captions.
    pub exact_pair_recall: Option<RecallSet>,
    pub intra_cluster_recall: Option<RecallSet>,
    pub config: serde_json::Value,
}

/// Computes every metric available for the inputs: accuracies need a probe,
/// recalls need captions.
pub fn evaluate(
    dataset: &EmbeddingDataset,
    split: Split,
    space: FeatureSpace,
    heads: Option<&HeadPair>,
    probe: Option<&ProbeModel>,
) -> Result<MetricReport> {
    let (overall, full) = match probe {
        Some(p) => {
            if p.space != space {
                return Err(Error::Metrics(format!(
                    "probe was fit in space `{}` but evaluation space is `{space}`",
                    p.space
                )));
            }
            let preds = predict_split(dataset, split, p, heads)?;
            (
                Some(Rate::new(overall_accuracy(&preds, dataset, split)?)),
                Some(Rate::new(full_cluster_accuracy(&preds, dataset, split)?)),
            )
        }
        None => (None, None),
    };
    let (min, max) = min_max_dist_accuracy(dataset, split, space, heads)?;
    let has_captions = dataset.split(split).iter().all(|c| !c.caption_rows.is_empty());
    let (exact, intra) = if has_captions {
        let r = retrieval_recall(dataset, split, space, heads, &RECALL_KS)?;
        let set = |v: &[f64]| RecallSet {
            at_1: Rate::new(v[0]),
            at_3: Rate::new(v[1]),
            at_5: Rate::new(v[2]),
        };
        (Some(set(&r.exact_pair)), Some(set(&r.intra_cluster)))
    } else {
        (None, None)
    };
    Ok(MetricReport {
        split,
        feature_space: space,
        overall_accuracy: overall,
        full_cluster_accuracy: full,
        min_dist_accuracy: Rate::new(min),
        max_dist_accuracy: Rate::new(max),
        exact_pair_recall: exact,
        intra_cluster_recall: intra,
        config: serde_json::Value::Null,
    })
}
