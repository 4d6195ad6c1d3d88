//! Class separability score.
//!
//! For instance `i`, `p(i)` is its mean distance to the other members of its
//! class and `n(i)` its mean distance to every instance of any other class
//! (one-vs-rest). The score is `(n - p) / max(n, p)`, in `[-1, 1]`. The
//! dataset score averages per-class means, so every class counts equally.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::data::TimeSeriesDataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMetric {
    /// Euclidean distance over the flattened `n_dims × length` values.
    #[default]
    Euclidean,
}

impl DistanceMetric {
    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            DistanceMetric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeparabilityReport {
    pub overall: f64,
    /// Keyed by original label text.
    pub per_class: BTreeMap<String, f64>,
    #[serde(skip)]
    pub per_class_index: Vec<f64>,
    #[serde(skip)]
    pub per_instance: Vec<(String, f64)>,
}

impl SeparabilityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Score from the two mean distances; `0` when both vanish.
pub fn silhouette_score(p: f64, n: f64) -> f64 {
    let denom = p.max(n);
    if denom == 0.0 {
        0.0
    } else {
        (n - p) / denom
    }
}

fn check_classes(ds: &TimeSeriesDataset) -> Result<()> {
    if ds.n_classes() < 2 {
        return Err(Error::Precondition(
            "separability needs at least two classes".into(),
        ));
    }
    Ok(())
}

fn degenerate(ds: &TimeSeriesDataset, class: usize) -> Error {
    Error::DegenerateClass {
        class: ds.label_names()[class].clone(),
    }
}

fn score_of(ds: &TimeSeriesDataset, counts: &[usize], i: usize, metric: DistanceMetric) -> f64 {
    let me = ds.instance(i);
    let (mut same, mut other) = (0.0, 0.0);
    for (j, inst) in ds.instances().iter().enumerate() {
        if j == i {
            continue;
        }
        let d = metric.distance(&me.values, &inst.values);
        if inst.label == me.label {
            same += d;
        } else {
            other += d;
        }
    }
    let n_same = counts[me.label] - 1;
    let n_other = ds.len() - counts[me.label];
    silhouette_score(same / n_same as f64, other / n_other as f64)
}

/// Score of the instance at position `i`.
pub fn instance_separability(
    ds: &TimeSeriesDataset,
    i: usize,
    metric: DistanceMetric,
) -> Result<f64> {
    check_classes(ds)?;
    if i >= ds.len() {
        return Err(Error::Argument(format!(
            "instance position {i} out of range"
        )));
    }
    let counts = ds.class_counts();
    let label = ds.instance(i).label;
    if counts[label] < 2 {
        return Err(degenerate(ds, label));
    }
    Ok(score_of(ds, &counts, i, metric))
}

/// Per-instance, per-class and overall scores. Rows are computed in
/// parallel but each row sums in a fixed order, so results do not depend on
/// the worker count.
pub fn dataset_separability(
    ds: &TimeSeriesDataset,
    metric: DistanceMetric,
) -> Result<SeparabilityReport> {
    check_classes(ds)?;
    let counts = ds.class_counts();
    if let Some(c) = counts.iter().position(|&n| n < 2) {
        return Err(degenerate(ds, c));
    }
    let scores: Vec<f64> = (0..ds.len())
        .into_par_iter()
        .map(|i| score_of(ds, &counts, i, metric))
        .collect();

    let mut sums = vec![0.0; ds.n_classes()];
    for (inst, s) in ds.instances().iter().zip(&scores) {
        sums[inst.label] += s;
    }
    let per_class_index: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| s / n as f64)
        .collect();
    let overall = per_class_index.iter().sum::<f64>() / per_class_index.len() as f64;
    Ok(SeparabilityReport {
        overall,
        per_class: ds
            .label_names()
            .iter()
            .cloned()
            .zip(per_class_index.iter().copied())
            .collect(),
        per_class_index,
        per_instance: ds
            .instances()
            .iter()
            .map(|inst| inst.id.clone())
            .zip(scores)
            .collect(),
    })
}
