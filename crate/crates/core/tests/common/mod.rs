#![allow(dead_code)]

use imblab::data::{Instance, TimeSeriesDataset};
use imblab::rng::rng_from;
use imblab::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dataset with the given per-class counts; class `c` is centred at
/// `c * sep` in every coordinate with unit Gaussian noise.
pub fn gaussian_classes(
    counts: &[usize],
    n_dims: usize,
    length: usize,
    sep: f64,
    seed: u64,
) -> TimeSeriesDataset {
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut instances = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        for j in 0..n {
            let values = (0..n_dims * length)
                .map(|_| c as f64 * sep + normal.sample(&mut rng))
                .collect();
            instances.push(Instance {
                id: format!("c{c}-{j}"),
                label: c,
                values,
            });
        }
    }
    TimeSeriesDataset::new(
        "gaussian",
        n_dims,
        length,
        (0..counts.len()).map(|c| format!("class{c}")).collect(),
        instances,
    )
    .unwrap()
}

/// Same instances with labels permuted uniformly at random.
pub fn shuffled_labels(ds: &TimeSeriesDataset, seed: u64) -> TimeSeriesDataset {
    let mut labels = ds.labels();
    labels.shuffle(&mut rng_from(seed));
    let instances = ds
        .instances()
        .iter()
        .zip(labels)
        .map(|(inst, label)| Instance {
            label,
            ..inst.clone()
        })
        .collect();
    TimeSeriesDataset::new(
        "shuffled",
        ds.n_dims(),
        ds.length(),
        ds.label_names().to_vec(),
        instances,
    )
    .unwrap()
}

/// Balanced dataset of `n_classes * per_class` instances with uniform noise.
pub fn balanced(n_classes: usize, per_class: usize, length: usize, seed: u64) -> TimeSeriesDataset {
    let mut rng = rng_from(seed);
    let mut instances = Vec::new();
    for c in 0..n_classes {
        for j in 0..per_class {
            instances.push(Instance {
                id: format!("b{c}-{j:04}"),
                label: c,
                values: (0..length)
                    .map(|_| rng.random_range(-1.0..1.0) + c as f64)
                    .collect(),
            });
        }
    }
    TimeSeriesDataset::new(
        "balanced",
        1,
        length,
        (0..n_classes).map(|c| format!("k{c}")).collect(),
        instances,
    )
    .unwrap()
}

/// Probabilities and labels realizing the 2x2 confusion matrix
/// [[85, 5], [5, 5]] with one-hot predictions: 90 negatives (class 0),
/// 10 positives (class 1), every mistake fully wrong.
pub fn worked_confusion() -> (Tensor, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut push = |label: usize, pred: usize, n: usize| {
        for _ in 0..n {
            labels.push(label);
            rows.push(if pred == 0 {
                vec![1.0, 0.0]
            } else {
                vec![0.0, 1.0]
            });
        }
    };
    push(0, 0, 85);
    push(0, 1, 5);
    push(1, 0, 5);
    push(1, 1, 5);
    (Tensor::from_rows(&rows).unwrap(), labels)
}

/// Random probability rows (softmax of Gaussian logits).
pub fn random_probs(b: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = rng_from(seed);
    let normal = Normal::new(0.0, 1.5).unwrap();
    let rows: Vec<Vec<f64>> = (0..b)
        .map(|_| {
            let z: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

/// Full distance matrix, then per-instance score, per-class mean and the
/// mean of class means.
pub fn brute_force_separability(ds: &TimeSeriesDataset) -> (f64, Vec<f64>) {
    let n = ds.len();
    let dist: Vec<Vec<f64>> = ds
        .instances()
        .iter()
        .map(|a| {
            ds.instances()
                .iter()
                .map(|b| {
                    a.values
                        .iter()
                        .zip(&b.values)
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let labels = ds.labels();
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let same: Vec<f64> = (0..n)
                .filter(|&j| j != i && labels[j] == labels[i])
                .map(|j| dist[i][j])
                .collect();
            let other: Vec<f64> = (0..n)
                .filter(|&j| labels[j] != labels[i])
                .map(|j| dist[i][j])
                .collect();
            let p = same.iter().sum::<f64>() / same.len() as f64;
            let q = other.iter().sum::<f64>() / other.len() as f64;
            if p.max(q) == 0.0 {
                0.0
            } else {
                (q - p) / p.max(q)
            }
        })
        .collect();
    let class_means: Vec<f64> = (0..ds.n_classes())
        .map(|c| {
            let v: Vec<f64> = (0..n)
                .filter(|&i| labels[i] == c)
                .map(|i| scores[i])
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        })
        .collect();
    (
        class_means.iter().sum::<f64>() / class_means.len() as f64,
        scores,
    )
}

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
pub fn concordant_pairs(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let (mut good, mut pairs) = (0.0, 0.0);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| good / pairs)
}
