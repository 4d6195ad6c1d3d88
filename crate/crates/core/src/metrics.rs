//! Confusion-matrix algebra and evaluation metrics. Macro averages are
//! unweighted means over classes.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Rows are truth, columns are prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            counts: vec![vec![0; n_classes]; n_classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self { counts })
    }

    pub fn n_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    /// Per-class recall; `None` for classes absent from the truth.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        (0..self.n_classes())
            .map(|c| {
                let n = self.row_sum(c);
                (n > 0).then(|| self.counts[c][c] as f64 / n as f64)
            })
            .collect()
    }
}

pub fn confusion(
    labels: &[usize],
    predictions: &[usize],
    n_classes: usize,
) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n_classes);
    for (&t, &p) in labels.iter().zip(predictions) {
        for v in [t, p] {
            if v >= n_classes {
                return Err(Error::Label {
                    label: v,
                    n_classes,
                });
            }
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassScores {
    pub per_class: Vec<f64>,
    pub macro_avg: f64,
}

/// F-beta per class and macro. A class scores 0 when precision and recall
/// are both 0 or either is undefined.
pub fn f_beta(cm: &ConfusionMatrix, beta: f64) -> Result<ClassScores> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::Argument(format!(
            "beta must be positive, got {beta}"
        )));
    }
    let b2 = beta * beta;
    let per_class: Vec<f64> = (0..cm.n_classes())
        .map(|c| {
            let tp = cm.counts[c][c] as f64;
            let (col, row) = (cm.col_sum(c), cm.row_sum(c));
            if col == 0 || row == 0 {
                return 0.0;
            }
            let (p, r) = (tp / col as f64, tp / row as f64);
            let denom = b2 * p + r;
            if denom == 0.0 {
                0.0
            } else {
                (1.0 + b2) * p * r / denom
            }
        })
        .collect();
    let macro_avg = mean(&per_class);
    Ok(ClassScores {
        per_class,
        macro_avg,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AucScores {
    /// `None` where the class has no positives or no negatives.
    pub per_class: Vec<Option<f64>>,
    pub macro_avg: f64,
}

/// Rank-statistic AUC for one binary problem. Ties count one half.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| positive[k]).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (n_pos as f64, n_neg as f64);
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

/// One-vs-rest AUC per class from score matrix `[B, C]`, macro over the
/// classes where it is defined.
pub fn auc_macro(labels: &[usize], scores: &Tensor) -> Result<AucScores> {
    let (b, c) = scores.expect_matrix("scores")?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for {b} score rows",
            labels.len()
        )));
    }
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let col: Vec<f64> = scores.rows().map(|r| r[k]).collect();
            let pos: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            binary_auc(&col, &pos)
        })
        .collect();
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Metric(
            "AUC undefined: no class has both positives and negatives".into(),
        ));
    }
    Ok(AucScores {
        macro_avg: mean(&defined),
        per_class,
    })
}

/// Geometric mean of per-class recalls over classes present in the truth.
pub fn g_mean(cm: &ConfusionMatrix) -> f64 {
    let recalls: Vec<f64> = cm.recalls().into_iter().flatten().collect();
    if recalls.is_empty() || recalls.contains(&0.0) {
        return 0.0;
    }
    (recalls.iter().map(|r| r.ln()).sum::<f64>() / recalls.len() as f64).exp()
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Metric(
            "accuracy of an empty confusion matrix".into(),
        ));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Index of the largest score in each row (first on ties).
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    scores
        .rows()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub const F_BETA: f64 = 3.0;

/// Evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub f_beta: ClassScores,
    pub auc: AucScores,
    pub gmean: f64,
    pub accuracy: f64,
    pub wall_time: f64,
}

impl EvalReport {
    pub fn from_scores(labels: &[usize], scores: &Tensor, wall_time: f64) -> Result<Self> {
        let (_, c) = scores.expect_matrix("scores")?;
        let cm = confusion(labels, &argmax_rows(scores), c)?;
        Ok(Self {
            f_beta: f_beta(&cm, F_BETA)?,
            auc: auc_macro(labels, scores)?,
            gmean: g_mean(&cm),
            accuracy: accuracy(&cm)?,
            confusion: cm,
            wall_time,
        })
    }
}
