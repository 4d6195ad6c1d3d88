//! Loss functions over softmax outputs, each returning its value and the
//! gradient with respect to the probabilities.
//!
//! Conventions: `probs` is `[B, C]`; targets are one-hot `[B, C]`. The
//! positive group for MFE/MSFE is the set of minority classes.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before `ln`.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// dLoss/dProbs, same shape as `probs`.
    pub grad: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(alias = "unweighted_ce", alias = "ce")]
    Unweighted,
    #[serde(alias = "weighted_ce")]
    Weighted,
    Mse,
    Mfe,
    Msfe,
    Gmse,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unweighted" | "unweighted_ce" | "ce" => Ok(LossKind::Unweighted),
            "weighted" | "weighted_ce" => Ok(LossKind::Weighted),
            "mse" => Ok(LossKind::Mse),
            "mfe" => Ok(LossKind::Mfe),
            "msfe" => Ok(LossKind::Msfe),
            "gmse" => Ok(LossKind::Gmse),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// A fully parameterized loss for one batch evaluation.
#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    UnweightedCe,
    WeightedCe,
    Mse,
    /// `lenient` treats an empty positive/negative group as contributing
    /// zero instead of failing, which training needs for unlucky batches.
    Mfe {
        positive: Vec<usize>,
        lenient: bool,
    },
    Msfe {
        positive: Vec<usize>,
        lenient: bool,
    },
    Gmse {
        kappa: f64,
        minority: Vec<usize>,
    },
}

impl LossSpec {
    pub fn evaluate(&self, probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
        let (_, c) = probs.expect_matrix("probs")?;
        match self {
            LossSpec::UnweightedCe => unweighted_ce(probs, labels),
            LossSpec::WeightedCe => weighted_ce(probs, labels),
            LossSpec::Mse => mse_loss(probs, &one_hot(labels, c)?),
            LossSpec::Mfe { positive, lenient } => {
                false_error(probs, &one_hot(labels, c)?, positive, *lenient, false)
            }
            LossSpec::Msfe { positive, lenient } => {
                false_error(probs, &one_hot(labels, c)?, positive, *lenient, true)
            }
            LossSpec::Gmse { kappa, minority } => gmse_weighted(probs, labels, *kappa, minority),
        }
    }
}

pub fn one_hot(labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![labels.len(), n_classes]);
    for (i, &y) in labels.iter().enumerate() {
        check_label(y, n_classes)?;
        t.data_mut()[i * n_classes + y] = 1.0;
    }
    Ok(t)
}

fn check_label(y: usize, n_classes: usize) -> Result<()> {
    if y >= n_classes {
        Err(Error::Label {
            label: y,
            n_classes,
        })
    } else {
        Ok(())
    }
}

fn check_labels(probs: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (b, c) = probs.expect_matrix("probs")?;
    if labels.len() != b {
        return Err(Error::Shape(format!(
            "{} labels for {b} rows",
            labels.len()
        )));
    }
    for &y in labels {
        check_label(y, c)?;
    }
    Ok((b, c))
}

/// `-ln p` of the clamped probability and its derivative in `p` (zero when
/// the clamp is active).
fn clamped_nll(p: f64) -> (f64, f64) {
    let q = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let d = if q == p { -1.0 / p } else { 0.0 };
    (-q.ln(), d)
}

/// Mean categorical cross-entropy over the batch.
pub fn unweighted_ce(probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let (b, c) = check_labels(probs, labels)?;
    let mut grad = Tensor::zeros(vec![b, c]);
    if b == 0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let (l, d) = clamped_nll(probs.row(i)[y]);
        loss += l;
        grad.data_mut()[i * c + y] = d / b as f64;
    }
    Ok(LossValue {
        loss: loss / b as f64,
        grad,
    })
}

/// Cross-entropy averaged within each class present in the batch, then
/// averaged over those classes.
pub fn weighted_ce(probs: &Tensor, labels: &[usize]) -> Result<LossValue> {
    let (b, c) = check_labels(probs, labels)?;
    let mut grad = Tensor::zeros(vec![b, c]);
    let mut counts = vec![0usize; c];
    for &y in labels {
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present == 0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let mut class_sums = vec![0.0; c];
    for (i, &y) in labels.iter().enumerate() {
        let (l, d) = clamped_nll(probs.row(i)[y]);
        class_sums[y] += l;
        grad.data_mut()[i * c + y] = d / (present as f64 * counts[y] as f64);
    }
    let loss = class_sums
        .iter()
        .zip(&counts)
        .filter(|(_, &n)| n > 0)
        .map(|(s, &n)| s / n as f64)
        .sum::<f64>()
        / present as f64;
    Ok(LossValue { loss, grad })
}

fn check_targets(probs: &Tensor, targets: &Tensor) -> Result<(usize, usize)> {
    let (b, c) = probs.expect_matrix("probs")?;
    if targets.shape() != probs.shape() {
        return Err(Error::Shape(format!(
            "targets {:?} vs probs {:?}",
            targets.shape(),
            probs.shape()
        )));
    }
    Ok((b, c))
}

fn half_sq_error(p: &[f64], d: &[f64]) -> f64 {
    p.iter().zip(d).map(|(y, t)| 0.5 * (t - y) * (t - y)).sum()
}

/// `(1/M) Σ_i Σ_n ½ (d − y)²`.
pub fn mse_loss(probs: &Tensor, targets: &Tensor) -> Result<LossValue> {
    let (b, c) = check_targets(probs, targets)?;
    let mut grad = Tensor::zeros(vec![b, c]);
    if b == 0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let m = b as f64;
    let loss = probs
        .rows()
        .zip(targets.rows())
        .map(|(p, d)| half_sq_error(p, d))
        .sum::<f64>()
        / m;
    for ((g, y), t) in grad
        .data_mut()
        .iter_mut()
        .zip(probs.data())
        .zip(targets.data())
    {
        *g = (y - t) / m;
    }
    Ok(LossValue { loss, grad })
}

fn target_class(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map_or(0, |(i, _)| i)
}

/// Mean per-group errors `(FPE, FNE)`: FPE over negative (majority)
/// instances, FNE over positive (minority) instances.
pub fn false_errors(probs: &Tensor, targets: &Tensor, positive: &[usize]) -> Result<(f64, f64)> {
    check_targets(probs, targets)?;
    let (mut fpe, mut fne, mut n_neg, mut n_pos) = (0.0, 0.0, 0usize, 0usize);
    for (p, d) in probs.rows().zip(targets.rows()) {
        let e = half_sq_error(p, d);
        if positive.contains(&target_class(d)) {
            fne += e;
            n_pos += 1;
        } else {
            fpe += e;
            n_neg += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok((mean(fpe, n_neg), mean(fne, n_pos)))
}

fn false_error(
    probs: &Tensor,
    targets: &Tensor,
    positive: &[usize],
    lenient: bool,
    squared: bool,
) -> Result<LossValue> {
    let (b, c) = check_targets(probs, targets)?;
    let is_pos: Vec<bool> = targets
        .rows()
        .map(|d| positive.contains(&target_class(d)))
        .collect();
    let n_pos = is_pos.iter().filter(|&&p| p).count();
    let n_neg = b - n_pos;
    if !lenient && (n_pos == 0 || n_neg == 0) {
        return Err(Error::Group(format!(
            "batch has {n_pos} positive and {n_neg} negative instances; both groups are required"
        )));
    }
    let (fpe, fne) = false_errors(probs, targets, positive)?;
    let (loss, w_neg, w_pos) = if squared {
        (fpe * fpe + fne * fne, 2.0 * fpe, 2.0 * fne)
    } else {
        (fpe + fne, 1.0, 1.0)
    };
    let mut grad = Tensor::zeros(vec![b, c]);
    for (i, &pos) in is_pos.iter().enumerate() {
        let scale = if pos {
            w_pos / n_pos as f64
        } else {
            w_neg / n_neg as f64
        };
        for j in 0..c {
            let k = i * c + j;
            grad.data_mut()[k] = scale * (probs.data()[k] - targets.data()[k]);
        }
    }
    Ok(LossValue { loss, grad })
}

/// Mean false error `FPE + FNE`.
pub fn mfe_loss(probs: &Tensor, targets: &Tensor, positive: &[usize]) -> Result<LossValue> {
    false_error(probs, targets, positive, false, false)
}

/// Mean squared false error `FPE² + FNE²`.
pub fn msfe_loss(probs: &Tensor, targets: &Tensor, positive: &[usize]) -> Result<LossValue> {
    false_error(probs, targets, positive, false, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TargetVariant {
    /// G-Mean and accuracy jointly.
    T1,
    /// G-Mean only.
    #[default]
    T2,
    /// G-Mean and validation error jointly.
    T3,
}

impl FromStr for TargetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "T1" => Ok(TargetVariant::T1),
            "T2" => Ok(TargetVariant::T2),
            "T3" => Ok(TargetVariant::T3),
            other => Err(Error::Config(format!(
                "unknown GMSE target variant {other:?}"
            ))),
        }
    }
}

/// Learnable minority weight and its target schedule.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmseState {
    pub kappa: f64,
    /// Maximum minority cost, fixed at run start.
    pub h: f64,
    pub variant: TargetVariant,
    pub lr_kappa: f64,
    pub minority_classes: Vec<usize>,
}

impl GmseState {
    /// Fresh state with `kappa = 1`.
    pub fn new(
        h: f64,
        variant: TargetVariant,
        lr_kappa: f64,
        minority_classes: Vec<usize>,
    ) -> Result<Self> {
        if !(lr_kappa > 0.0 && lr_kappa <= 1.0) {
            return Err(Error::Argument(format!(
                "lr_kappa must lie in (0, 1], got {lr_kappa}"
            )));
        }
        if !(h >= 0.0 && h.is_finite()) {
            return Err(Error::Argument(format!(
                "H must be finite and >= 0, got {h}"
            )));
        }
        Ok(Self {
            kappa: 1.0,
            h,
            variant,
            lr_kappa,
            minority_classes,
        })
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec::Gmse {
            kappa: self.kappa,
            minority: self.minority_classes.clone(),
        }
    }
}

fn gmse_weighted(
    probs: &Tensor,
    labels: &[usize],
    kappa: f64,
    minority: &[usize],
) -> Result<LossValue> {
    let (b, c) = check_labels(probs, labels)?;
    let mut grad = Tensor::zeros(vec![b, c]);
    if b == 0 {
        return Ok(LossValue { loss: 0.0, grad });
    }
    let n = b as f64;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let w = if minority.contains(&y) { kappa } else { 1.0 };
        let row = probs.row(i);
        for (j, &p) in row.iter().enumerate() {
            let diff = p - if j == y { 1.0 } else { 0.0 };
            loss += w * diff * diff;
            grad.data_mut()[i * c + j] = 2.0 * w * diff / n;
        }
    }
    Ok(LossValue {
        loss: loss / n,
        grad,
    })
}

/// `(1/n) Σ_p κ_p ‖d_p − y_p‖²` with `κ_p = kappa` on minority samples and
/// `1` otherwise; `n` is the batch size.
pub fn gmse_loss(probs: &Tensor, labels: &[usize], state: &GmseState) -> Result<LossValue> {
    if !state.kappa.is_finite() {
        return Err(Error::Numerics(format!("kappa is {}", state.kappa)));
    }
    if state.minority_classes.is_empty() {
        return Err(Error::Argument(
            "GMSE needs at least one minority class".into(),
        ));
    }
    gmse_weighted(probs, labels, state.kappa, &state.minority_classes)
}

/// Maximum minority cost `IR · (1 + S)`.
pub fn compute_h(imbalance_ratio: f64, separability: f64) -> f64 {
    imbalance_ratio * (1.0 + separability)
}

/// Target for κ from validation G-Mean and accuracy.
pub fn compute_t(variant: TargetVariant, h: f64, gmean: f64, accuracy: f64) -> f64 {
    let g = (-gmean / 2.0).exp();
    match variant {
        TargetVariant::T1 => h * g * (-accuracy / 2.0).exp(),
        TargetVariant::T2 => h * g,
        TargetVariant::T3 => h * g * (-(1.0 - accuracy) / 2.0).exp(),
    }
}

/// One gradient step on `‖T − κ‖²`: `κ ← κ + lr (T − κ)`.
pub fn update_kappa(state: &GmseState, target: f64) -> GmseState {
    GmseState {
        kappa: state.kappa + state.lr_kappa * (target - state.kappa),
        ..state.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn ce_examples() {
        let perfect = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(unweighted_ce(&perfect, &[0, 1]).unwrap().loss <= 1e-11);
        let uniform = probs(&[&[0.25; 4], &[0.25; 4]]);
        assert!((unweighted_ce(&uniform, &[0, 3]).unwrap().loss - 4f64.ln()).abs() < 1e-15);
        let one = probs(&[&[0.9, 0.1]]);
        assert!((unweighted_ce(&one, &[0]).unwrap().loss - 0.105_360_515_657_826_3).abs() < 1e-15);
        assert!(matches!(
            unweighted_ce(&one, &[2]),
            Err(Error::Label { .. })
        ));
    }

    #[test]
    fn weighted_ce_examples() {
        // Class A mean CE 0.2 over 8 samples, class B mean CE 0.8 over 2.
        let pa = (-0.2f64).exp();
        let pb = (-0.8f64).exp();
        let mut rows = vec![vec![pa, 1.0 - pa]; 8];
        rows.extend(vec![vec![1.0 - pb, pb]; 2]);
        let t = Tensor::from_rows(&rows).unwrap();
        let labels = [vec![0; 8], vec![1; 2]].concat();
        assert!((weighted_ce(&t, &labels).unwrap().loss - 0.5).abs() < 1e-12);

        let single = probs(&[&[0.7, 0.3], &[0.6, 0.4]]);
        let w = weighted_ce(&single, &[0, 0]).unwrap();
        let u = unweighted_ce(&single, &[0, 0]).unwrap();
        assert_eq!(w.loss, u.loss);

        let balanced = probs(&[&[0.7, 0.3], &[0.2, 0.8], &[0.4, 0.6], &[0.5, 0.5]]);
        let labels = [0, 1, 0, 1];
        assert_eq!(
            weighted_ce(&balanced, &labels).unwrap().loss,
            unweighted_ce(&balanced, &labels).unwrap().loss
        );
    }

    #[test]
    fn mse_binary_sample_error() {
        let p = probs(&[&[1.0, 0.0]]);
        let d = probs(&[&[0.0, 1.0]]);
        assert_eq!(mse_loss(&p, &d).unwrap().loss, 1.0);
        assert_eq!(mse_loss(&d, &d).unwrap().loss, 0.0);
        assert!(matches!(
            mse_loss(&p, &probs(&[&[1.0, 0.0, 0.0]])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn mfe_group_errors() {
        let p = probs(&[&[0.5, 0.5], &[0.5, 0.5]]);
        let d = probs(&[&[1.0, 0.0], &[1.0, 0.0]]);
        assert!(matches!(mfe_loss(&p, &d, &[1]), Err(Error::Group(_))));
        assert!(matches!(msfe_loss(&p, &d, &[1]), Err(Error::Group(_))));
        let lenient = LossSpec::Mfe {
            positive: vec![1],
            lenient: true,
        };
        let v = lenient.evaluate(&p, &[0, 0]).unwrap();
        assert!((v.loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn mfe_equal_groups_doubles() {
        let p = probs(&[&[0.8, 0.2], &[0.2, 0.8]]);
        let d = probs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (fpe, fne) = false_errors(&p, &d, &[1]).unwrap();
        assert!((fpe - fne).abs() < 1e-15);
        assert!((mfe_loss(&p, &d, &[1]).unwrap().loss - 2.0 * fpe).abs() < 1e-15);
        assert_eq!(mfe_loss(&d, &d, &[1]).unwrap().loss, 0.0);
        assert_eq!(msfe_loss(&d, &d, &[1]).unwrap().loss, 0.0);
    }

    fn state(kappa: f64) -> GmseState {
        GmseState {
            kappa,
            ..GmseState::new(4.0, TargetVariant::T2, 0.1, vec![1]).unwrap()
        }
    }

    #[test]
    fn gmse_examples() {
        let p = probs(&[&[1.0, 0.0]]);
        assert_eq!(gmse_loss(&p, &[1], &state(3.0)).unwrap().loss, 6.0);

        let p = probs(&[&[0.7, 0.3], &[0.4, 0.6]]);
        let plain: f64 = [0.3f64 * 0.3 * 2.0, 0.4 * 0.4 * 2.0].iter().sum::<f64>() / 2.0;
        assert!((gmse_loss(&p, &[0, 1], &state(1.0)).unwrap().loss - plain).abs() < 1e-15);

        let all_major = [0, 0];
        assert_eq!(
            gmse_loss(&p, &all_major, &state(1.0)).unwrap().loss,
            gmse_loss(&p, &all_major, &state(7.0)).unwrap().loss
        );
        let mut bad = state(1.0);
        bad.minority_classes.clear();
        assert!(gmse_loss(&p, &[0, 1], &bad).is_err());
    }

    #[test]
    fn gmse_linear_in_kappa() {
        let p = probs(&[&[0.7, 0.2, 0.1], &[0.1, 0.6, 0.3], &[0.3, 0.3, 0.4]]);
        let labels = [0, 1, 2];
        let at = |k: f64| {
            gmse_loss(
                &p,
                &labels,
                &GmseState {
                    minority_classes: vec![1, 2],
                    ..state(k)
                },
            )
            .unwrap()
            .loss
        };
        let (l0, l1, l2) = (at(0.0), at(1.0), at(2.0));
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-15);
        let minority_mass = (0.1f64.powi(2)
            + 0.4f64.powi(2)
            + 0.3f64.powi(2)
            + 0.3f64.powi(2)
            + 0.3f64.powi(2)
            + 0.6f64.powi(2))
            / 3.0;
        assert!(((l1 - l0) - minority_mass).abs() < 1e-14);
    }

    #[test]
    fn h_and_t() {
        assert_eq!(compute_h(4.0, 1.0), 8.0);
        assert_eq!(compute_h(4.0, -1.0), 0.0);
        assert_eq!(compute_h(4.0, 0.0), 4.0);
        assert_eq!(compute_t(TargetVariant::T2, 5.0, 0.0, 0.3), 5.0);
        assert!(
            (compute_t(TargetVariant::T2, 8.0, 1.0, 0.0) - 4.852_245_277_701_068).abs() < 1e-12
        );
        assert!((compute_t(TargetVariant::T1, 3.0, 1.0, 1.0) - 3.0 * (-1f64).exp()).abs() < 1e-15);
        assert!(
            (compute_t(TargetVariant::T3, 3.0, 1.0, 1.0) - 3.0 * (-0.5f64).exp()).abs() < 1e-15
        );
    }

    #[test]
    fn kappa_updates() {
        let s = GmseState {
            lr_kappa: 0.5,
            ..state(1.0)
        };
        assert_eq!(update_kappa(&s, 5.0).kappa, 3.0);
        assert_eq!(update_kappa(&s, 1.0).kappa, 1.0);
        assert!(GmseState::new(1.0, TargetVariant::T2, 0.0, vec![1]).is_err());
        assert!(GmseState::new(1.0, TargetVariant::T2, 1.5, vec![1]).is_err());
    }

    #[test]
    fn parse_names() {
        assert_eq!("gmse".parse::<LossKind>().unwrap(), LossKind::Gmse);
        assert_eq!("t3".parse::<TargetVariant>().unwrap(), TargetVariant::T3);
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
