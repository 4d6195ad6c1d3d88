//! Training loops and cross-validation.
//!
//! A run binds a model, a loss, a batch planner and an optional data-level
//! resampler. Weights move once per mini-batch; the GMSE minority weight κ
//! moves once per epoch, toward a target computed from the validation
//! G-Mean and accuracy.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_imbalance, measure_imbalance, stratified_kfold, ImbalanceSpec, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::loss::{
    compute_h, compute_t, update_kappa, GmseState, LossKind, LossSpec, TargetVariant,
};
use crate::metrics::EvalReport;
use crate::net::{default_architecture, loss_and_grad, Classifier, LayerSpec, Sgd};
use crate::rng::{derive_seed, label_hash};
use crate::sampling::{
    plan_bootstrap, plan_plain, BatchPlan, BootstrapConfig, ClassRoles, Resample,
};
use crate::separability::{dataset_separability, DistanceMetric};
use crate::tensor::Tensor;

// Seed-path tags.
const TAG_EPOCH: u64 = 1;
const TAG_RESAMPLE: u64 = 2;
const TAG_FOLDS: u64 = 3;
const TAG_INNER: u64 = 4;
const TAG_IMBALANCE: u64 = 5;
const TAG_MODEL: u64 = 6;
const TAG_RUN: u64 = 7;

/// Method presets matching the comparison columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[serde(alias = "unweighted_ce")]
    Unweighted,
    #[serde(alias = "weighted_ce")]
    Weighted,
    Bootstrap,
    Mfe,
    Msfe,
    Gmse,
    #[serde(alias = "adaptive_lr")]
    AdaptiveLr,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "unweighted" | "unweighted_ce" => Ok(Method::Unweighted),
            "weighted" | "weighted_ce" => Ok(Method::Weighted),
            "bootstrap" | "bootstrapping" => Ok(Method::Bootstrap),
            "mfe" => Ok(Method::Mfe),
            "msfe" => Ok(Method::Msfe),
            "gmse" => Ok(Method::Gmse),
            "adaptive_lr" | "adaptivelr" => Ok(Method::AdaptiveLr),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

impl Method {
    pub fn default_loss(self) -> LossKind {
        match self {
            Method::Unweighted | Method::Bootstrap | Method::AdaptiveLr => LossKind::Unweighted,
            Method::Weighted => LossKind::Weighted,
            Method::Mfe => LossKind::Mfe,
            Method::Msfe => LossKind::Msfe,
            Method::Gmse => LossKind::Gmse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Plain,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMetric {
    F3,
    Auc,
    Gmean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub metric: StopMetric,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 10,
            metric: StopMetric::F3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GmseConfig {
    pub variant: TargetVariant,
    pub lr_kappa: f64,
    pub kappa0: f64,
}

impl Default for GmseConfig {
    fn default() -> Self {
        Self {
            variant: TargetVariant::T2,
            lr_kappa: 0.1,
            kappa0: 1.0,
        }
    }
}

/// Fully resolved configuration of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub name: String,
    pub method: Method,
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub resample: Resample,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub early_stop: Option<EarlyStop>,
    pub gmse: GmseConfig,
    /// `Some(alpha)` scales the per-batch learning rate by
    /// `1 + alpha * minority_fraction`.
    pub adaptive_lr: Option<f64>,
    /// Bootstrap batch composition; defaults to half the batch size each.
    pub bootstrap: Option<BootstrapConfig>,
    pub architecture: Option<Vec<LayerSpec>>,
    /// Proceed when the validation split misses a training class.
    pub force: bool,
    /// Keep every epoch's batch plan in the result.
    #[serde(skip)]
    pub record_plans: bool,
}

impl RunConfig {
    pub fn for_method(method: Method) -> Self {
        Self {
            name: format!("{method:?}").to_lowercase(),
            method,
            loss: method.default_loss(),
            sampler: if method == Method::Bootstrap {
                SamplerKind::Bootstrap
            } else {
                SamplerKind::Plain
            },
            resample: Resample::None,
            epochs: 50,
            batch_size: 32,
            lr: 0.01,
            momentum: 0.0,
            seed: 0,
            early_stop: Some(EarlyStop::default()),
            gmse: GmseConfig::default(),
            adaptive_lr: (method == Method::AdaptiveLr).then_some(1.0),
            bootstrap: None,
            architecture: None,
            force: false,
            record_plans: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if let Some(a) = self.adaptive_lr {
            if !(a >= 0.0 && a.is_finite()) {
                return Err(Error::Config(format!(
                    "adaptive_lr alpha must be >= 0, got {a}"
                )));
            }
        }
        if !(self.gmse.lr_kappa > 0.0 && self.gmse.lr_kappa <= 1.0) {
            return Err(Error::Config(format!(
                "gmse.lr_kappa must lie in (0, 1], got {}",
                self.gmse.lr_kappa
            )));
        }
        if let Some(b) = &self.bootstrap {
            b.validate()?;
        }
        Ok(())
    }

    fn bootstrap_config(&self) -> BootstrapConfig {
        self.bootstrap.unwrap_or_else(|| {
            let half = (self.batch_size / 2).max(1);
            BootstrapConfig {
                s_n: half,
                s_p: half,
            }
        })
    }

    pub fn architecture_for(&self, n_classes: usize) -> Vec<LayerSpec> {
        self.architecture
            .clone()
            .unwrap_or_else(|| default_architecture(n_classes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_f3: f64,
    pub val_auc: f64,
    pub val_gmean: f64,
    pub val_accuracy: f64,
    /// κ after this epoch's update (GMSE only).
    pub kappa: Option<f64>,
    /// Target the update moved toward (GMSE only).
    pub target: Option<f64>,
}

/// GMSE quantities fixed at run start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GmseSetup {
    pub imbalance_ratio: f64,
    pub separability: f64,
    pub h: f64,
    pub kappa0: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Classifier,
    pub history: Vec<EpochRecord>,
    pub wall_time: f64,
    /// Evaluation of the returned weights on the validation split.
    pub final_eval: EvalReport,
    /// 1-based epoch whose weights were returned.
    pub best_epoch: usize,
    pub roles: ClassRoles,
    pub gmse: Option<GmseSetup>,
    pub plans: Vec<BatchPlan>,
}

/// Rows `idx` of `ds` as a `[B, n_dims, length]` batch plus labels.
pub fn gather(ds: &TimeSeriesDataset, idx: &[usize]) -> (Tensor, Vec<usize>) {
    let width = ds.n_dims() * ds.length();
    let mut data = Vec::with_capacity(idx.len() * width);
    let mut labels = Vec::with_capacity(idx.len());
    for &i in idx {
        let inst = ds.instance(i);
        data.extend_from_slice(&inst.values);
        labels.push(inst.label);
    }
    let t = Tensor::new(vec![idx.len(), ds.n_dims(), ds.length()], data).expect("consistent shape");
    (t, labels)
}

/// Class probabilities for every instance of `ds`.
pub fn predict(model: &Classifier, ds: &TimeSeriesDataset) -> Result<Tensor> {
    let all: Vec<usize> = (0..ds.len()).collect();
    let (x, _) = gather(ds, &all);
    model.forward(&x)
}

pub fn evaluate(model: &Classifier, ds: &TimeSeriesDataset, wall_time: f64) -> Result<EvalReport> {
    let probs = predict(model, ds)?;
    EvalReport::from_scores(&ds.labels(), &probs, wall_time)
}

fn stop_value(report: &EvalReport, metric: StopMetric) -> f64 {
    match metric {
        StopMetric::F3 => report.f_beta.macro_avg,
        StopMetric::Auc => report.auc.macro_avg,
        StopMetric::Gmean => report.gmean,
    }
}

/// Train `model` on `train`, monitoring `val` each epoch.
pub fn train_run(
    train: &TimeSeriesDataset,
    val: &TimeSeriesDataset,
    mut model: Classifier,
    cfg: &RunConfig,
) -> Result<RunResult> {
    let started = Instant::now();
    cfg.validate()?;
    if model.input_shape() != (train.n_dims(), train.length())
        || model.n_classes() != train.n_classes()
    {
        return Err(Error::Shape(
            "model does not match the training data".into(),
        ));
    }
    let val_counts = val.class_counts();
    let missing: Vec<usize> = train
        .class_counts()
        .iter()
        .enumerate()
        .filter(|&(c, &n)| n > 0 && val_counts.get(c).copied().unwrap_or(0) == 0)
        .map(|(c, _)| c)
        .collect();
    if !missing.is_empty() && !cfg.force {
        return Err(Error::ValidationCoverage { missing });
    }

    let roles = ClassRoles::of(train);
    let fit = cfg
        .resample
        .apply(train, derive_seed(cfg.seed, &[TAG_RESAMPLE]))?;

    let mut gmse_state = None;
    let mut gmse_setup = None;
    if cfg.loss == LossKind::Gmse {
        if roles.minority.is_empty() {
            return Err(Error::Precondition(
                "GMSE needs an imbalanced training split".into(),
            ));
        }
        let separability = dataset_separability(train, DistanceMetric::Euclidean)?.overall;
        let (imbalance_ratio, _) = measure_imbalance(train);
        let h = compute_h(imbalance_ratio, separability);
        let mut state = GmseState::new(
            h,
            cfg.gmse.variant,
            cfg.gmse.lr_kappa,
            roles.minority.clone(),
        )?;
        state.kappa = cfg.gmse.kappa0;
        gmse_setup = Some(GmseSetup {
            imbalance_ratio,
            separability,
            h,
            kappa0: cfg.gmse.kappa0,
        });
        gmse_state = Some(state);
    }

    let mut sgd = Sgd::new(cfg.momentum);
    let bootstrap_cfg = cfg.bootstrap_config();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut plans = Vec::new();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, &[TAG_EPOCH, epoch as u64]);
        let plan = match cfg.sampler {
            SamplerKind::Plain => plan_plain(&fit, cfg.batch_size, epoch_seed)?,
            SamplerKind::Bootstrap => plan_bootstrap(&fit, &bootstrap_cfg, &roles, epoch_seed)?,
        };
        let loss_spec = match cfg.loss {
            LossKind::Unweighted => LossSpec::UnweightedCe,
            LossKind::Weighted => LossSpec::WeightedCe,
            LossKind::Mse => LossSpec::Mse,
            LossKind::Mfe => LossSpec::Mfe {
                positive: roles.minority.clone(),
                lenient: true,
            },
            LossKind::Msfe => LossSpec::Msfe {
                positive: roles.minority.clone(),
                lenient: true,
            },
            LossKind::Gmse => gmse_state.as_ref().expect("initialized above").loss_spec(),
        };

        let mut loss_sum = 0.0;
        for batch in &plan.batches {
            let (x, labels) = gather(&fit, batch);
            let g = loss_and_grad(&model, &loss_spec, &x, &labels)?;
            if !g.loss.is_finite() {
                return Err(Error::Numerics(format!(
                    "loss became {} in epoch {epoch}",
                    g.loss
                )));
            }
            loss_sum += g.loss;
            let lr = match cfg.adaptive_lr {
                Some(alpha) => {
                    let minority = labels.iter().filter(|&&y| roles.is_minority(y)).count();
                    cfg.lr * (1.0 + alpha * minority as f64 / labels.len() as f64)
                }
                None => cfg.lr,
            };
            sgd.step(&mut model, &g.grad, lr)?;
        }
        let train_loss = if plan.batches.is_empty() {
            0.0
        } else {
            loss_sum / plan.batches.len() as f64
        };
        if cfg.record_plans {
            plans.push(plan);
        }

        let report = evaluate(&model, val, 0.0)?;
        let (mut kappa, mut target) = (None, None);
        if let Some(state) = gmse_state.as_mut() {
            let t = compute_t(state.variant, state.h, report.gmean, report.accuracy);
            *state = update_kappa(state, t);
            kappa = Some(state.kappa);
            target = Some(t);
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_f3: report.f_beta.macro_avg,
            val_auc: report.auc.macro_avg,
            val_gmean: report.gmean,
            val_accuracy: report.accuracy,
            kappa,
            target,
        });

        if let Some(stop) = cfg.early_stop {
            let value = stop_value(&report, stop.metric);
            let improved = best.as_ref().is_none_or(|(b, _, _)| value > *b);
            if improved {
                best = Some((value, epoch, model.params().to_vec()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= stop.patience {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.set_params(params)?;
            epoch
        }
        None => history.len(),
    };
    let final_eval = evaluate(&model, val, 0.0)?;
    let wall_time = started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
    Ok(RunResult {
        model,
        history,
        wall_time,
        final_eval: EvalReport {
            wall_time,
            ..final_eval
        },
        best_epoch,
        roles,
        gmse: gmse_setup,
        plans,
    })
}

/// Per-epoch history as CSV: `epoch,train_loss,val_f3,val_auc,val_gmean,kappa`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_f3,val_auc,val_gmean,kappa\n");
    for r in history {
        let kappa = r.kappa.map(|k| k.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_f3, r.val_auc, r.val_gmean, kappa
        ));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Mean and sample standard deviation (0 for a single value).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Evaluation on the held-out fold.
    pub test: EvalReport,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub train_counts: Vec<usize>,
    pub roles: ClassRoles,
    pub gmse: Option<GmseSetup>,
    #[serde(skip)]
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FoldFailure {
    pub fold: usize,
    pub error: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub f3: MeanSd,
    pub auc: MeanSd,
    pub gmean: MeanSd,
    pub accuracy: MeanSd,
    pub time: MeanSd,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodReport {
    pub method: String,
    pub folds: Vec<FoldResult>,
    pub failures: Vec<FoldFailure>,
    pub summary: Summary,
}

impl MethodReport {
    fn new(method: String, folds: Vec<FoldResult>, failures: Vec<FoldFailure>) -> Self {
        let pick = |f: fn(&FoldResult) -> f64| -> MeanSd {
            MeanSd::of(&folds.iter().map(f).collect::<Vec<_>>())
        };
        let summary = Summary {
            f3: pick(|r| r.test.f_beta.macro_avg),
            auc: pick(|r| r.test.auc.macro_avg),
            gmean: pick(|r| r.test.gmean),
            accuracy: pick(|r| r.test.accuracy),
            time: pick(|r| r.test.wall_time),
        };
        Self {
            method,
            folds,
            failures,
            summary,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CrossvalOptions {
    pub seed: u64,
    /// Worker threads; `1` runs sequentially.
    pub jobs: usize,
    /// The training portion of each fold is split again, stratified, into
    /// `val_folds` parts; one becomes the early-stopping validation set.
    pub val_folds: usize,
}

impl Default for CrossvalOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            jobs: 1,
            val_folds: 5,
        }
    }
}

struct Task {
    method: usize,
    fold: usize,
}

/// k-fold cross-validation of every method. Imbalance is applied to each
/// fold's training portion only. With `k = 1` the single fold serves as
/// both training and test data.
pub fn crossval(
    ds: &TimeSeriesDataset,
    k: usize,
    methods: &[RunConfig],
    imbalance: Option<&ImbalanceSpec>,
    opts: &CrossvalOptions,
) -> Result<Vec<MethodReport>> {
    for m in methods {
        m.validate()?;
    }
    if let Some(spec) = imbalance {
        spec.validate(ds.n_classes())?;
    }
    let folds = stratified_kfold(ds, k, derive_seed(opts.seed, &[TAG_FOLDS]))?;
    let tasks: Vec<Task> = (0..methods.len())
        .flat_map(|method| (0..k).map(move |fold| Task { method, fold }))
        .collect();

    let run_task = |t: &Task| -> Result<FoldResult> {
        let started = Instant::now();
        let cfg = &methods[t.method];
        let (train_idx, test_idx) = if k == 1 {
            let all: Vec<usize> = (0..ds.len()).collect();
            (all.clone(), all)
        } else {
            (folds.train_indices(t.fold), folds.test_indices(t.fold))
        };
        let mut train_part = ds.subset(&train_idx)?;
        let test = ds.subset(&test_idx)?;
        if let Some(spec) = imbalance {
            let spec = ImbalanceSpec {
                seed: derive_seed(spec.seed, &[TAG_IMBALANCE, t.fold as u64]),
                ..*spec
            };
            train_part = apply_imbalance(&train_part, &spec)?;
        }
        let inner = stratified_kfold(
            &train_part,
            opts.val_folds,
            derive_seed(opts.seed, &[TAG_INNER, t.fold as u64]),
        )?;
        let fit = train_part.subset(&inner.train_indices(0))?;
        let val = train_part.subset(&inner.test_indices(0))?;

        let model = Classifier::new(
            (ds.n_dims(), ds.length()),
            ds.n_classes(),
            cfg.architecture_for(ds.n_classes()),
            derive_seed(opts.seed, &[TAG_MODEL, t.fold as u64]),
        )?;
        let run_cfg = RunConfig {
            seed: derive_seed(opts.seed, &[TAG_RUN, label_hash(&cfg.name), t.fold as u64]),
            ..cfg.clone()
        };
        let result = train_run(&fit, &val, model, &run_cfg)?;
        let probs = predict(&result.model, &test)?;
        let wall_time = started.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
        Ok(FoldResult {
            fold: t.fold,
            test: EvalReport::from_scores(&test.labels(), &probs, wall_time)?,
            history: result.history,
            best_epoch: result.best_epoch,
            train_counts: train_part.class_counts(),
            roles: result.roles,
            gmse: result.gmse,
            params: result.model.params().to_vec(),
        })
    };

    let outcomes: Vec<Result<FoldResult>> = if opts.jobs <= 1 {
        tasks.iter().map(run_task).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| tasks.par_iter().map(run_task).collect())
    };

    let mut per_method: Vec<(Vec<FoldResult>, Vec<FoldFailure>)> = (0..methods.len())
        .map(|_| (Vec::new(), Vec::new()))
        .collect();
    for (t, outcome) in tasks.iter().zip(outcomes) {
        match outcome {
            Ok(r) => per_method[t.method].0.push(r),
            Err(e) => per_method[t.method].1.push(FoldFailure {
                fold: t.fold,
                error: e.to_string(),
            }),
        }
    }
    Ok(methods
        .iter()
        .zip(per_method)
        .map(|(cfg, (folds, failures))| MethodReport::new(cfg.name.clone(), folds, failures))
        .collect())
}
