//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure (I/O, data, training), 2 usage
//! (bad flags, bad manifest values, invalid imbalance parameters).
//!
//! # Manifest
//!
//! `crossval` (alias `run`) reads a TOML manifest:
//!
//! ```toml
//! seed = 7            # overridden by IMBLAB_SEED
//! folds = 4
//! output = "out"      # relative to the manifest's directory
//! jobs = 1
//!
//! [[dataset]]
//! path = "data/two_patterns.csv"
//!
//! [[dataset]]
//! name = "synthetic"
//! synth = "two_patterns"
//! n_per_class = 250
//! length = 128
//! noise = 0.3
//!
//! [imbalance]          # optional; applied to each training fold
//! form = "step"
//! rho = 4.0
//! mu = 0.5
//!
//! [defaults]           # any method key, applied to every method
//! epochs = 30
//! momentum = 0.9
//!
//! [[method]]
//! name = "gmse"        # also the preset unless `method` is given
//! gmse.variant = "T2"
//! ```
//!
//! Method keys: `method`, `loss`, `sampler`, `resample`, `epochs`,
//! `batch_size`, `lr`, `momentum`, `early_stop.patience` (0 disables early
//! stopping), `early_stop.metric`, `gmse.variant`, `gmse.lr_kappa`,
//! `gmse.kappa0`, `adaptive_lr.alpha`, `bootstrap.s_n`, `bootstrap.s_p`,
//! `architecture`, `force`.
//!
//! Seeds: folds, imbalance, model initialization and every run derive from
//! the manifest seed through [`derive_seed`] with fixed tag paths, so one
//! seed reproduces every output except measured wall times.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{
    apply_imbalance, load_dataset, measure_imbalance, stratified_kfold, synth_two_patterns,
    write_dataset, DatasetFormat, ImbalanceForm, ImbalanceSpec, LoadOptions, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::loss::{LossKind, TargetVariant};
use crate::net::{Classifier, LayerSpec};
use crate::rng::derive_seed;
use crate::sampling::{BootstrapConfig, Resample};
use crate::separability::{dataset_separability, DistanceMetric};
use crate::train::{
    crossval, evaluate, history_csv, train_run, CrossvalOptions, EarlyStop, Method, MethodReport,
    RunConfig, SamplerKind, StopMetric,
};

pub const SEED_ENV: &str = "IMBLAB_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "imblab",
    version,
    about = "Imbalanced time-series classification experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic two-pattern dataset as Long CSV.
    Synth {
        #[arg(long, default_value_t = 250)]
        n_per_class: usize,
        #[arg(long, default_value_t = 128)]
        length: usize,
        #[arg(long, default_value_t = 0.3)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Derive an imbalanced subset of a balanced dataset.
    Imbalance {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, default_value = "long-csv")]
        format: String,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value_t = 0.5)]
        mu: f64,
        #[arg(long, default_value = "step")]
        form: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        output: PathBuf,
        /// Summary JSON path; defaults to `<output stem>.summary.json`.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Class separability score of a dataset as JSON.
    Separability {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, default_value = "long-csv")]
        format: String,
        /// Skip per-series z-normalization.
        #[arg(long)]
        raw: bool,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Train one model with a held-out validation split.
    Train {
        #[arg(long, short)]
        input: PathBuf,
        #[arg(long, default_value = "long-csv")]
        format: String,
        #[arg(long, default_value = "weighted")]
        method: String,
        /// TOML file with method keys (same as a manifest `[[method]]`).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of the input held out for validation, as 1/k.
        #[arg(long, default_value_t = 5)]
        val_folds: usize,
        /// Optional test set evaluated with the trained model.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, short)]
        output: PathBuf,
    },
    /// Cross-validate every method of a manifest.
    #[command(alias = "run")]
    Crossval {
        manifest: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Render F3, AUC and time tables from a crossval output directory.
    Report {
        /// Output directory of `crossval`, or its `results.json`.
        input: PathBuf,
        #[arg(long, default_value = "markdown")]
        format: String,
    },
}

/// Parse arguments, run, and return the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_usage() {
        2
    } else {
        1
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Synth {
            n_per_class,
            length,
            noise,
            seed,
            output,
        } => {
            let ds = synth_two_patterns(n_per_class, length, noise, seed)?;
            write_dataset(&ds, &output)?;
            Ok(0)
        }
        Command::Imbalance {
            input,
            format,
            rho,
            mu,
            form,
            seed,
            output,
            summary,
        } => {
            let form = ImbalanceForm::from_str(&form)?;
            let spec = ImbalanceSpec {
                form,
                rho,
                mu,
                seed,
            };
            cmd_imbalance(
                &input,
                parse_format(&format)?,
                &spec,
                &output,
                summary.as_deref(),
            )?;
            Ok(0)
        }
        Command::Separability {
            input,
            format,
            raw,
            output,
        } => {
            let ds = load_dataset(
                &input,
                parse_format(&format)?,
                LoadOptions { znormalize: !raw },
            )?;
            let json = format!(
                "{}\n",
                dataset_separability(&ds, DistanceMetric::Euclidean)?.to_json()
            );
            match output {
                Some(path) => write_atomic(&path, json.as_bytes())?,
                None => print!("{json}"),
            }
            Ok(0)
        }
        Command::Train {
            input,
            format,
            method,
            config,
            epochs,
            lr,
            seed,
            val_folds,
            test,
            output,
        } => {
            let format = parse_format(&format)?;
            let mut entry = match &config {
                Some(path) => {
                    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                    toml::from_str::<MethodEntry>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
                }
                None => MethodEntry::default(),
            };
            if entry.method.is_none() {
                entry.method = Some(method.clone());
            }
            entry.epochs = epochs.or(entry.epochs);
            entry.lr = lr.or(entry.lr);
            let mut cfg = entry.resolve(&MethodEntry::default())?;
            cfg.seed = seed;
            cmd_train(&input, format, &cfg, val_folds, test.as_deref(), &output)?;
            Ok(0)
        }
        Command::Crossval {
            manifest,
            jobs,
            output,
        } => {
            let env_seed = match std::env::var(SEED_ENV) {
                Ok(v) => Some(v.trim().parse::<u64>().map_err(|_| {
                    Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))
                })?),
                Err(_) => None,
            };
            let mut m = Manifest::load(&manifest)?;
            if let Some(seed) = env_seed {
                m.seed = seed;
            }
            if let Some(j) = jobs {
                m.jobs = j;
            }
            if let Some(o) = output {
                m.output = o;
            }
            let outcome = cmd_run(&m)?;
            Ok(if outcome.failed_runs > 0 { 1 } else { 0 })
        }
        Command::Report { input, format } => {
            let path = if input.is_dir() {
                input.join("results.json")
            } else {
                input
            };
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let bundle: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
            let out = match format.as_str() {
                "markdown" | "md" => render_markdown(&bundle)?,
                "csv" => render_csv(&bundle)?,
                other => return Err(Error::Argument(format!("unknown report format {other:?}"))),
            };
            print!("{out}");
            Ok(0)
        }
    }
}

fn parse_format(s: &str) -> Result<DatasetFormat> {
    DatasetFormat::from_str(s).map_err(|e| Error::Argument(e.to_string()))
}

#[derive(Debug, Serialize)]
pub struct ImbalanceSummary {
    pub rho_measured: f64,
    pub mu_measured: f64,
    pub per_class_counts: std::collections::BTreeMap<String, usize>,
}

pub fn cmd_imbalance(
    input: &Path,
    format: DatasetFormat,
    spec: &ImbalanceSpec,
    output: &Path,
    summary: Option<&Path>,
) -> Result<ImbalanceSummary> {
    // validate before touching the file so bad parameters exit as usage errors
    if !spec.rho.is_finite() || spec.rho < 1.0 {
        return Err(Error::Spec(format!("rho must be >= 1, got {}", spec.rho)));
    }
    let ds = load_dataset(input, format, LoadOptions { znormalize: false })?;
    let out = apply_imbalance(&ds, spec)?;
    write_dataset(&out, output)?;
    let (rho_measured, mu_measured) = measure_imbalance(&out);
    let report = ImbalanceSummary {
        rho_measured,
        mu_measured,
        per_class_counts: out
            .label_names()
            .iter()
            .cloned()
            .zip(out.class_counts())
            .collect(),
    };
    let path = summary.map(Path::to_path_buf).unwrap_or_else(|| {
        let stem = output
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        output.with_file_name(format!("{stem}.summary.json"))
    });
    let json = serde_json::to_string_pretty(&report).expect("summary serializes");
    write_atomic(&path, format!("{json}\n").as_bytes())?;
    Ok(report)
}

#[derive(Debug, Serialize)]
struct TrainSummary<'a> {
    method: &'a str,
    best_epoch: usize,
    wall_time: f64,
    validation: &'a crate::metrics::EvalReport,
    test: Option<crate::metrics::EvalReport>,
}

pub fn cmd_train(
    input: &Path,
    format: DatasetFormat,
    cfg: &RunConfig,
    val_folds: usize,
    test: Option<&Path>,
    output: &Path,
) -> Result<()> {
    let ds = load_dataset(input, format, LoadOptions::default())?;
    let test_ds = test
        .map(|p| load_dataset(p, format, LoadOptions::default()))
        .transpose()?;
    let split = stratified_kfold(&ds, val_folds, derive_seed(cfg.seed, &[0]))?;
    let fit = ds.subset(&split.train_indices(0))?;
    let val = ds.subset(&split.test_indices(0))?;
    let model = Classifier::new(
        (ds.n_dims(), ds.length()),
        ds.n_classes(),
        cfg.architecture_for(ds.n_classes()),
        derive_seed(cfg.seed, &[1]),
    )?;
    let result = train_run(&fit, &val, model, cfg)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    result.model.save(&output.join("model.bin"))?;
    write_atomic(
        &output.join("history.csv"),
        history_csv(&result.history).as_bytes(),
    )?;
    let test_eval = match &test_ds {
        Some(t) => Some(evaluate(&result.model, t, result.wall_time)?),
        None => None,
    };
    let summary = TrainSummary {
        method: &cfg.name,
        best_epoch: result.best_epoch,
        wall_time: result.wall_time,
        validation: &result.final_eval,
        test: test_eval,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_atomic(&output.join("summary.json"), format!("{json}\n").as_bytes())
}

/// Per-method keys shared by `[defaults]`, `[[method]]` and `train --config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodEntry {
    pub name: Option<String>,
    pub method: Option<String>,
    pub loss: Option<String>,
    pub sampler: Option<String>,
    pub resample: Option<String>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub early_stop: Option<EarlyStopKeys>,
    pub gmse: Option<GmseKeys>,
    pub adaptive_lr: Option<AdaptiveKeys>,
    pub bootstrap: Option<BootstrapKeys>,
    pub architecture: Option<Vec<LayerSpec>>,
    pub force: Option<bool>,
}

/// `early_stop.patience` (0 disables) and `early_stop.metric`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStopKeys {
    pub patience: Option<usize>,
    pub metric: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmseKeys {
    pub variant: Option<String>,
    pub lr_kappa: Option<f64>,
    pub kappa0: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptiveKeys {
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapKeys {
    pub s_n: Option<usize>,
    pub s_p: Option<usize>,
}

macro_rules! pick {
    ($self:ident, $defaults:ident, $field:ident) => {
        $self.$field.clone().or_else(|| $defaults.$field.clone())
    };
    ($self:ident, $defaults:ident, $group:ident . $field:ident) => {
        $self
            .$group
            .as_ref()
            .and_then(|g| g.$field.clone())
            .or_else(|| $defaults.$group.as_ref().and_then(|g| g.$field.clone()))
    };
}

impl MethodEntry {
    /// Resolve against `defaults` into a validated run configuration.
    pub fn resolve(&self, defaults: &MethodEntry) -> Result<RunConfig> {
        let preset_name = pick!(self, defaults, method)
            .or_else(|| self.name.clone())
            .ok_or_else(|| Error::Config("method entry needs `name` or `method`".into()))?;
        let preset = Method::from_str(&preset_name)?;
        let mut cfg = RunConfig::for_method(preset);
        cfg.name = self.name.clone().unwrap_or(preset_name);
        if let Some(s) = pick!(self, defaults, loss) {
            cfg.loss = LossKind::from_str(&s)?;
        }
        if let Some(s) = pick!(self, defaults, sampler) {
            cfg.sampler = match s.to_ascii_lowercase().as_str() {
                "plain" => SamplerKind::Plain,
                "bootstrap" => SamplerKind::Bootstrap,
                other => return Err(Error::Config(format!("unknown sampler {other:?}"))),
            };
        }
        if let Some(s) = pick!(self, defaults, resample) {
            cfg.resample = Resample::from_str(&s)?;
        }
        if let Some(v) = pick!(self, defaults, epochs) {
            cfg.epochs = v;
        }
        if let Some(v) = pick!(self, defaults, batch_size) {
            cfg.batch_size = v;
        }
        if let Some(v) = pick!(self, defaults, lr) {
            cfg.lr = v;
        }
        if let Some(v) = pick!(self, defaults, momentum) {
            cfg.momentum = v;
        }
        let patience = pick!(self, defaults, early_stop.patience);
        let metric = pick!(self, defaults, early_stop.metric)
            .map(|s| match s.to_ascii_lowercase().as_str() {
                "f3" => Ok(StopMetric::F3),
                "auc" => Ok(StopMetric::Auc),
                "gmean" | "g_mean" => Ok(StopMetric::Gmean),
                other => Err(Error::Config(format!(
                    "unknown early_stop.metric {other:?}"
                ))),
            })
            .transpose()?;
        cfg.early_stop = match patience {
            Some(0) => None,
            p => Some(EarlyStop {
                patience: p.unwrap_or(EarlyStop::default().patience),
                metric: metric.unwrap_or(StopMetric::F3),
            }),
        };
        if let Some(s) = pick!(self, defaults, gmse.variant) {
            cfg.gmse.variant = TargetVariant::from_str(&s)?;
        }
        if let Some(v) = pick!(self, defaults, gmse.lr_kappa) {
            cfg.gmse.lr_kappa = v;
        }
        if let Some(v) = pick!(self, defaults, gmse.kappa0) {
            cfg.gmse.kappa0 = v;
        }
        if let Some(v) = pick!(self, defaults, adaptive_lr.alpha) {
            cfg.adaptive_lr = Some(v);
        }
        match (
            pick!(self, defaults, bootstrap.s_n),
            pick!(self, defaults, bootstrap.s_p),
        ) {
            (None, None) => {}
            (s_n, s_p) => {
                let half = (cfg.batch_size / 2).max(1);
                cfg.bootstrap = Some(BootstrapConfig {
                    s_n: s_n.unwrap_or(half),
                    s_p: s_p.unwrap_or(half),
                });
            }
        }
        if let Some(a) = pick!(self, defaults, architecture) {
            cfg.architecture = Some(a);
        }
        if let Some(f) = pick!(self, defaults, force) {
            cfg.force = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub name: Option<String>,
    pub path: Option<PathBuf>,
    pub format: Option<String>,
    pub synth: Option<String>,
    pub n_per_class: Option<usize>,
    pub length: Option<usize>,
    pub noise: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalanceEntry {
    pub form: String,
    pub rho: f64,
    #[serde(default)]
    pub mu: f64,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_folds")]
    folds: usize,
    #[serde(default = "default_output")]
    output: PathBuf,
    #[serde(default = "default_jobs")]
    jobs: usize,
    #[serde(default = "default_val_folds")]
    val_folds: usize,
    #[serde(default)]
    dataset: Vec<DatasetEntry>,
    imbalance: Option<ImbalanceEntry>,
    #[serde(default)]
    defaults: MethodEntry,
    #[serde(default)]
    method: Vec<MethodEntry>,
}

fn default_folds() -> usize {
    5
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}
fn default_jobs() -> usize {
    1
}
fn default_val_folds() -> usize {
    5
}

#[derive(Debug, Clone)]
pub enum DatasetSource {
    File {
        path: PathBuf,
        format: DatasetFormat,
    },
    TwoPatterns {
        n_per_class: usize,
        length: usize,
        noise: f64,
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone)]
pub struct ManifestDataset {
    pub name: String,
    pub source: DatasetSource,
}

/// Validated experiment manifest; relative paths are already resolved.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub seed: u64,
    pub folds: usize,
    pub output: PathBuf,
    pub jobs: usize,
    pub val_folds: usize,
    pub datasets: Vec<ManifestDataset>,
    pub imbalance: Option<(ImbalanceForm, f64, f64, Option<u64>)>,
    pub methods: Vec<RunConfig>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let raw: RawManifest = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if raw.folds == 0 {
            return Err(Error::Config("folds must be >= 1".into()));
        }
        if raw.dataset.is_empty() {
            return Err(Error::Config("manifest lists no [[dataset]]".into()));
        }
        if raw.method.is_empty() {
            return Err(Error::Config("manifest lists no [[method]]".into()));
        }
        let resolve = |p: &Path| {
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };

        let mut datasets = Vec::new();
        let mut names = BTreeSet::new();
        for (i, d) in raw.dataset.iter().enumerate() {
            let (default_name, source) = match (&d.path, &d.synth) {
                (Some(p), None) => {
                    let path = resolve(p);
                    if !path.exists() {
                        return Err(Error::io(
                            &path,
                            std::io::Error::new(
                                std::io::ErrorKind::NotFound,
                                "dataset file not found",
                            ),
                        ));
                    }
                    let format = parse_format(d.format.as_deref().unwrap_or("long-csv"))
                        .map_err(|e| Error::Config(e.to_string()))?;
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default();
                    (stem, DatasetSource::File { path, format })
                }
                (None, Some(kind)) if kind == "two_patterns" => (
                    format!("two_patterns_{i}"),
                    DatasetSource::TwoPatterns {
                        n_per_class: d.n_per_class.unwrap_or(250),
                        length: d.length.unwrap_or(128),
                        noise: d.noise.unwrap_or(0.3),
                        seed: d.seed,
                    },
                ),
                (None, Some(kind)) => {
                    return Err(Error::Config(format!("unknown synthetic dataset {kind:?}")))
                }
                _ => {
                    return Err(Error::Config(format!(
                        "dataset {i}: give exactly one of `path` or `synth`"
                    )))
                }
            };
            let name = d.name.clone().unwrap_or(default_name);
            if !names.insert(name.clone()) {
                return Err(Error::Config(format!("duplicate dataset name {name:?}")));
            }
            datasets.push(ManifestDataset { name, source });
        }

        let mut methods = Vec::new();
        let mut method_names = BTreeSet::new();
        for m in &raw.method {
            let cfg = m.resolve(&raw.defaults)?;
            if !method_names.insert(cfg.name.clone()) {
                return Err(Error::Config(format!(
                    "duplicate method name {:?}",
                    cfg.name
                )));
            }
            methods.push(cfg);
        }

        let imbalance = match &raw.imbalance {
            Some(e) => {
                let form = ImbalanceForm::from_str(&e.form)?;
                if !e.rho.is_finite() || e.rho < 1.0 {
                    return Err(Error::Spec(format!("rho must be >= 1, got {}", e.rho)));
                }
                if form == ImbalanceForm::Step && !(e.mu > 0.0 && e.mu < 1.0) {
                    return Err(Error::Spec(format!("mu must lie in (0, 1), got {}", e.mu)));
                }
                Some((form, e.rho, e.mu, e.seed))
            }
            None => None,
        };

        Ok(Self {
            seed: raw.seed,
            folds: raw.folds,
            output: resolve(&raw.output),
            jobs: raw.jobs.max(1),
            val_folds: raw.val_folds,
            datasets,
            imbalance,
            methods,
        })
    }

    fn load_dataset(&self, index: usize) -> Result<TimeSeriesDataset> {
        let d = &self.datasets[index];
        let ds = match &d.source {
            DatasetSource::File { path, format } => {
                load_dataset(path, *format, LoadOptions::default())?
            }
            DatasetSource::TwoPatterns {
                n_per_class,
                length,
                noise,
                seed,
            } => {
                let seed =
                    seed.unwrap_or_else(|| derive_seed(self.seed, &[TAG_SYNTH, index as u64]));
                let mut ds = synth_two_patterns(*n_per_class, *length, *noise, seed)?;
                ds.znormalize();
                ds
            }
        };
        Ok(ds.renamed(d.name.clone()))
    }
}

const TAG_SYNTH: u64 = 100;
const TAG_DATASET: u64 = 101;
const TAG_IMBALANCE: u64 = 102;

#[derive(Debug, Serialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub separability: f64,
    pub methods: Vec<MethodReport>,
}

#[derive(Debug, Serialize)]
pub struct RunBundle {
    pub seed: u64,
    pub folds: usize,
    pub imbalance: Option<ImbalanceSpec>,
    pub datasets: Vec<DatasetResult>,
}

pub struct RunOutcome {
    pub bundle: RunBundle,
    pub failed_runs: usize,
}

/// Cross-validate every (dataset, method) pair and write `results.csv`,
/// `results.json` and `history/<dataset>/<method>/fold<k>.csv`.
pub fn cmd_run(m: &Manifest) -> Result<RunOutcome> {
    // load everything first so a bad file fails before any training
    let datasets = (0..m.datasets.len())
        .map(|i| m.load_dataset(i))
        .collect::<Result<Vec<_>>>()?;

    let mut results = Vec::new();
    let mut failed_runs = 0;
    let mut imbalance_used = None;
    for (i, ds) in datasets.iter().enumerate() {
        let ds_seed = derive_seed(m.seed, &[TAG_DATASET, i as u64]);
        let spec = m.imbalance.map(|(form, rho, mu, seed)| ImbalanceSpec {
            form,
            rho,
            mu,
            seed: seed.unwrap_or_else(|| derive_seed(m.seed, &[TAG_IMBALANCE, i as u64])),
        });
        if imbalance_used.is_none() {
            imbalance_used = spec;
        }
        let separability = dataset_separability(ds, DistanceMetric::Euclidean)?.overall;
        let opts = CrossvalOptions {
            seed: ds_seed,
            jobs: m.jobs,
            val_folds: m.val_folds,
        };
        let methods = crossval(ds, m.folds, &m.methods, spec.as_ref(), &opts)?;
        for report in &methods {
            for f in &report.failures {
                eprintln!(
                    "run failed: dataset {} method {} fold {}: {}",
                    ds.name(),
                    report.method,
                    f.fold,
                    f.error
                );
            }
            failed_runs += report.failures.len();
        }
        results.push(DatasetResult {
            dataset: ds.name().to_string(),
            separability,
            methods,
        });
    }

    let bundle = RunBundle {
        seed: m.seed,
        folds: m.folds,
        imbalance: imbalance_used,
        datasets: results,
    };
    write_outputs(&m.output, &bundle)?;
    Ok(RunOutcome {
        bundle,
        failed_runs,
    })
}

pub const RESULTS_HEADER: &str =
    "dataset,separability,method,f3_mean,f3_sd,auc_mean,auc_sd,time_mean,time_sd";

pub fn results_csv(bundle: &RunBundle) -> String {
    let mut out = format!("{RESULTS_HEADER}\n");
    for d in &bundle.datasets {
        for r in &d.methods {
            let s = &r.summary;
            let _ = writeln!(
                out,
                "{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                csv_field(&d.dataset),
                d.separability,
                csv_field(&r.method),
                s.f3.mean,
                s.f3.sd,
                s.auc.mean,
                s.auc.sd,
                s.time.mean,
                s.time.sd
            );
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn file_component(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_outputs(dir: &Path, bundle: &RunBundle) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in &bundle.datasets {
        for r in &d.methods {
            let hdir = dir
                .join("history")
                .join(file_component(&d.dataset))
                .join(file_component(&r.method));
            std::fs::create_dir_all(&hdir).map_err(|e| Error::io(&hdir, e))?;
            for f in &r.folds {
                write_atomic(
                    &hdir.join(format!("fold{}.csv", f.fold)),
                    history_csv(&f.history).as_bytes(),
                )?;
            }
        }
    }
    write_atomic(&dir.join("results.csv"), results_csv(bundle).as_bytes())?;
    let json = serde_json::to_string_pretty(bundle).expect("bundle serializes");
    write_atomic(&dir.join("results.json"), format!("{json}\n").as_bytes())
}

fn bundle_rows(bundle: &serde_json::Value) -> Result<Vec<(String, String, serde_json::Value)>> {
    let bad = || Error::Format("results.json has an unexpected layout".into());
    let mut rows = Vec::new();
    for d in bundle["datasets"].as_array().ok_or_else(bad)? {
        let ds = d["dataset"].as_str().ok_or_else(bad)?.to_string();
        for m in d["methods"].as_array().ok_or_else(bad)? {
            let name = m["method"].as_str().ok_or_else(bad)?.to_string();
            rows.push((ds.clone(), name, m["summary"].clone()));
        }
    }
    Ok(rows)
}

fn cell(summary: &serde_json::Value, key: &str, scale: f64, digits: usize) -> String {
    let mean = summary[key]["mean"].as_f64();
    let sd = summary[key]["sd"].as_f64();
    match (mean, sd) {
        (Some(m), Some(s)) => format!("{:.*} ± {:.*}", digits, m * scale, digits, s * scale),
        _ => "n/a".to_string(),
    }
}

/// Three markdown tables: F3 (%), AUC (%), training time (s). Rows are
/// datasets, columns methods.
pub fn render_markdown(bundle: &serde_json::Value) -> Result<String> {
    let rows = bundle_rows(bundle)?;
    let mut datasets: Vec<String> = Vec::new();
    let mut methods: Vec<String> = Vec::new();
    for (d, m, _) in &rows {
        if !datasets.contains(d) {
            datasets.push(d.clone());
        }
        if !methods.contains(m) {
            methods.push(m.clone());
        }
    }
    let mut out = String::new();
    for (title, key, scale, digits) in [
        ("F3 (%)", "f3", 100.0, 2),
        ("AUC (%)", "auc", 100.0, 2),
        ("Training time (s)", "time", 1.0, 3),
    ] {
        let _ = writeln!(out, "### {title}\n");
        let _ = writeln!(out, "| dataset | {} |", methods.join(" | "));
        let _ = writeln!(out, "|---|{}", "---|".repeat(methods.len()));
        for d in &datasets {
            let cells: Vec<String> = methods
                .iter()
                .map(|m| {
                    rows.iter()
                        .find(|(rd, rm, _)| rd == d && rm == m)
                        .map(|(_, _, s)| cell(s, key, scale, digits))
                        .unwrap_or_else(|| "n/a".into())
                })
                .collect();
            let _ = writeln!(out, "| {d} | {} |", cells.join(" | "));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn render_csv(bundle: &serde_json::Value) -> Result<String> {
    let mut out = String::from("dataset,method,f3,auc,gmean,time\n");
    for (d, m, s) in bundle_rows(bundle)? {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            csv_field(&d),
            csv_field(&m),
            cell(&s, "f3", 1.0, 6),
            cell(&s, "auc", 1.0, 6),
            cell(&s, "gmean", 1.0, 6),
            cell(&s, "time", 1.0, 6)
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
folds = 2

[[dataset]]
synth = "two_patterns"
n_per_class = 10
length = 16

[defaults]
epochs = 2

[[method]]
name = "weighted"

[[method]]
name = "gmse-t1"
method = "gmse"
gmse.variant = "t1"
early_stop.patience = 0
"#;

    #[test]
    fn manifest_parses_and_resolves() {
        let m = Manifest::parse(MINIMAL, Path::new("/tmp")).unwrap();
        assert_eq!(m.seed, 3);
        assert_eq!(m.folds, 2);
        assert_eq!(m.methods.len(), 2);
        assert_eq!(m.methods[0].epochs, 2);
        assert_eq!(m.methods[1].method, Method::Gmse);
        assert_eq!(m.methods[1].gmse.variant, TargetVariant::T1);
        assert!(m.methods[1].early_stop.is_none());
        assert_eq!(m.output, Path::new("/tmp/results"));
    }

    #[test]
    fn manifest_rejects_bad_input() {
        let dup = format!("{MINIMAL}\n[[method]]\nname = \"weighted\"\n");
        assert!(matches!(
            Manifest::parse(&dup, Path::new(".")),
            Err(Error::Config(_))
        ));
        let unknown = MINIMAL.replace("epochs = 2", "epochz = 2");
        assert!(matches!(
            Manifest::parse(&unknown, Path::new(".")),
            Err(Error::Config(_))
        ));
        let missing = MINIMAL.replace("synth = \"two_patterns\"", "path = \"no/such/file.csv\"");
        let err = Manifest::parse(&missing, Path::new("/nonexistent")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert_eq!(exit_code(&err), 1);
        let bad_rho = format!("{MINIMAL}\n[imbalance]\nform = \"step\"\nrho = 0.5\nmu = 0.5\n");
        assert_eq!(
            exit_code(&Manifest::parse(&bad_rho, Path::new(".")).unwrap_err()),
            2
        );
    }

    #[test]
    fn results_csv_format() {
        let bundle = RunBundle {
            seed: 0,
            folds: 1,
            imbalance: None,
            datasets: vec![],
        };
        assert_eq!(results_csv(&bundle), format!("{RESULTS_HEADER}\n"));
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(file_component("x/y z"), "x_y_z");
    }
}
