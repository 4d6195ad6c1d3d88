//! Time-series datasets: loading, validation, imbalance synthesis,
//! stratified folds and a synthetic two-pattern generator.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::rng::{derive_seed, rng_from};

/// One labeled series. `values` is row-major `n_dims × length`.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub label: usize,
    pub values: Vec<f64>,
}

/// A labeled collection of equal-shape series.
///
/// Invariants (checked by [`TimeSeriesDataset::new`]): every instance has
/// `n_dims * length` finite values, labels lie in `0..n_classes`, and every
/// class has at least one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesDataset {
    name: String,
    n_classes: usize,
    n_dims: usize,
    length: usize,
    instances: Vec<Instance>,
    label_names: Vec<String>,
}

impl TimeSeriesDataset {
    pub fn new(
        name: impl Into<String>,
        n_dims: usize,
        length: usize,
        label_names: Vec<String>,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let n_classes = label_names.len();
        if n_dims == 0 || length == 0 {
            return Err(Error::Data(format!(
                "series shape must be non-empty, got ({n_dims}, {length})"
            )));
        }
        let mut counts = vec![0usize; n_classes];
        for inst in &instances {
            if inst.values.len() != n_dims * length {
                return Err(Error::Data(format!(
                    "instance {} has {} values, expected {}",
                    inst.id,
                    inst.values.len(),
                    n_dims * length
                )));
            }
            if inst.label >= n_classes {
                return Err(Error::Label {
                    label: inst.label,
                    n_classes,
                });
            }
            if let Some(v) = inst.values.iter().find(|v| !v.is_finite()) {
                return Err(Error::Data(format!("instance {} contains {v}", inst.id)));
            }
            counts[inst.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!(
                "class {} ({}) has no instances",
                c, label_names[c]
            )));
        }
        Ok(Self {
            name: name.into(),
            n_classes,
            n_dims,
            length,
            instances,
            label_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_dims(&self) -> usize {
        self.n_dims
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &Instance {
        &self.instances[i]
    }

    /// Original label text for each dense class index.
    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn labels(&self) -> Vec<usize> {
        self.instances.iter().map(|i| i.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for inst in &self.instances {
            counts[inst.label] += 1;
        }
        counts
    }

    /// Instance positions grouped by class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, inst) in self.instances.iter().enumerate() {
            out[inst.label].push(i);
        }
        out
    }

    /// Sub-dataset of the given positions, keeping the class space.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let instances = indices.iter().map(|&i| self.instances[i].clone()).collect();
        Self::new(
            self.name.clone(),
            self.n_dims,
            self.length,
            self.label_names.clone(),
            instances,
        )
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Z-normalize every (instance, dimension) row in place. Constant rows
    /// are only centered.
    pub fn znormalize(&mut self) {
        let len = self.length;
        for inst in &mut self.instances {
            for row in inst.values.chunks_mut(len) {
                let mean = row.iter().sum::<f64>() / len as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64;
                let sd = var.sqrt();
                for v in row.iter_mut() {
                    *v -= mean;
                    if sd > 1e-12 {
                        *v /= sd;
                    }
                }
            }
        }
    }

    /// Re-index labels so that `names[i]` becomes label `i`.
    pub fn with_label_order(&self, names: Vec<String>) -> Result<Self> {
        let mut sorted = names.clone();
        sorted.sort();
        let mut current = self.label_names.clone();
        current.sort();
        if sorted != current {
            return Err(Error::Format(format!(
                "label order {names:?} does not match labels {:?}",
                self.label_names
            )));
        }
        let remap: Vec<usize> = self
            .label_names
            .iter()
            .map(|l| names.iter().position(|n| n == l).expect("checked above"))
            .collect();
        let instances = self
            .instances
            .iter()
            .map(|inst| Instance {
                label: remap[inst.label],
                ..inst.clone()
            })
            .collect();
        Self::new(
            self.name.clone(),
            self.n_dims,
            self.length,
            names,
            instances,
        )
    }

    /// Label mapping as written to the `<name>.labels.json` sidecar.
    pub fn label_map(&self) -> BTreeMap<String, usize> {
        self.label_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect()
    }
}

/// Supported ingestion formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    LongCsv,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "long-csv" | "longcsv" | "csv" => Ok(DatasetFormat::LongCsv),
            other => Err(Error::Format(format!("unknown dataset format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub znormalize: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { znormalize: true }
    }
}

/// Load a dataset from disk. Labels are remapped to dense indices in sorted
/// label order (numeric order when every label parses as a number).
pub fn load_dataset(
    path: &Path,
    format: DatasetFormat,
    opts: LoadOptions,
) -> Result<TimeSeriesDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    let mut ds = match format {
        DatasetFormat::LongCsv => parse_long_csv(&name, &text)?,
    };
    let sidecar = path.with_file_name(format!("{name}.labels.json"));
    if sidecar.exists() {
        let raw = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let map: BTreeMap<String, usize> = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", sidecar.display())))?;
        let mut order: Vec<(usize, String)> = map.into_iter().map(|(k, v)| (v, k)).collect();
        order.sort();
        ds = ds.with_label_order(order.into_iter().map(|(_, k)| k).collect())?;
    }
    if opts.znormalize {
        ds.znormalize();
    }
    Ok(ds)
}

struct RawInstance {
    id: String,
    label: String,
    rows: BTreeMap<usize, Vec<f64>>,
}

/// Parse the Long CSV layout: header `instance_id,label,dim,t0,...,t{L-1}`,
/// one row per (instance, dimension).
pub fn parse_long_csv(name: &str, text: &str) -> Result<TimeSeriesDataset> {
    if text.trim().is_empty() {
        return Err(Error::Format("empty file".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .clone();
    if header.len() < 4
        || &header[0] != "instance_id"
        || &header[1] != "label"
        || &header[2] != "dim"
    {
        return Err(Error::Format(
            "header must be instance_id,label,dim,t0,...".into(),
        ));
    }
    let length = header.len() - 3;
    for (j, field) in header.iter().skip(3).enumerate() {
        if field != format!("t{j}") {
            return Err(Error::Format(format!(
                "header column {} is {field:?}, expected \"t{j}\"",
                j + 3
            )));
        }
    }

    let mut order: Vec<RawInstance> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for (line, record) in reader.records().enumerate() {
        let row_no = line + 2;
        let record = record.map_err(|e| Error::Format(format!("row {row_no}: {e}")))?;
        if record.len() != header.len() {
            return Err(Error::Format(format!(
                "row {row_no}: ragged row with {} fields, expected {}",
                record.len(),
                header.len()
            )));
        }
        let id = record[0].to_string();
        let label = record[1].to_string();
        let dim: usize = record[2]
            .parse()
            .map_err(|_| Error::Format(format!("row {row_no}: bad dim {:?}", &record[2])))?;
        let mut values = Vec::with_capacity(length);
        for field in record.iter().skip(3) {
            if field.is_empty() {
                return Err(Error::Data(format!("row {row_no}: missing value")));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {row_no}: bad number {field:?}")))?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "row {row_no}: non-finite value {field}"
                )));
            }
            values.push(v);
        }
        let slot = *by_id.entry(id.clone()).or_insert_with(|| {
            order.push(RawInstance {
                id: id.clone(),
                label: label.clone(),
                rows: BTreeMap::new(),
            });
            order.len() - 1
        });
        let raw = &mut order[slot];
        if raw.label != label {
            return Err(Error::Format(format!(
                "row {row_no}: instance {id} has labels {:?} and {label:?}",
                raw.label
            )));
        }
        if raw.rows.insert(dim, values).is_some() {
            return Err(Error::Format(format!(
                "row {row_no}: duplicate dim {dim} for instance {id}"
            )));
        }
    }
    if order.is_empty() {
        return Err(Error::Format("no data rows".into()));
    }

    let n_dims = order
        .iter()
        .map(|r| r.rows.keys().next_back().map_or(0, |d| d + 1))
        .max()
        .unwrap_or(0);
    for raw in &order {
        if raw.rows.len() != n_dims || raw.rows.keys().enumerate().any(|(i, &d)| i != d) {
            return Err(Error::Format(format!(
                "instance {} does not have dims 0..{}",
                raw.id, n_dims
            )));
        }
    }

    let label_names = sorted_labels(order.iter().map(|r| r.label.as_str()));
    let index: HashMap<&str, usize> = label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let instances = order
        .iter()
        .map(|raw| Instance {
            id: raw.id.clone(),
            label: index[raw.label.as_str()],
            values: raw.rows.values().flatten().copied().collect(),
        })
        .collect();
    TimeSeriesDataset::new(name, n_dims, length, label_names, instances)
}

fn sorted_labels<'a>(labels: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut uniq: Vec<String> = labels.map(str::to_string).collect();
    uniq.sort();
    uniq.dedup();
    let numeric: Option<Vec<f64>> = uniq.iter().map(|l| l.parse::<f64>().ok()).collect();
    if let Some(nums) = numeric {
        let mut pairs: Vec<(f64, String)> = nums.into_iter().zip(uniq).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        pairs.into_iter().map(|(_, l)| l).collect()
    } else {
        uniq
    }
}

/// Render a dataset in the Long CSV layout.
pub fn to_long_csv(ds: &TimeSeriesDataset) -> String {
    let mut out = String::from("instance_id,label,dim");
    for t in 0..ds.length {
        out.push_str(&format!(",t{t}"));
    }
    out.push('\n');
    for inst in &ds.instances {
        for (d, row) in inst.values.chunks(ds.length).enumerate() {
            out.push_str(&csv_field(&inst.id));
            out.push(',');
            out.push_str(&csv_field(&ds.label_names[inst.label]));
            out.push_str(&format!(",{d}"));
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) || s.trim() != s {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Write `<path>` as Long CSV plus the `<stem>.labels.json` sidecar next to it.
pub fn write_dataset(ds: &TimeSeriesDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_long_csv(ds).as_bytes())?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| ds.name.clone());
    let sidecar = path.with_file_name(format!("{stem}.labels.json"));
    let json = serde_json::to_string_pretty(&ds.label_map()).expect("label map serializes");
    write_atomic(&sidecar, format!("{json}\n").as_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImbalanceForm {
    Step,
    Linear,
}

impl FromStr for ImbalanceForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "step" => Ok(ImbalanceForm::Step),
            "linear" => Ok(ImbalanceForm::Linear),
            other => Err(Error::Spec(format!("unknown imbalance form {other:?}"))),
        }
    }
}

/// Recipe for deriving an imbalanced subset. `mu` is only read for the
/// step form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImbalanceSpec {
    pub form: ImbalanceForm,
    pub rho: f64,
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ImbalanceSpec {
    pub fn step(rho: f64, mu: f64, seed: u64) -> Self {
        Self {
            form: ImbalanceForm::Step,
            rho,
            mu,
            seed,
        }
    }

    pub fn linear(rho: f64, seed: u64) -> Self {
        Self {
            form: ImbalanceForm::Linear,
            rho,
            mu: 0.0,
            seed,
        }
    }

    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !self.rho.is_finite() || self.rho < 1.0 {
            return Err(Error::Spec(format!("rho must be >= 1, got {}", self.rho)));
        }
        if self.form == ImbalanceForm::Step {
            if !(self.mu > 0.0 && self.mu < 1.0) {
                return Err(Error::Spec(format!(
                    "mu must lie in (0, 1), got {}",
                    self.mu
                )));
            }
            if minority_class_count(self.mu, n_classes) == 0 {
                return Err(Error::Spec(format!(
                    "mu = {} selects no minority class among {n_classes}",
                    self.mu
                )));
            }
        }
        Ok(())
    }
}

fn minority_class_count(mu: f64, n_classes: usize) -> usize {
    (mu * n_classes as f64).round() as usize
}

/// Derive an imbalanced subset of an approximately balanced dataset.
///
/// Step: `round(mu * C)` seeded-random classes are cut to
/// `round(max_count / rho)` instances each; the rest are untouched.
/// Linear: classes in seeded-random order keep counts interpolated linearly
/// from `max_count / rho` up to `max_count`. No class grows beyond its own
/// size, and kept instances stay in dataset order.
pub fn apply_imbalance(ds: &TimeSeriesDataset, spec: &ImbalanceSpec) -> Result<TimeSeriesDataset> {
    let c = ds.n_classes;
    spec.validate(c)?;
    let counts = ds.class_counts();
    let max = *counts.iter().max().expect("dataset has classes");
    let min = *counts.iter().min().expect("dataset has classes");
    if max as f64 > 1.2 * min as f64 {
        return Err(Error::Precondition(format!(
            "input must be approximately balanced (max/min <= 1.2), got {max}/{min}"
        )));
    }

    let mut order: Vec<usize> = (0..c).collect();
    order.shuffle(&mut rng_from(derive_seed(spec.seed, &[0])));

    let mut targets = counts.clone();
    match spec.form {
        ImbalanceForm::Step => {
            let minority = round_count(max as f64 / spec.rho);
            if minority == 0 {
                return Err(Error::Spec(format!(
                    "rho = {} leaves minority classes empty (max count {max})",
                    spec.rho
                )));
            }
            for &cls in order.iter().take(minority_class_count(spec.mu, c)) {
                targets[cls] = counts[cls].min(minority);
            }
        }
        ImbalanceForm::Linear => {
            let lo = max as f64 / spec.rho;
            if round_count(lo) == 0 {
                return Err(Error::Spec(format!(
                    "rho = {} leaves the smallest class empty (max count {max})",
                    spec.rho
                )));
            }
            for (rank, &cls) in order.iter().enumerate() {
                let frac = if c > 1 {
                    rank as f64 / (c - 1) as f64
                } else {
                    1.0
                };
                let target = round_count(lo + (max as f64 - lo) * frac);
                targets[cls] = counts[cls].min(target);
            }
        }
    }

    let by_class = ds.indices_by_class();
    let mut keep = Vec::new();
    for (cls, idx) in by_class.iter().enumerate() {
        let mut rng = rng_from(derive_seed(spec.seed, &[1, cls as u64]));
        let mut chosen: Vec<usize> = idx
            .choose_multiple(&mut rng, targets[cls])
            .copied()
            .collect();
        chosen.sort_unstable();
        keep.extend(chosen);
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

fn round_count(x: f64) -> usize {
    x.round().max(0.0) as usize
}

/// Measured imbalance: `rho = max/min` class count, `mu` = fraction of
/// classes strictly below the maximum count.
pub fn measure_imbalance(ds: &TimeSeriesDataset) -> (f64, f64) {
    measure_counts(&ds.class_counts())
}

pub fn measure_counts(counts: &[usize]) -> (f64, f64) {
    let max = counts.iter().copied().max().unwrap_or(0);
    let min = counts.iter().copied().min().unwrap_or(0);
    if counts.is_empty() || min == 0 {
        return (f64::INFINITY, 0.0);
    }
    let below = counts.iter().filter(|&&n| n < max).count();
    (max as f64 / min as f64, below as f64 / counts.len() as f64)
}

/// Fold index per instance position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldAssignment {
    pub k: usize,
    pub fold_of: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.fold_of.len())
            .filter(|&i| self.fold_of[i] != fold)
            .collect()
    }

    pub fn fold_of_id<'a>(&self, ds: &'a TimeSeriesDataset) -> BTreeMap<&'a str, usize> {
        ds.instances
            .iter()
            .zip(&self.fold_of)
            .map(|(inst, &f)| (inst.id.as_str(), f))
            .collect()
    }
}

/// Stratified k-fold assignment. Each class is shuffled and dealt
/// round-robin, continuing the rotation from the previous class so overall
/// fold sizes also differ by at most one.
pub fn stratified_kfold(ds: &TimeSeriesDataset, k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    let by_class = ds.indices_by_class();
    if let Some((cls, idx)) = by_class.iter().enumerate().find(|(_, idx)| idx.len() < k) {
        return Err(Error::Stratification(format!(
            "class {} ({}) has {} instances, fewer than k = {k}; some validation fold would miss it",
            cls,
            ds.label_names[cls],
            idx.len()
        )));
    }
    let mut fold_of = vec![0; ds.len()];
    let mut next = 0;
    for (cls, idx) in by_class.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng_from(derive_seed(seed, &[cls as u64])));
        for (j, &i) in idx.iter().enumerate() {
            fold_of[i] = (next + j) % k;
        }
        next = (next + idx.len()) % k;
    }
    Ok(FoldAssignment { k, fold_of })
}

pub const TWO_PATTERN_LABELS: [&str; 4] = ["up-up", "up-down", "down-up", "down-down"];

/// Width of one up/down pattern in the synthetic generator.
pub fn two_pattern_width(length: usize) -> usize {
    (length / 4).max(4)
}

/// Maximum start-offset jitter of the pattern pair.
fn two_pattern_jitter(length: usize) -> usize {
    (length / 16).max(1)
}

/// Synthetic 4-class two-pattern set: each class is an
/// ordered pair of step patterns ("up" = low half then high half, "down"
/// the reverse) placed back to back at a jittered offset over a zero
/// baseline, plus Gaussian noise of standard deviation `noise_sd`.
/// Class index `2 * first_is_down + second_is_down`.
pub fn synth_two_patterns(
    n_per_class: usize,
    length: usize,
    noise_sd: f64,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if length < 16 {
        return Err(Error::Argument(format!(
            "length must be >= 16, got {length}"
        )));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Argument(format!(
            "noise_sd must be >= 0, got {noise_sd}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::Argument("n_per_class must be >= 1".into()));
    }
    let width = two_pattern_width(length);
    let half = width / 2;
    let jitter = two_pattern_jitter(length);
    let base = (length - 2 * width - jitter) / 2;
    let noise = Normal::new(0.0, noise_sd.max(f64::MIN_POSITIVE)).expect("valid normal");

    let mut rng = rng_from(seed);
    let mut instances = Vec::with_capacity(4 * n_per_class);
    for class in 0..4usize {
        let downs = [class / 2 == 1, class % 2 == 1];
        for j in 0..n_per_class {
            let start = base + rng.random_range(0..=jitter);
            let mut values = vec![0.0; length];
            for (p, &down) in downs.iter().enumerate() {
                let s = start + p * width;
                let (first, second) = if down { (1.0, -1.0) } else { (-1.0, 1.0) };
                values[s..s + half].fill(first);
                values[s + half..s + width].fill(second);
            }
            if noise_sd > 0.0 {
                for v in &mut values {
                    *v += noise.sample(&mut rng);
                }
            }
            instances.push(Instance {
                id: format!("tp{class}-{j:05}"),
                label: class,
                values,
            });
        }
    }
    TimeSeriesDataset::new(
        "two_patterns",
        1,
        length,
        TWO_PATTERN_LABELS.iter().map(|s| s.to_string()).collect(),
        instances,
    )
}
