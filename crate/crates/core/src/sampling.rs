//! Mini-batch planners and data-level resampling.

use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Instance, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::separability::DistanceMetric;

/// Batches of instance positions for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub epoch_seed: u64,
}

/// Majority/minority split of the class space. Classes with a count at or
/// above the median are majority; if that leaves no minority while counts
/// differ, every class below the maximum count is minority instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClassRoles {
    pub majority: Vec<usize>,
    pub minority: Vec<usize>,
}

impl ClassRoles {
    pub fn from_counts(counts: &[usize]) -> Self {
        let mut sorted = counts.to_vec();
        sorted.sort_unstable();
        let n = sorted.len();
        let median = if n == 0 {
            0.0
        } else if n % 2 == 1 {
            sorted[n / 2] as f64
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
        };
        let (mut majority, mut minority): (Vec<usize>, Vec<usize>) =
            (0..n).partition(|&c| counts[c] as f64 >= median);
        if minority.is_empty() {
            let max = sorted.last().copied().unwrap_or(0);
            (majority, minority) = (0..n).partition(|&c| counts[c] == max);
        }
        Self { majority, minority }
    }

    pub fn of(ds: &TimeSeriesDataset) -> Self {
        Self::from_counts(&ds.class_counts())
    }

    pub fn is_minority(&self, class: usize) -> bool {
        self.minority.contains(&class)
    }
}

/// Seeded shuffle cut into contiguous batches; the last may be short.
pub fn plan_plain(ds: &TimeSeriesDataset, batch_size: usize, epoch_seed: u64) -> Result<BatchPlan> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut rng_from(epoch_seed));
    Ok(BatchPlan {
        batches: order.chunks(batch_size).map(<[usize]>::to_vec).collect(),
        epoch_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    /// Majority samples per batch.
    pub s_n: usize,
    /// Minority samples per batch.
    pub s_p: usize,
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.s_n == 0 || self.s_p == 0 {
            return Err(Error::Argument("s_n and s_p must be >= 1".into()));
        }
        let tol = (0.2 * self.s_n as f64).max(1.0);
        if (self.s_p as f64 - self.s_n as f64).abs() > tol {
            return Err(Error::Argument(format!(
                "s_p = {} must be within {tol} of s_n = {}",
                self.s_p, self.s_n
            )));
        }
        Ok(())
    }
}

/// Balanced batches: each epoch partitions the shuffled majority pool into
/// `floor(n / s_n)` groups of distinct ids (the remainder sits out), and
/// tops each group up with `s_p` minority ids drawn uniformly with
/// replacement. The minority quota is split evenly across minority classes,
/// remainder slots going to seeded-random classes per batch.
pub fn plan_bootstrap(
    ds: &TimeSeriesDataset,
    cfg: &BootstrapConfig,
    roles: &ClassRoles,
    epoch_seed: u64,
) -> Result<BatchPlan> {
    cfg.validate()?;
    let by_class = ds.indices_by_class();
    let minority: Vec<&Vec<usize>> = roles
        .minority
        .iter()
        .map(|&c| &by_class[c])
        .filter(|idx| !idx.is_empty())
        .collect();
    if minority.is_empty() {
        return Err(Error::Sampler("minority pool is empty".into()));
    }
    let mut majority: Vec<usize> = roles
        .majority
        .iter()
        .flat_map(|&c| by_class[c].iter().copied())
        .collect();
    majority.sort_unstable();
    if majority.len() < cfg.s_n {
        return Err(Error::Sampler(format!(
            "majority pool of {} is smaller than s_n = {}",
            majority.len(),
            cfg.s_n
        )));
    }

    let mut rng = rng_from(epoch_seed);
    majority.shuffle(&mut rng);
    let n_batches = majority.len() / cfg.s_n;
    let base = cfg.s_p / minority.len();
    let extra = cfg.s_p % minority.len();
    let mut class_order: Vec<usize> = (0..minority.len()).collect();
    let mut batches = Vec::with_capacity(n_batches);
    for chunk in majority.chunks_exact(cfg.s_n) {
        let mut batch = chunk.to_vec();
        class_order.shuffle(&mut rng);
        let mut quota = vec![base; minority.len()];
        for &k in &class_order[..extra] {
            quota[k] += 1;
        }
        for (pool, &q) in minority.iter().zip(&quota) {
            for _ in 0..q {
                batch.push(*pool.choose(&mut rng).expect("non-empty pool"));
            }
        }
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        epoch_seed,
    })
}

/// Downsample every class (seeded, without replacement) to the smallest
/// class count.
pub fn undersample(ds: &TimeSeriesDataset, seed: u64) -> Result<TimeSeriesDataset> {
    if ds.n_classes() < 2 {
        return Err(Error::Precondition(
            "undersampling needs at least two classes".into(),
        ));
    }
    let by_class = ds.indices_by_class();
    let target = by_class.iter().map(Vec::len).min().unwrap_or(0);
    let mut keep = Vec::new();
    for (c, idx) in by_class.iter().enumerate() {
        let mut rng = rng_from(derive_seed(seed, &[c as u64]));
        keep.extend(idx.choose_multiple(&mut rng, target).copied());
    }
    keep.sort_unstable();
    ds.subset(&keep)
}

/// Indices (into `members`) of the `k` nearest other members of
/// `members[i]`, ties broken by position.
fn nearest_neighbors(ds: &TimeSeriesDataset, members: &[usize], i: usize, k: usize) -> Vec<usize> {
    let x = &ds.instance(members[i]).values;
    let mut dists: Vec<(f64, usize)> = members
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, &m)| {
            (
                DistanceMetric::Euclidean.distance(x, &ds.instance(m).values),
                j,
            )
        })
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    dists.into_iter().take(k).map(|(_, j)| j).collect()
}

/// Oversample every class below `target_count` with synthetic points
/// `x + u (x_nn − x)`, `u ~ U(0, 1)`, where `x_nn` is a seeded-random pick
/// among the `k` nearest same-class neighbours of a seeded-random `x`.
/// Synthetics are appended after the original instances.
pub fn smote(
    ds: &TimeSeriesDataset,
    target_count: usize,
    k_neighbors: usize,
    seed: u64,
) -> Result<TimeSeriesDataset> {
    if k_neighbors == 0 {
        return Err(Error::Argument("k_neighbors must be >= 1".into()));
    }
    let by_class = ds.indices_by_class();
    let mut instances = ds.instances().to_vec();
    for (c, members) in by_class.iter().enumerate() {
        if members.len() >= target_count {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Smote(format!(
                "class {} ({}) has {} instance(s); interpolation needs two",
                c,
                ds.label_names()[c],
                members.len()
            )));
        }
        let k = k_neighbors.min(members.len() - 1);
        let neighbors: Vec<Vec<usize>> = (0..members.len())
            .map(|i| nearest_neighbors(ds, members, i, k))
            .collect();
        let mut rng = rng_from(derive_seed(seed, &[c as u64]));
        for j in 0..target_count - members.len() {
            let i = rng.random_range(0..members.len());
            let nn = *neighbors[i].choose(&mut rng).expect("k >= 1");
            let u: f64 = rng.random();
            let x = &ds.instance(members[i]).values;
            let y = &ds.instance(members[nn]).values;
            instances.push(Instance {
                id: format!("smote-{c}-{j}"),
                label: c,
                values: x.iter().zip(y).map(|(a, b)| a + u * (b - a)).collect(),
            });
        }
    }
    TimeSeriesDataset::new(
        ds.name(),
        ds.n_dims(),
        ds.length(),
        ds.label_names().to_vec(),
        instances,
    )
}

/// Data-level rebalancing applied to a training split before training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resample {
    #[default]
    None,
    Undersample,
    Smote,
}

impl FromStr for Resample {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Resample::None),
            "undersample" => Ok(Resample::Undersample),
            "smote" => Ok(Resample::Smote),
            other => Err(Error::Config(format!("unknown resample {other:?}"))),
        }
    }
}

pub const SMOTE_DEFAULT_K: usize = 5;

impl Resample {
    pub fn apply(self, ds: &TimeSeriesDataset, seed: u64) -> Result<TimeSeriesDataset> {
        match self {
            Resample::None => Ok(ds.clone()),
            Resample::Undersample => undersample(ds, seed),
            Resample::Smote => {
                let target = ds.class_counts().into_iter().max().unwrap_or(0);
                smote(ds, target, SMOTE_DEFAULT_K, seed)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(counts: &[usize]) -> TimeSeriesDataset {
        let mut instances = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for j in 0..n {
                instances.push(Instance {
                    id: format!("c{c}-{j}"),
                    label: c,
                    values: vec![c as f64 * 10.0 + j as f64, (j % 3) as f64],
                });
            }
        }
        TimeSeriesDataset::new(
            "t",
            1,
            2,
            (0..counts.len()).map(|c| format!("k{c}")).collect(),
            instances,
        )
        .unwrap()
    }

    #[test]
    fn plain_batches() {
        let ds = dataset(&[5, 5]);
        let plan = plan_plain(&ds, 4, 1).unwrap();
        let sizes: Vec<usize> = plan.batches.iter().map(Vec::len).collect();
        assert_eq!(sizes, [4, 4, 2]);
        assert_eq!(plan_plain(&ds, 50, 1).unwrap().batches.len(), 1);
        assert_eq!(plan, plan_plain(&ds, 4, 1).unwrap());
        let mut all: Vec<usize> = plan.batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(plan_plain(&ds, 0, 1).is_err());
    }

    #[test]
    fn roles_by_median() {
        assert_eq!(
            ClassRoles::from_counts(&[187, 47, 187, 47]),
            ClassRoles {
                majority: vec![0, 2],
                minority: vec![1, 3]
            }
        );
        assert_eq!(ClassRoles::from_counts(&[90, 10]).minority, vec![1]);
        assert_eq!(ClassRoles::from_counts(&[100, 10, 10]).minority, vec![1, 2]);
        assert!(ClassRoles::from_counts(&[5, 5]).minority.is_empty());
    }

    #[test]
    fn bootstrap_partitions_majority() {
        let ds = dataset(&[90, 7]);
        let roles = ClassRoles::of(&ds);
        let cfg = BootstrapConfig { s_n: 10, s_p: 10 };
        let plan = plan_bootstrap(&ds, &cfg, &roles, 3).unwrap();
        assert_eq!(plan.batches.len(), 9);
        let mut majority: Vec<usize> = plan
            .batches
            .iter()
            .flat_map(|b| b.iter().copied().filter(|&i| ds.instance(i).label == 0))
            .collect();
        majority.sort_unstable();
        assert_eq!(majority, (0..90).collect::<Vec<_>>());
        assert!(plan.batches.iter().all(|b| b.len() == 20));
    }

    #[test]
    fn bootstrap_drops_remainder_and_repeats_single_minority() {
        let ds = dataset(&[95, 1]);
        let roles = ClassRoles::of(&ds);
        let plan = plan_bootstrap(&ds, &BootstrapConfig { s_n: 10, s_p: 8 }, &roles, 0).unwrap();
        assert_eq!(plan.batches.len(), 9);
        let used: std::collections::HashSet<usize> = plan
            .batches
            .iter()
            .flatten()
            .copied()
            .filter(|&i| i < 95)
            .collect();
        assert_eq!(95 - used.len(), 5);
        for b in &plan.batches {
            assert_eq!(b.iter().filter(|&&i| i == 95).count(), 8);
        }
    }

    #[test]
    fn bootstrap_errors_and_config() {
        let ds = dataset(&[20, 20]);
        let cfg = BootstrapConfig { s_n: 5, s_p: 5 };
        assert!(matches!(
            plan_bootstrap(&ds, &cfg, &ClassRoles::of(&ds), 0),
            Err(Error::Sampler(_))
        ));
        assert!(BootstrapConfig { s_n: 10, s_p: 13 }.validate().is_err());
        assert!(BootstrapConfig { s_n: 10, s_p: 12 }.validate().is_ok());
        assert!(BootstrapConfig { s_n: 2, s_p: 3 }.validate().is_ok());
        assert!(BootstrapConfig { s_n: 0, s_p: 1 }.validate().is_err());
    }

    #[test]
    fn multi_minority_quota_split() {
        let ds = dataset(&[60, 60, 50, 6, 4, 5]);
        let roles = ClassRoles::of(&ds);
        assert_eq!(roles.minority, vec![3, 4, 5]);
        let plan = plan_bootstrap(&ds, &BootstrapConfig { s_n: 10, s_p: 10 }, &roles, 9).unwrap();
        for b in &plan.batches {
            let mut per = [0usize; 6];
            for &i in b {
                per[ds.instance(i).label] += 1;
            }
            let minor = [per[3], per[4], per[5]];
            assert_eq!(minor.iter().sum::<usize>(), 10);
            assert!(minor.iter().all(|&q| q == 3 || q == 4));
        }
    }

    #[test]
    fn undersample_balances() {
        let ds = dataset(&[100, 25]);
        let out = undersample(&ds, 4).unwrap();
        assert_eq!(out.class_counts(), vec![25, 25]);
        let ids: std::collections::HashSet<_> =
            ds.instances().iter().map(|i| i.id.clone()).collect();
        assert!(out.instances().iter().all(|i| ids.contains(&i.id)));
        let bal = dataset(&[7, 7]);
        assert_eq!(undersample(&bal, 1).unwrap().class_counts(), vec![7, 7]);
    }

    #[test]
    fn smote_identical_pair_and_errors() {
        let instances = vec![
            Instance {
                id: "a".into(),
                label: 0,
                values: vec![1.0, 2.0],
            },
            Instance {
                id: "b".into(),
                label: 0,
                values: vec![1.0, 2.0],
            },
            Instance {
                id: "c".into(),
                label: 1,
                values: vec![5.0, 5.0],
            },
            Instance {
                id: "d".into(),
                label: 1,
                values: vec![6.0, 5.0],
            },
            Instance {
                id: "e".into(),
                label: 1,
                values: vec![7.0, 5.0],
            },
            Instance {
                id: "f".into(),
                label: 1,
                values: vec![8.0, 5.0],
            },
        ];
        let ds =
            TimeSeriesDataset::new("s", 1, 2, vec!["x".into(), "y".into()], instances).unwrap();
        let out = smote(&ds, 4, 3, 2).unwrap();
        assert_eq!(out.class_counts(), vec![4, 4]);
        for inst in &out.instances()[6..] {
            assert_eq!(inst.values, vec![1.0, 2.0]);
        }
        assert!(smote(&ds, 4, 0, 2).is_err());
        let single = dataset(&[5, 1]);
        assert!(matches!(smote(&single, 5, 2, 0), Err(Error::Smote(_))));
    }
}
