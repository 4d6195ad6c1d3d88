mod common;

use common::gaussian_classes;
use imblab::data::TimeSeriesDataset;
use imblab::loss::{compute_t, LossSpec};
use imblab::metrics::EvalReport;
use imblab::net::{loss_and_grad, Classifier, LayerSpec};
use imblab::tensor::Tensor;
use imblab::train::{crossval, gather, train_run, CrossvalOptions, Method, RunConfig, SamplerKind};

fn dense(ds: &TimeSeriesDataset, seed: u64) -> Classifier {
    Classifier::new(
        (ds.n_dims(), ds.length()),
        ds.n_classes(),
        vec![
            LayerSpec::Dense {
                units: ds.n_classes(),
            },
            LayerSpec::Softmax,
        ],
        seed,
    )
    .unwrap()
}

fn dense_cfg(method: Method, epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::for_method(method);
    cfg.epochs = epochs;
    cfg.early_stop = None;
    cfg.architecture = Some(vec![LayerSpec::Dense { units: 2 }, LayerSpec::Softmax]);
    cfg
}

#[test]
fn separable_data_trains_down() {
    let train = gaussian_classes(&[60, 20], 1, 8, 1.5, 1);
    let val = gaussian_classes(&[20, 8], 1, 8, 1.5, 2);
    let mut cfg = dense_cfg(Method::Weighted, 50);
    cfg.batch_size = train.len();
    cfg.lr = 0.2;
    let res = train_run(&train, &val, dense(&train, 3), &cfg).unwrap();
    let drops = res
        .history
        .windows(2)
        .filter(|w| w[1].train_loss < w[0].train_loss)
        .count();
    assert!(
        drops as f64 >= 0.9 * (res.history.len() - 1) as f64,
        "loss fell in {drops} of {} epochs",
        res.history.len() - 1
    );
    assert!(res.final_eval.f_beta.macro_avg > 0.9);
}

#[test]
fn crossval_fold_sizes_and_determinism() {
    let ds = gaussian_classes(&[200, 200], 1, 8, 1.0, 4);
    let methods = vec![dense_cfg(Method::Weighted, 2)];
    let opts = CrossvalOptions {
        seed: 11,
        jobs: 1,
        val_folds: 5,
    };
    let a = crossval(&ds, 4, &methods, None, &opts).unwrap();
    assert_eq!(a[0].folds.len(), 4);
    for f in &a[0].folds {
        assert_eq!(f.test.confusion.total(), 100);
        assert_eq!(f.train_counts.iter().sum::<usize>(), 300);
    }
    let b = crossval(&ds, 4, &methods, None, &opts).unwrap();
    assert_eq!(a[0].summary.f3, b[0].summary.f3);
    assert_eq!(a[0].summary.auc, b[0].summary.auc);
}

#[test]
fn majority_only_predictor_has_zero_gmean() {
    let labels: Vec<usize> = (0..50).map(|i| usize::from(i >= 40)).collect();
    let rows: Vec<Vec<f64>> = labels.iter().map(|_| vec![0.9, 0.1]).collect();
    let probs = Tensor::from_rows(&rows).unwrap();
    let r = EvalReport::from_scores(&labels, &probs, 0.0).unwrap();
    assert_eq!(r.gmean, 0.0);
    assert_eq!(r.confusion.recalls()[1], Some(0.0));
}

#[test]
fn kappa_replays_from_history() {
    let train = gaussian_classes(&[40, 10], 1, 8, 0.8, 5);
    let val = gaussian_classes(&[12, 6], 1, 8, 0.8, 6);
    let mut cfg = dense_cfg(Method::Gmse, 8);
    cfg.batch_size = 10;
    cfg.lr = 0.05;
    let res = train_run(&train, &val, dense(&train, 7), &cfg).unwrap();
    let setup = res.gmse.unwrap();
    let mut kappa = setup.kappa0;
    for rec in &res.history {
        let t = compute_t(cfg.gmse.variant, setup.h, rec.val_gmean, rec.val_accuracy);
        kappa += cfg.gmse.lr_kappa * (t - kappa);
        assert_eq!(rec.target, Some(t));
        assert!((rec.kappa.unwrap() - kappa).abs() < 1e-12);
    }
}

#[test]
fn wall_time_grows_with_epochs() {
    let train = gaussian_classes(&[60, 20], 1, 32, 1.0, 8);
    let val = gaussian_classes(&[20, 8], 1, 32, 1.0, 9);
    let time = |epochs| {
        let cfg = dense_cfg(Method::Weighted, epochs);
        train_run(&train, &val, dense(&train, 1), &cfg)
            .unwrap()
            .wall_time
    };
    assert!(time(20) > time(2));
}

#[test]
fn one_step_moves_params_by_lr_times_grad() {
    let train = gaussian_classes(&[30, 10], 1, 8, 1.0, 10);
    let val = gaussian_classes(&[8, 4], 1, 8, 1.0, 11);
    let model = dense(&train, 12);
    let mut cfg = dense_cfg(Method::Unweighted, 1);
    cfg.batch_size = train.len();
    cfg.lr = 0.01;
    let all: Vec<usize> = (0..train.len()).collect();
    let (x, y) = gather(&train, &all);
    let g = loss_and_grad(&model, &LossSpec::UnweightedCe, &x, &y).unwrap();
    let grad_norm = g.grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    let before = model.params().to_vec();
    let res = train_run(&train, &val, model, &cfg).unwrap();
    let moved = before
        .iter()
        .zip(res.model.params())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    assert!(moved > 0.0);
    assert!(moved <= cfg.lr * grad_norm * (1.0 + 1e-9));
}

#[test]
fn bootstrap_never_repeats_majority_ids() {
    let train = gaussian_classes(&[50, 12], 1, 8, 1.0, 13);
    let val = gaussian_classes(&[10, 4], 1, 8, 1.0, 14);
    let mut cfg = dense_cfg(Method::Bootstrap, 3);
    cfg.sampler = SamplerKind::Bootstrap;
    cfg.record_plans = true;
    let res = train_run(&train, &val, dense(&train, 15), &cfg).unwrap();
    assert_eq!(res.plans.len(), 3);
    for plan in &res.plans {
        let mut majority: Vec<usize> = plan
            .batches
            .iter()
            .flatten()
            .copied()
            .filter(|&i| !res.roles.is_minority(train.instance(i).label))
            .collect();
        let n = majority.len();
        majority.sort_unstable();
        majority.dedup();
        assert_eq!(majority.len(), n);
        assert!(n > 0);
    }
}
