mod common;

use common::*;
use grail_core::eval::{
    calib_ablation, evaluate, gram_bytes, instantiate, run_sweep, AblationConfig, Metric, ModelFamily, ModelSpec,
    SweepConfig, SyntheticTask, SWEEP_HEADER,
};
use grail_core::model::{Activation, Block, BlockGraph, DenseBlock};
use grail_core::pipeline::Method;
use grail_core::Tensor;

fn small_task(seed: u64) -> SyntheticTask {
    SyntheticTask {
        n_train: 128,
        n_eval: 128,
        ..SyntheticTask::regression(8, seed)
    }
}

fn small_model() -> ModelSpec {
    ModelSpec {
        hidden: 16,
        ..ModelSpec::default()
    }
}

#[test]
fn ratio_zero_changes_nothing() {
    let mut cfg = SweepConfig::new(small_task(1), small_model());
    cfg.ratios = vec![0.0];
    cfg.seeds = vec![0, 1];
    let report = run_sweep(&cfg).unwrap();
    for r in &report.rows {
        assert_eq!(r.metric_compressed, r.metric_original, "{r:?}");
    }
}

#[test]
fn whitened_hidden_layer_gains_little_from_compensation() {
    let h = 32;
    let teacher = BlockGraph::new(
        vec![Block::Dense(DenseBlock {
            w_producer: Tensor::eye(h),
            b_producer: Tensor::zeros(&[h]),
            activation: Activation::Identity,
            w_consumer: rand_mat(h, h, 3).scale(1.0 / (h as f64).sqrt()),
            b_consumer: Tensor::zeros(&[h]),
        })],
        vec![h],
    )
    .unwrap();
    let task = SyntheticTask {
        n_train: 4096,
        teacher: Some(teacher),
        ..SyntheticTask::regression(h, 4)
    };
    let mut cfg = SweepConfig::new(task, ModelSpec::default());
    cfg.methods = vec![Method::MagL2];
    cfg.ratios = vec![0.5];
    cfg.seeds = vec![0];
    cfg.calib_sizes = vec![4096];
    let r = &run_sweep(&cfg).unwrap().rows[0];
    assert!((r.metric_compensated - r.metric_compressed).abs() <= 0.005, "{r:?}");
}

/// 16 unit-norm relu units, each followed by a copy at half scale. Magnitude
/// selection keeps exactly the originals.
fn duplicate_teacher(d: usize, seed: u64) -> BlockGraph {
    let base = rand_mat(16, d, seed);
    let bias = rand_tensor(&[16], seed + 1).scale(0.1);
    let w_producer = Tensor::from_fn2(32, d, |r, c| {
        let norm = base.row(r / 2).iter().map(|v| v * v).sum::<f64>().sqrt();
        base.at(r / 2, c) / norm * if r % 2 == 0 { 1.0 } else { 0.5 }
    });
    let b_producer = Tensor::vector((0..32).map(|r| bias.data()[r / 2] * if r % 2 == 0 { 1.0 } else { 0.5 }).collect());
    BlockGraph::new(
        vec![Block::Dense(DenseBlock {
            w_producer,
            b_producer,
            activation: Activation::Relu,
            w_consumer: rand_mat(d, 32, seed + 2).scale((2.0 / 32.0f64).sqrt()),
            b_consumer: Tensor::zeros(&[d]),
        })],
        vec![d],
    )
    .unwrap()
}

#[test]
fn duplicated_channels_are_recovered() {
    for seed in 0..3 {
        let task = SyntheticTask {
            teacher: Some(duplicate_teacher(16, seed)),
            ..SyntheticTask::regression(16, seed)
        };
        let mut cfg = SweepConfig::new(task, ModelSpec::default());
        cfg.methods = vec![Method::MagL2];
        cfg.ratios = vec![0.5];
        cfg.seeds = vec![0];
        let r = &run_sweep(&cfg).unwrap().rows[0];
        assert!(r.metric_compensated - r.metric_original <= 0.01, "{r:?}");
        assert!(r.metric_compressed - r.metric_original >= 0.05, "{r:?}");
    }
}

#[test]
fn sweep_csv_is_reproducible() {
    let mut cfg = SweepConfig::new(small_task(6), small_model());
    cfg.ratios = vec![0.25, 0.5];
    cfg.seeds = vec![0, 1];
    cfg.calib_sizes = vec![32, 64];
    let a = run_sweep(&cfg).unwrap().to_csv(false);
    let b = run_sweep(&cfg).unwrap().to_csv(false);
    assert_eq!(a, b);
    let lines: Vec<&str> = a.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len() - 1, 4 * 2 * 2 * 2);
    assert_eq!(lines.len() - 1, cfg.n_cells());
}

#[test]
fn single_sample_ablation_runs() {
    let spec = ModelSpec {
        hidden: 32,
        ..ModelSpec::default()
    };
    let mut cfg = AblationConfig::new(small_task(7), spec);
    cfg.sizes = vec![1, 2];
    cfg.seeds = vec![0, 1];
    let report = calib_ablation(&cfg).unwrap();
    assert!(report.points.iter().all(|p| p.mean_improvement.is_finite()));
}

#[test]
fn more_calibration_rarely_hurts() {
    let mut cfg = AblationConfig::new(SyntheticTask::regression(16, 8), ModelSpec::default());
    cfg.sizes = vec![16, 32, 64, 128, 256];
    let report = calib_ablation(&cfg).unwrap();
    let n = cfg.seeds.len();
    let monotone = (0..n)
        .filter(|&s| report.points.windows(2).all(|w| w[1].improvements[s] >= w[0].improvements[s] - 0.005))
        .count();
    assert!(monotone * 5 >= n * 4, "{monotone}/{n} seeds non-decreasing");
}

#[test]
fn classification_instances_start_accurate() {
    let task = SyntheticTask::classification(12, 4, 9);
    let inst = instantiate(&task, &ModelSpec::family(ModelFamily::Mlp), 0).unwrap();
    assert_eq!(inst.metric, Metric::Accuracy);
    assert!(evaluate(&inst.model, &inst.eval).unwrap() >= 0.8);
}

#[test]
fn instances_are_deterministic_per_seed() {
    let task = small_task(10);
    let a = instantiate(&task, &small_model(), 3).unwrap();
    let b = instantiate(&task, &small_model(), 3).unwrap();
    let c = instantiate(&task, &small_model(), 4).unwrap();
    assert_eq!(a.train, b.train);
    assert_eq!(a.eval.inputs, b.eval.inputs);
    assert_ne!(a.train, c.train);
}

#[test]
fn gram_memory() {
    assert_eq!(gram_bytes(64), 32768);
}

fn low_ratio_sweep(family: ModelFamily, methods: Vec<Method>) -> grail_core::eval::SweepReport {
    let task = SyntheticTask {
        n_train: 256,
        n_eval: 128,
        ..SyntheticTask::regression(12, 11)
    };
    let mut cfg = SweepConfig::new(task, ModelSpec::family(family));
    cfg.methods = methods;
    cfg.ratios = vec![0.2, 0.4, 0.6];
    cfg.seeds = vec![0, 1, 2];
    cfg.calib_sizes = vec![256];
    run_sweep(&cfg).unwrap()
}

#[test]
fn compensation_helps_in_most_low_ratio_cells() {
    let cases = [
        (ModelFamily::Mlp, Method::ALL.to_vec()),
        (ModelFamily::Ffn, vec![Method::MagL1, Method::MagL2, Method::Wanda]),
    ];
    for (family, methods) in cases {
        let report = low_ratio_sweep(family, methods);
        let better = report
            .rows
            .iter()
            .filter(|r| report.metric.improvement(r.metric_compressed, r.metric_compensated) >= 0.0)
            .count();
        assert!(better * 10 >= report.rows.len() * 9, "{family:?}: {better}/{}", report.rows.len());
    }
}

/// GELU copies are exact duplicates up to noise, so while the ratio stays
/// below the redundancy plain folding is close to lossless and the ridge
/// shrinkage can cost a little. Past it, compensation wins clearly.
#[test]
fn ffn_fold_of_near_duplicates() {
    let report = low_ratio_sweep(ModelFamily::Ffn, vec![Method::Fold]);
    for r in &report.rows {
        if r.ratio < 0.5 {
            assert!(r.metric_compressed <= 0.02 && r.metric_compensated <= 0.02, "{r:?}");
        } else {
            assert!(r.metric_compensated < r.metric_compressed, "{r:?}");
        }
    }
}
