//! End-to-end behavior of the trainable layer, the training modes, rollouts
//! with linked chunks, and the residual baseline's trends.

mod common;

use diffog_core::baselines::{residual_train, ResidualConfig};
use diffog_core::diffog::{
    output_smoothness, rollout_infer, train_dataset, train_refine, DiffogConfig, DiffogModel,
    TrainConfig,
};
use diffog_core::experiments::{eval_loss, executed_delta_series, run_single, ProcessorSpec};
use diffog_core::metrics::{derivative_series, summarize};
use diffog_core::spd::VariantKind;
use diffog_core::synth::{
    gen_demos, BasePolicyStub, DatasetMeta, DemoDataset, Episode, NormStats, PolicyMode,
    SynthTaskSpec, TaskKind,
};
use diffog_core::tensor::Matrix;

fn compact_config(horizon: usize) -> DiffogConfig {
    let mut cfg = DiffogConfig::new(horizon, 3, vec![0, 1]).with_compact_encoder(16);
    cfg.exec_horizon = 4.min(horizon);
    cfg.dropout = 0.0;
    cfg
}

fn tiny_dataset(values: Vec<f64>, dim: usize) -> DemoDataset {
    let steps = values.len() / dim;
    let actions: Vec<Vec<f64>> = values.chunks(dim).map(|c| c.to_vec()).collect();
    DemoDataset {
        episodes: vec![Episode {
            observations: vec![vec![0.0]; steps],
            actions,
        }],
        stats: NormStats {
            min: vec![-1.0; dim],
            max: vec![1.0; dim],
        },
        meta: DatasetMeta {
            action_dim: dim,
            selected: (0..dim).collect(),
            dt: 1.0,
            task: "tiny".into(),
            seed: 0,
        },
    }
}

#[test]
fn single_chunk_overfit_descends_monotonically() {
    // One window, batch 1, default optimizer settings.
    let data = tiny_dataset(vec![0.0, 0.6, 0.2, 0.7], 1);
    let mut cfg = DiffogConfig::new(4, 1, vec![0]).with_compact_encoder(8);
    cfg.dropout = 0.0;
    cfg.alpha = 1.0;
    cfg.bound = 0.5;
    cfg.train = TrainConfig {
        batch_size: 1,
        steps: 10,
        ..TrainConfig::default()
    };
    let mut model = DiffogModel::init(cfg, 0).unwrap();
    let out = train_dataset(&mut model, &data).unwrap();
    assert!(!out.diverged);
    let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
    for pair in losses.windows(2) {
        assert!(
            pair[1] <= pair[0] + 1e-12,
            "loss rose {} -> {} in {losses:?}",
            pair[0],
            pair[1]
        );
    }
    assert!(losses[9] < losses[0]);
}

#[test]
fn feasible_smooth_dataset_keeps_near_zero_loss() {
    // Deltas well inside the bound, alpha = 0: identity start, loss ~ 0.
    let data = tiny_dataset(vec![0.00, 0.02, 0.05, 0.06, 0.08, 0.10, 0.11, 0.13], 1);
    let mut cfg = DiffogConfig::new(8, 1, vec![0]).with_compact_encoder(8);
    cfg.dropout = 0.0;
    cfg.alpha = 0.0;
    cfg.bound = 0.1;
    cfg.train = TrainConfig {
        batch_size: 1,
        steps: 20,
        ..TrainConfig::default()
    };
    let mut model = DiffogModel::init(cfg, 0).unwrap();
    let out = train_dataset(&mut model, &data).unwrap();
    assert!(out.records[0].loss < 1e-5, "initial {}", out.records[0].loss);
    assert!(
        out.records.last().unwrap().loss < 1e-5,
        "final {}",
        out.records.last().unwrap().loss
    );
}

#[test]
fn jerky_dataset_training_beats_static_variant() {
    let spec = SynthTaskSpec {
        jerk_amp: 0.05,
        jerk_period: 3,
        ..SynthTaskSpec::new(TaskKind::Reach2d, 1)
    };
    let data = gen_demos(&spec, 3, 1).unwrap();
    let mut cfg = compact_config(6);
    cfg.train = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 16,
        steps: 300,
        grad_clip: 1.0,
        seed: 0,
    };
    let mut model = DiffogModel::init(cfg.clone(), 0).unwrap();
    let out = train_dataset(&mut model, &data).unwrap();
    assert!(!out.diverged);

    let windows: Vec<(usize, usize)> = data.windows(6).iter().step_by(9).copied().collect();
    let trained = eval_loss(&model, &data, None, &windows).unwrap();
    let mut static_cfg = cfg;
    static_cfg.variant = VariantKind::Static;
    let static_model = DiffogModel::init(static_cfg, 0).unwrap();
    let baseline = eval_loss(&static_model, &data, None, &windows).unwrap();
    assert!(
        trained < baseline,
        "trained {trained} not below static {baseline}"
    );
}

#[test]
fn dataset_training_loss_decreases_on_synthetic_suite() {
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 10);
    let data = gen_demos(&task, 6, 10).unwrap();
    let mut cfg = compact_config(8);
    cfg.train = TrainConfig {
        batch_size: 16,
        steps: 400,
        ..TrainConfig::default()
    };
    let mut model = DiffogModel::init(cfg, 0).unwrap();
    let out = train_dataset(&mut model, &data).unwrap();
    // Batch records are noisy draws; compare smoothed head vs tail.
    let losses: Vec<f64> = out.records.iter().map(|r| r.loss).collect();
    let head: f64 = losses[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(
        tail < head,
        "smoothed loss {head} -> {tail} did not decrease"
    );
}

#[test]
fn refine_on_exact_replay_reduces_to_dataset_training() {
    let spec = SynthTaskSpec::new(TaskKind::Reach2d, 4);
    let data = gen_demos(&spec, 2, 4).unwrap();
    let mut cfg = compact_config(6);
    cfg.train = TrainConfig {
        batch_size: 4,
        steps: 5,
        ..TrainConfig::default()
    };
    let replay = BasePolicyStub::new(PolicyMode::Replay, 0);
    let mut via_refine = DiffogModel::init(cfg.clone(), 0).unwrap();
    let refine_out = train_refine(&mut via_refine, &replay, &data).unwrap();
    let mut via_dataset = DiffogModel::init(cfg, 0).unwrap();
    let dataset_out = train_dataset(&mut via_dataset, &data).unwrap();
    for (a, b) in refine_out.records.iter().zip(&dataset_out.records) {
        assert!((a.loss - b.loss).abs() <= 1e-12);
    }
    for idx in 0..via_refine.store.len() {
        assert_eq!(
            via_refine.store.value(idx).data(),
            via_dataset.store.value(idx).data()
        );
    }
}

#[test]
fn refine_smooths_jerky_base_policy() {
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 5);
    let data = gen_demos(&task, 8, 5).unwrap();
    let policy = BasePolicyStub::new(
        PolicyMode::ReplayJerk {
            amp: 0.06,
            period: 3,
        },
        21,
    );
    let mut cfg = compact_config(8);
    cfg.train = TrainConfig {
        batch_size: 16,
        steps: 150,
        ..TrainConfig::default()
    };
    let mut model = DiffogModel::init(cfg, 0).unwrap();
    train_refine(&mut model, &policy, &data).unwrap();

    // Held-out episodes: refined rollouts must be smoother than the raw
    // base policy's.
    let inits: Vec<u64> = (100..110).collect();
    let mut base_std = 0.0;
    let mut refined_std = 0.0;
    for &init in &inits {
        let base = run_single(
            &task,
            &data,
            &policy,
            &ProcessorSpec::None,
            0.1,
            8,
            4,
            init,
        )
        .unwrap();
        let refined = run_single(
            &task,
            &data,
            &policy,
            &ProcessorSpec::Diffog {
                model: &model,
                schedule: None,
            },
            0.1,
            8,
            4,
            init,
        )
        .unwrap();
        base_std += summarize(&executed_delta_series(&base, &data).unwrap(), 1, None).avg_std;
        refined_std +=
            summarize(&executed_delta_series(&refined, &data).unwrap(), 1, None).avg_std;
    }
    assert!(
        refined_std < base_std,
        "refined std {refined_std} not below base {base_std}"
    );
}

#[test]
fn alpha_knob_monotonically_smooths_fixed_input() {
    // Remark-style trend on a fixed evaluation chunk with all else fixed.
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 3);
    let data = gen_demos(&task, 4, 3).unwrap();
    let cfg = compact_config(8);
    let model = DiffogModel::init(cfg, 7).unwrap();
    let chunk = data.normalized_chunk(0, 10, 8);
    let mut previous = f64::INFINITY;
    let mut strictly_decreased = false;
    for alpha in [0.0, 1.0, 4.0, 16.0] {
        let mut variant = model.clone();
        variant.config.alpha = alpha;
        let smoothness = output_smoothness(&variant, &chunk).unwrap();
        assert!(
            smoothness <= previous + 1e-9,
            "smoothness rose at alpha {alpha}: {smoothness} > {previous}"
        );
        if smoothness < previous - 1e-9 {
            strictly_decreased = true;
        }
        previous = smoothness;
    }
    assert!(strictly_decreased);
}

#[test]
fn chained_rollout_respects_linking_at_chunk_boundaries() {
    // exec = plan horizon: no overlap, boundaries only bound by the
    // linking row.
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 9);
    let data = gen_demos(&task, 4, 9).unwrap();
    let policy = BasePolicyStub::new(
        PolicyMode::ReplayJerk {
            amp: 0.08,
            period: 2,
        },
        3,
    );
    let mut cfg = compact_config(8);
    cfg.exec_horizon = 8;
    let model = DiffogModel::init(cfg, 0).unwrap();
    let result = rollout_infer(&model, &data.stats, &task, 11, &policy, Some(&data), None).unwrap();
    let deltas = executed_delta_series(&result, &data).unwrap();
    // Boundary scan: every executed delta, including the chunk boundaries
    // at multiples of the execution horizon, respects the bound.
    for i in 0..deltas.rows() {
        for j in 0..deltas.cols() {
            assert!(
                deltas.get(i, j).abs() <= model.config.bound + 1e-6,
                "delta at executed step {} dim {j} = {}",
                i + 1,
                deltas.get(i, j)
            );
        }
    }
}

#[test]
fn residual_alpha_grid_smooths_dataset_outputs() {
    // On a fixed jerky evaluation set, larger smoothness penalties give the
    // residual network smoother outputs than alpha ~ 0.
    let spec = SynthTaskSpec {
        jerk_amp: 0.05,
        jerk_period: 3,
        ..SynthTaskSpec::new(TaskKind::Reach2d, 6)
    };
    let data = gen_demos(&spec, 4, 6).unwrap();
    let sel = data.selection();
    let mut smoothness_at = Vec::new();
    for alpha in [0.01, 1.0, 4.0, 16.0] {
        let mut rcfg = ResidualConfig::compact(alpha, 32);
        rcfg.train = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            steps: 120,
            grad_clip: 1.0,
            seed: 0,
        };
        let (policy, records) = residual_train(&data, &sel, 8, rcfg, 0).unwrap();
        assert!(records.last().unwrap().loss.is_finite());
        let mut total = 0.0;
        for start in [0, 20, 40, 60] {
            let chunk = data.normalized_chunk(1, start, 8);
            let out = policy.apply(&chunk).unwrap();
            total +=
                diffog_core::trajectory::smoothness_cost(&out.values, &sel, 1.0).unwrap();
        }
        smoothness_at.push(total);
    }
    assert!(
        *smoothness_at.last().unwrap() < smoothness_at[0],
        "smoothness did not drop across the alpha grid: {smoothness_at:?}"
    );
}

#[test]
fn diagonality_trace_is_emitted_per_replan() {
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 2);
    let data = gen_demos(&task, 3, 2).unwrap();
    let policy = BasePolicyStub::new(PolicyMode::Replay, 0);
    let model = DiffogModel::init(compact_config(8), 1).unwrap();
    let trace =
        diffog_core::experiments::diagonality_trace(&model, &task, &data, &policy, 0).unwrap();
    assert!(!trace.is_empty());
    for (step, score) in &trace {
        assert!(*score > 0.0 && *score < 1.0, "step {step}: score {score}");
    }
    // Replans happen every exec_horizon steps.
    assert_eq!(trace[0].0, 0);
    if trace.len() > 1 {
        assert_eq!(trace[1].0, model.config.exec_horizon);
    }
}

#[test]
fn metrics_derivative_orders_on_rollout() {
    // Physical-unit derivative of a clean rollout: order 2 of a min-jerk
    // path stays small relative to the jerky policy's.
    let task = SynthTaskSpec::new(TaskKind::JerkyReplay, 14);
    let data = gen_demos(&task, 3, 14).unwrap();
    let clean = run_single(
        &task,
        &data,
        &BasePolicyStub::new(PolicyMode::Replay, 0),
        &ProcessorSpec::None,
        0.1,
        8,
        4,
        5,
    )
    .unwrap();
    let jerky = run_single(
        &task,
        &data,
        &BasePolicyStub::new(
            PolicyMode::ReplayJerk {
                amp: 0.06,
                period: 3,
            },
            9,
        ),
        &ProcessorSpec::None,
        0.1,
        8,
        4,
        5,
    )
    .unwrap();
    let extract = |m: &Matrix| Matrix::from_fn(m.rows(), 2, |i, j| m.get(i, j));
    let dt = task.dt();
    let clean_acc = derivative_series(&extract(&clean.executed), dt, 2).unwrap();
    let jerky_acc = derivative_series(&extract(&jerky.executed), dt, 2).unwrap();
    let clean_report = summarize(&clean_acc, 2, None);
    let jerky_report = summarize(&jerky_acc, 2, None);
    assert!(clean_report.avg_std < jerky_report.avg_std);
}
