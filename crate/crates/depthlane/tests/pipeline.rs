mod common;

use depthlane::config::Fusion;
use depthlane::dataset::read_dataset;
use depthlane::pipeline::{self, model_config, Phase, RunRecord, MODEL_CHECKPOINT, RUN_RECORD};
use depthlane::{checkpoint, DepthMode, Error, TrainConfig};
use depthlane_core::Model;

#[test]
fn method3_has_no_pretraining() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_setup(dir.path(), 1);
    let err = pipeline::pretrain_depth(&cfg).unwrap_err();
    assert!(matches!(err, Error::PretrainNotApplicable("method3")));
    assert_eq!(err.to_string(), "pretraining not applicable to method3");
}

#[test]
fn pretraining_lowers_the_depth_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        depth_mode: DepthMode::Method1,
        pretrain_steps: 200,
        ..common::small_setup(dir.path(), 4)
    };
    let (path, record) = pipeline::pretrain_depth(&cfg).unwrap();
    assert!(path.exists());
    let losses = record.losses(Phase::Pretrain);
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.8 * head, "depth loss {head} -> {tail}");
    // only the depth term is trained
    assert!(record.steps().iter().all(|s| s.total == s.depth));
}

#[test]
fn zero_weights_leave_parameters_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lambda_depth: 0.0,
        lambda_confidence: 0.0,
        lambda_instance: 0.0,
        lambda_x: 0.0,
        lambda_z: 0.0,
        steps: 10,
        ..common::small_setup(dir.path(), 2)
    };
    let data = read_dataset(&cfg.dataset).unwrap();
    let (trained, record) = pipeline::train_model(&cfg, &data, None, None).unwrap();
    let fresh = Model::new(model_config(&cfg, &data).unwrap()).unwrap();
    assert_eq!(trained.params(), fresh.params());
    assert!(record.steps().iter().all(|s| s.total == 0.0));
}

#[test]
fn logged_terms_recombine_to_the_total() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lambda_depth: 0.7,
        lambda_instance: 1.3,
        lambda_z: 2.0,
        batch_size: 2,
        steps: 6,
        ..common::small_setup(dir.path(), 3)
    };
    let data = read_dataset(&cfg.dataset).unwrap();
    let (_, record) = pipeline::train_model(&cfg, &data, None, None).unwrap();
    let w = cfg.loss_weights();
    for s in record.steps() {
        let sum = w.depth * s.depth
            + w.confidence * s.confidence
            + w.instance * s.instance
            + w.offset_x * s.offset_x
            + w.offset_z * s.offset_z;
        assert!((sum - s.total).abs() <= 1e-9, "step {}: {sum} vs {}", s.step, s.total);
    }
}

#[test]
fn methods_1_and_2_need_a_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = common::small_setup(dir.path(), 1);
    for mode in [DepthMode::Method1, DepthMode::Method2] {
        let cfg = TrainConfig {
            depth_mode: mode,
            ..base.clone()
        };
        let err = pipeline::train(&cfg).unwrap_err();
        assert!(matches!(err, Error::MissingCheckpoint(_)), "{err}");
        let cfg = TrainConfig {
            pretrain_checkpoint: Some(dir.path().join("absent.ckpt")),
            ..cfg
        };
        assert!(matches!(pipeline::train(&cfg), Err(Error::MissingCheckpoint(_))));
    }
}

#[test]
fn method1_keeps_the_pretrained_tensors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        depth_mode: DepthMode::Method1,
        steps: 8,
        ..common::small_setup(dir.path(), 3)
    };
    let (pre_path, _) = pipeline::pretrain_depth(&cfg).unwrap();
    let cfg = TrainConfig {
        pretrain_checkpoint: Some(pre_path.clone()),
        ..cfg
    };
    let record = pipeline::train(&cfg).unwrap();
    let pre = checkpoint::load_as_saved(&pre_path).unwrap();
    let trained = checkpoint::load_as_saved(&cfg.out_dir.join(MODEL_CHECKPOINT)).unwrap();
    // the FV branch is not pretrained; both runs start it from the same seed
    assert!(!record.frozen.is_empty());
    for name in &record.frozen {
        let p = pre.params().find(name).unwrap();
        let t = trained.params().find(name).unwrap();
        assert_eq!(pre.params().get(p), trained.params().get(t), "{name}");
    }
    // trainable tensors moved
    let moved = trained
        .params()
        .iter()
        .filter(|(_, t)| !record.frozen.contains(&t.name))
        .any(|(id, t)| pre.params().find(&t.name).map(|p| pre.params().get(p)) != Some(trained.params().get(id)));
    assert!(moved);
}

#[test]
fn training_writes_a_readable_run_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        val_dataset: Some(dir.path().join("train")),
        eval_every: 2,
        steps: 4,
        ..common::small_setup(dir.path(), 2)
    };
    let record = pipeline::train(&cfg).unwrap();
    assert!(cfg.out_dir.join(MODEL_CHECKPOINT).exists());
    let back = RunRecord::read(&cfg.out_dir.join(RUN_RECORD)).unwrap();
    assert_eq!(back.steps(), record.steps());
    assert_eq!(back.evals().iter().map(|e| e.step).collect::<Vec<_>>(), vec![2, 4]);
    assert_eq!(back.config(), &cfg);
}

#[test]
fn duplicate_variants_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_setup(dir.path(), 1);
    let names = vec!["full".to_string(), "no-dat".to_string(), "full".to_string()];
    assert!(matches!(pipeline::ablate(&cfg, &names), Err(Error::Config(_))));
}

#[test]
fn naive_fusion_has_more_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::small_setup(dir.path(), 1);
    let data = read_dataset(&cfg.dataset).unwrap();
    let count = |fusion| {
        let c = TrainConfig { fusion, ..cfg.clone() };
        Model::new(model_config(&c, &data).unwrap()).unwrap().param_count()
    };
    assert!(count(Fusion::Naive) > count(Fusion::Prime));
}

#[test]
fn config_must_agree_with_the_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        depth_bins: 12,
        ..common::small_setup(dir.path(), 1)
    };
    let data = read_dataset(&cfg.dataset).unwrap();
    assert!(matches!(model_config(&cfg, &data), Err(Error::Config(_))));
}
