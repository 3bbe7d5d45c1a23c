use ccvc::config::{ExperimentConfig, Fraction};
use ccvc::datagen::{make_batch, prepare_data, steps_per_epoch, PreparedData};
use ccvc::model::TwoBranchModel;
use ccvc::tensor::Tensor;
use ccvc::trainer::{
    batch_objective, compute_gradients, load_checkpoint, read_metrics, train_loop, train_step,
    train_step_with, LoopOptions, StepOptions, TrainState,
};

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        image_size: 16,
        base_width: 4,
        feature_channels: 8,
        num_classes: 3,
        scenes: 30,
        val_fraction: Fraction::new(1, 5).unwrap(),
        labelled_fraction: Fraction::new(1, 4).unwrap(),
        batch_size: 4,
        epochs: 2,
        base_lr: 0.01,
        ..Default::default()
    }
}

fn data(cfg: &ExperimentConfig) -> PreparedData {
    prepare_data(cfg).unwrap()
}

fn params(m: &TwoBranchModel<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    m.visit_params(&mut |p| out.push(p.value.clone()));
    out
}

#[test]
fn zero_epochs_returns_the_initial_model() {
    let cfg = ExperimentConfig {
        epochs: 0,
        ..tiny()
    };
    let d = data(&cfg);
    let s = train_loop(&d.split, &d.val, &cfg, LoopOptions::default()).unwrap();
    assert_eq!(
        s.model,
        TwoBranchModel::init(&cfg.arch(), cfg.seed).unwrap()
    );
    assert!(s.history.is_empty());
}

#[test]
fn history_length_and_metrics_file() {
    let cfg = tiny();
    let d = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let s = train_loop(
        &d.split,
        &d.val,
        &cfg,
        LoopOptions {
            out_dir: Some(dir.path()),
            ..Default::default()
        },
    )
    .unwrap();
    let spe = steps_per_epoch(&d.split, cfg.batch_size);
    assert_eq!(s.history.len(), cfg.epochs * spe);
    assert_eq!(s.epoch_log.len(), cfg.epochs);
    assert_eq!(
        read_metrics(&dir.path().join("metrics.jsonl")).unwrap(),
        s.metrics()
    );
    assert_eq!(load_checkpoint(&dir.path().join("ckpt-2.bin")).unwrap(), s);
}

#[test]
fn identical_runs_write_identical_metrics() {
    let cfg = tiny();
    let d = data(&cfg);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let opts = LoopOptions {
            out_dir: Some(dir.path()),
            ..Default::default()
        };
        train_loop(&d.split, &d.val, &cfg, opts).unwrap();
        std::fs::read(dir.path().join("metrics.jsonl")).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let cfg = ExperimentConfig {
        epochs: 3,
        checkpoint_every: 1,
        ..tiny()
    };
    let d = data(&cfg);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train_loop(
        &d.split,
        &d.val,
        &cfg,
        LoopOptions {
            out_dir: Some(full_dir.path()),
            ..Default::default()
        },
    )
    .unwrap();

    let dir = tempfile::tempdir().unwrap();
    train_loop(
        &d.split,
        &d.val,
        &cfg,
        LoopOptions {
            out_dir: Some(dir.path()),
            stop_after: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    let mid = load_checkpoint(&dir.path().join("ckpt-1.bin")).unwrap();
    assert_eq!(mid.epoch, 1);
    let resumed = train_loop(
        &d.split,
        &d.val,
        &cfg,
        LoopOptions {
            out_dir: Some(dir.path()),
            resume: Some(mid),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed, full);
    assert_eq!(
        std::fs::read(dir.path().join("metrics.jsonl")).unwrap(),
        std::fs::read(full_dir.path().join("metrics.jsonl")).unwrap()
    );
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let cfg = ExperimentConfig {
        base_lr: 0.0,
        ..tiny()
    };
    let d = data(&cfg);
    let mut s = TrainState::new(&cfg, 10).unwrap();
    let before = params(&s.model);
    let b = make_batch(&d.split, cfg.batch_size, 0, &cfg).unwrap();
    train_step(&mut s, &b).unwrap();
    assert_eq!(params(&s.model), before);
    assert!(s.momentum.iter().flatten().any(|v| *v != 0.0));
}

#[test]
fn disabled_unlabelled_terms_ignore_the_unlabelled_half() {
    let cfg = ExperimentConfig {
        lambda2: 0.0,
        lambda3: 0.0,
        ..tiny()
    };
    let d = data(&cfg);
    let b = make_batch(&d.split, cfg.batch_size, 0, &cfg).unwrap();
    let mut noisy = b.clone();
    let shape = noisy.unlabelled_images.shape();
    noisy.unlabelled_images = Tensor::filled(shape, 0.123);

    let mut a = TrainState::new(&cfg, 10).unwrap();
    let mut c = TrainState::new(&cfg, 10).unwrap();
    let la = train_step(&mut a, &b).unwrap();
    let lc = train_step(&mut c, &noisy).unwrap();
    assert_eq!(params(&a.model), params(&c.model));
    assert_eq!(la.total, 5.0 * la.sup);
    assert_eq!((la.con, la.dis), (0.0, 0.0));
    assert_eq!(la, lc);
}

#[test]
fn discrepancy_switch_is_null() {
    let cfg = ExperimentConfig {
        use_dis: false,
        ..tiny()
    };
    let d = data(&cfg);
    let b = make_batch(&d.split, cfg.batch_size, 0, &cfg).unwrap();
    let mut m = TwoBranchModel::init(&cfg.arch(), 0).unwrap();
    let l = compute_gradients(&mut m, &b, &cfg, 0, StepOptions::default()).unwrap();
    assert_eq!((l.dis, l.dis_l, l.dis_u), (0.0, 0.0, 0.0));
    m.map_head
        .visit_params(&mut |p| assert!(p.grad.iter().all(|g| *g == 0.0)));
    let mut any = false;
    m.branches[1].visit_params(&mut |p| any |= p.grad.iter().any(|g| *g != 0.0));
    assert!(any);

    let on = tiny();
    let mut m = TwoBranchModel::init(&on.arch(), 0).unwrap();
    let l = compute_gradients(&mut m, &b, &on, 0, StepOptions::default()).unwrap();
    assert!(l.dis > 0.0 && l.dis <= 2.0);
    let mut any = false;
    m.map_head
        .visit_params(&mut |p| any |= p.grad.iter().any(|g| *g != 0.0));
    assert!(any);
}

#[test]
fn small_step_does_not_increase_objective() {
    let mut violations = 0;
    for seed in 0..10 {
        let cfg = ExperimentConfig {
            seed,
            base_lr: 1e-6,
            weight_decay: 0.0,
            ..tiny()
        };
        let d = data(&cfg);
        let b = make_batch(&d.split, cfg.batch_size, 0, &cfg).unwrap();
        let opts = StepOptions { map_dropout: false };
        let mut s = TrainState::new(&cfg, 1000).unwrap();
        let before = batch_objective(&s.model, &b, &cfg, 0, opts).unwrap().total;
        train_step_with(&mut s, &b, opts).unwrap();
        let after = batch_objective(&s.model, &b, &cfg, 0, opts).unwrap().total;
        if after > before {
            violations += 1;
        }
    }
    assert_eq!(violations, 0);
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let cfg = tiny();
    let d = data(&cfg);
    let b = make_batch(&d.split, cfg.batch_size, 0, &cfg).unwrap();
    let mut s = TrainState::new(&cfg, 10).unwrap();
    s.model
        .visit_params_mut(&mut |p| p.value.iter_mut().for_each(|v| *v = f32::NAN));
    let err = train_step(&mut s, &b).unwrap_err().to_string();
    assert!(
        err.contains("non-finite") && err.contains("step 0"),
        "{err}"
    );
}
