mod common;

use candle_core::DType;

use common::{batch, state, tiny_config, tiny_corpus};
use tgdp::config::{Config, MaskStrategy};
use tgdp::losses::{LossReport, PassTag};
use tgdp::training::{
    checkpoint_path, compute_terms, run_pretraining, train_step, train_step_with, Objective, RunOptions,
    TrainState, LOSSES_FILE,
};

fn params(s: &TrainState) -> (Vec<f32>, Vec<f32>) {
    (
        s.student.params.flat_values().unwrap(),
        s.teacher.params.flat_values().unwrap(),
    )
}

#[test]
fn zero_auxiliary_weights_equal_a_reconstruction_only_step() {
    let mut cfg = tiny_config();
    cfg.train.lambda_dis = 0.0;
    cfg.train.lambda_contra = 0.0;
    let corpus = tiny_corpus(&cfg, 2);
    let mut full = state(&cfg, DType::F32);
    let mut rec = state(&cfg, DType::F32);
    for step in 1..=3 {
        let b = batch(&cfg, &corpus, step, DType::F32);
        train_step_with(&mut full, &b, Objective::Full).unwrap();
        train_step_with(&mut rec, &b, Objective::ReconstructionOnly).unwrap();
        assert_eq!(params(&full), params(&rec), "diverged at step {step}");
    }
}

#[test]
fn identical_snapshots_give_identical_reports() {
    let cfg = tiny_config();
    let corpus = tiny_corpus(&cfg, 2);
    let b = batch(&cfg, &corpus, 1, DType::F32);
    let mut a = state(&cfg, DType::F32);
    let mut c = state(&cfg, DType::F32);
    assert_eq!(train_step(&mut a, &b).unwrap(), train_step(&mut c, &b).unwrap());
    assert_eq!(params(&a), params(&c));
}

fn run(cfg: &Config, out: &std::path::Path, opts: &RunOptions) -> Vec<LossReport> {
    let corpus = tiny_corpus(cfg, 4);
    let mut seen = Vec::new();
    run_pretraining(cfg, &corpus, out, opts, &mut |r| seen.push(r.clone())).unwrap();
    seen
}

#[test]
fn ten_steps_write_ten_increasing_rows() {
    let mut cfg = tiny_config();
    cfg.train.steps = 10;
    let dir = tempfile::tempdir().unwrap();
    let reports = run(&cfg, dir.path(), &RunOptions::default());
    let csv = std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap();
    let steps: Vec<u64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=10).collect::<Vec<_>>());
    assert!(reports.iter().all(|r| r.total.is_finite()));
    assert!(dir.path().join("ckpt_final").exists());
}

#[test]
fn same_seed_same_log_and_resume_matches_uninterrupted() {
    let cfg = tiny_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run(&cfg, a.path(), &RunOptions::default());
    run(&cfg, b.path(), &RunOptions::default());
    let log = |d: &std::path::Path| std::fs::read(d.join(LOSSES_FILE)).unwrap();
    assert_eq!(log(a.path()), log(b.path()));

    let first = RunOptions {
        until: Some(10),
        ..RunOptions::default()
    };
    run(&cfg, c.path(), &first);
    let resumed = RunOptions {
        resume: Some(checkpoint_path(c.path(), 10)),
        ..RunOptions::default()
    };
    run(&cfg, c.path(), &resumed);
    assert_eq!(log(a.path()), log(c.path()));
    let fa = TrainState::from_checkpoint(&a.path().join("ckpt_final"), DType::F32).unwrap();
    let fc = TrainState::from_checkpoint(&c.path().join("ckpt_final"), DType::F32).unwrap();
    assert_eq!(params(&fa), params(&fc));
    assert_eq!(fa.adam.t, fc.adam.t);
}

#[test]
fn existing_run_is_not_clobbered() {
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    cfg.train.warmup_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    run(&cfg, dir.path(), &RunOptions::default());
    let corpus = tiny_corpus(&cfg, 4);
    assert!(run_pretraining(&cfg, &corpus, dir.path(), &RunOptions::default(), &mut |_| {}).is_err());
    let force = RunOptions {
        force: true,
        ..RunOptions::default()
    };
    assert!(run_pretraining(&cfg, &corpus, dir.path(), &force, &mut |_| {}).is_ok());
}

/// Terms of step 1 under `cfg`, as plain numbers.
fn terms(cfg: &Config) -> (f64, f64, f64, Option<f64>, (MaskStrategy, f64)) {
    let corpus = tiny_corpus(cfg, 2);
    let b = batch(cfg, &corpus, 1, DType::F64);
    let st = state(cfg, DType::F64);
    let t = compute_terms(&st, &b, 1, Objective::Full).unwrap();
    let s = |x: &candle_core::Tensor| x.to_scalar::<f64>().unwrap();
    (s(&t.rec_v), s(&t.rec_a), s(&t.contra), t.dis.as_ref().map(s), t.contra_mask)
}

#[test]
fn each_ablation_toggle_changes_only_its_path() {
    let base = tiny_config();
    let (rv, ra, contra, dis, mask) = terms(&base);
    assert_eq!(mask, (MaskStrategy::GuidedDistinct, 0.5));

    let mut single = base.clone();
    single.train.dual_pass = false;
    let s = terms(&single);
    assert_eq!((s.0, s.1), (rv, ra));
    assert_ne!(s.2, contra);
    assert_eq!(s.4, (MaskStrategy::Random, 0.75));

    let mut ratio = base.clone();
    ratio.train.contra_mask_ratio = 0.2;
    let r = terms(&ratio);
    assert_eq!((r.0, r.1), (rv, ra));
    assert_ne!(r.2, contra);
    assert_eq!(r.4, (MaskStrategy::GuidedDistinct, 0.2));

    let mut nodis = base.clone();
    nodis.train.distill = false;
    let n = terms(&nodis);
    assert_eq!((n.0, n.1, n.2), (rv, ra, contra));
    assert!(dis.is_some() && n.3.is_none());

    let mut random = base.clone();
    random.train.mask_strategy = MaskStrategy::Random;
    let m = terms(&random);
    // distillation reads the contrastive view, so it moves with the mask
    assert_eq!((m.0, m.1), (rv, ra));
    assert_ne!(m.2, contra);

    let mut gumbel0 = base.clone();
    gumbel0.train.mask_strategy = MaskStrategy::GuidedGumbel;
    gumbel0.train.gumbel_scale = 0.0;
    assert_eq!(terms(&gumbel0).2, contra);
    let mut gumbel = gumbel0.clone();
    gumbel.train.gumbel_scale = 1.0;
    let g = terms(&gumbel);
    assert_eq!((g.0, g.1), (rv, ra));
    assert_ne!(g.2, contra);
}

#[test]
fn provenance_tags_follow_the_toggles() {
    let cfg = tiny_config();
    let corpus = tiny_corpus(&cfg, 2);
    let b = batch(&cfg, &corpus, 1, DType::F32);
    let report = |cfg: &Config| train_step(&mut state(cfg, DType::F32), &b).unwrap().provenance;
    let p = report(&cfg);
    assert_eq!((p.rec, p.contra, p.dis), (PassTag::Reconstruction, PassTag::Contrastive, PassTag::Contrastive));
    let mut single = cfg.clone();
    single.train.dual_pass = false;
    let p = report(&single);
    assert_eq!((p.rec, p.contra, p.dis), (PassTag::Shared, PassTag::Shared, PassTag::Shared));
    let mut nodis = cfg.clone();
    nodis.train.distill = false;
    assert_eq!(report(&nodis).dis, PassTag::Disabled);
}
