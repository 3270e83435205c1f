//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 7`.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use common::grad::{dual_pass_separation, finite_difference_suite, reconstruction_isolation};
use common::{batch, state, tiny_config, tiny_corpus};
use tgdp::config::{resolve_token_counts, Config, MaskStrategy, ModelConfig};
use tgdp::data::synth::{synthetic_corpus, SynthSpec};
use tgdp::data::{AVSample, Label};
use tgdp::dynamics::{final_value, step_to_within, LossLog};
use tgdp::evaluation::{
    attention_probe_train, clip_similarity, embed_clips, permutation_null, quantile, recall_at_k, retrieve,
    ClipEmbedding, Direction, ProbeConfig, ProbeInput,
};
use tgdp::losses::{distill_loss, info_nce, rec_loss, total_loss, LossFlags, LossTerms, LossWeights, PassTag};
use tgdp::masking::{guided_mask_distinct, guided_mask_gumbel, masked_count, random_mask, PriorityScores};
use tgdp::model::{ema_update, values_of, Student, Teacher};
use tgdp::nn::l2_normalize;
use tgdp::rng::{stream, Purpose};
use tgdp::tokenizer::Modality;
use tgdp::training::{
    checkpoint_path, compute_terms, run_pretraining, train_step, Objective, RunOptions, TrainState, LOSSES_FILE,
};

// Pinned tolerances and budgets.
const ISOLATION_REL: f64 = 1e-8;
const ANALYTIC_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-6;
const EMA_TOL: f64 = 1e-6;
const FD_REL: f64 = 1e-3;
const FD_STEP: f64 = 1e-3;
const FD_SLICES: usize = 3;
const RETRIEVAL_TOL: f64 = 1e-6;
const NULL_SHUFFLES: usize = 1000;
const NULL_QUANTILE: f64 = 0.99;
const CHANCE_MULTIPLE: f64 = 10.0;
const COUNTER_SIGMAS: f64 = 3.0;
const SETTLE_BAND: f64 = 0.05;
/// The pilot scored 1.000 on three probe seeds with zero spread; the floor
/// allows ten misclassified held-out clips.
const PROBE_TOP1_FLOOR: f64 = 0.95;
const CONTROL_SIGMAS: f64 = 3.0;
const CONTROL_SHUFFLES: usize = 5;

const DESK_PROFILE: &str = include_str!("../../../configs/desk.cfg");
const TRAIN_CLIPS_PER_CLASS: usize = 200;
const HELD_OUT_PER_CLASS: usize = 20;
const CLASSES: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn all(checks: &[(bool, String)]) -> Outcome {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.0).map(|c| c.1.as_str()).collect();
    if failed.is_empty() {
        outcome(true, checks.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join("; "))
    } else {
        outcome(false, failed.join("; "))
    }
}

fn within_budget(o: Outcome, took: Duration, budget: Duration) -> Outcome {
    if took > budget {
        outcome(false, format!("{} (took {:.1}s, budget {:.0}s)", o.detail, took.as_secs_f64(), budget.as_secs_f64()))
    } else {
        o
    }
}

fn c1_token_arithmetic() -> Outcome {
    let mut cfg = ModelConfig::default();
    cfg.patch_size = 16;
    cfg.image_size = (224, 224);
    cfg.audio_segment_size = (128, 416);
    let valid = cfg.validate().is_ok();
    let (v, a) = resolve_token_counts(&cfg);
    all(&[
        (valid, "224x224 / 128x416 config validates".into()),
        (v == 196, format!("visual patches {v} (want 196)")),
        (a == 208, format!("audio patches {a} (want 208)")),
    ])
}

/// Visible set of a full descending sort, ties to the lower index.
fn sort_oracle(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut v = idx[..keep].to_vec();
    v.sort_unstable();
    v
}

fn c2_mask_cardinality() -> Outcome {
    let mut r = stream(2, Purpose::Generic, &[]);
    let mut bad = Vec::new();
    for ratio in [0.0, 0.2, 0.5, 0.65, 0.75] {
        for p in [4usize, 16, 196, 208] {
            let want = (ratio * p as f64).round() as usize;
            let scores = PriorityScores {
                scores: (0..p).map(|_| r.random::<f64>()).collect(),
                source: "test".into(),
            };
            let counts = [
                masked_count(p, ratio),
                random_mask(p, ratio, Modality::Visual, &mut r).masked_idx.len(),
                guided_mask_distinct(&scores, ratio, Modality::Visual).masked_idx.len(),
                guided_mask_gumbel(&scores, ratio, 1.0, Modality::Audio, &mut r).masked_idx.len(),
            ];
            if counts.iter().any(|&c| c != want) {
                bad.push(format!("ratio {ratio} P {p}: {counts:?} vs {want}"));
            }
        }
    }
    let mut mismatches = 0;
    for trial in 0..1000 {
        let p = [4usize, 16, 196, 208][trial % 4];
        // coarse scores force ties on some trials
        let coarse = trial % 3 == 0;
        let s: Vec<f64> = (0..p)
            .map(|_| {
                let x: f64 = r.random();
                if coarse { (x * 8.0).floor() } else { x }
            })
            .collect();
        let ratio = [0.0, 0.2, 0.5, 0.65, 0.75][trial % 5];
        let spec = guided_mask_distinct(&PriorityScores { scores: s.clone(), source: "t".into() }, ratio, Modality::Visual);
        if spec.visible_idx != sort_oracle(&s, p - (ratio * p as f64).round() as usize) {
            mismatches += 1;
        }
    }
    all(&[
        (bad.is_empty(), if bad.is_empty() { "20 ratio/P cells exact".into() } else { bad.join(", ") }),
        (mismatches == 0, format!("{mismatches}/1000 distinct-vs-sort mismatches")),
    ])
}

fn c3_gradient_isolation() -> Outcome {
    let cfg = tiny_config();
    let corpus = tiny_corpus(&cfg, 2);
    let b = batch(&cfg, &corpus, 1, DType::F64);
    let st = state(&cfg, DType::F64);
    let iso = reconstruction_isolation(&st, &b, FD_STEP);
    let sep = dual_pass_separation(&st, &b);
    let tol = ISOLATION_REL * iso.scale;
    all(&[
        (iso.autodiff <= tol, format!("autodiff |dL_rec/d special| = {:.1e}", iso.autodiff)),
        (
            iso.finite_diff <= tol,
            format!("finite-difference max {:.1e} over {} elements (scale {:.2e})", iso.finite_diff, iso.probed, iso.scale),
        ),
        (!sep.contra_reaches_rec_pass, "no L_contra gradient on reconstruction-pass tokens".into()),
        (
            sep.contra.0 == sep.contra.1 && sep.rec.0 != sep.rec.1,
            format!("L_contra fixed ({:.6}) across two reconstruction mask draws", sep.contra.0),
        ),
    ])
}

fn t64(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
}

fn s64(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Softmax cross-entropy over explicit loops.
fn naive_info_nce(gv: &[Vec<f64>], ga: &[Vec<f64>], tau: f64) -> f64 {
    let n = gv.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let dir = |q: &[Vec<f64>], k: &[Vec<f64>]| {
        let mut loss = 0.0;
        for i in 0..n {
            let denom: f64 = (0..n).map(|j| (dot(&q[i], &k[j]) / tau).exp()).sum();
            loss -= ((dot(&q[i], &k[i]) / tau).exp() / denom).ln();
        }
        loss / n as f64
    };
    0.5 * (dir(gv, ga) + dir(ga, gv))
}

fn c4_analytic_losses() -> Outcome {
    let u = t64(&[0.6, 0.8], &[1, 2]).repeat((4, 1)).unwrap();
    let ln4 = s64(&info_nce(&u, &u, 0.05, true).unwrap());
    let rec = s64(&rec_loss(&t64(&[3.0, 4.0], &[1, 2]), &t64(&[0.0, 0.0], &[1, 2])).unwrap());
    let g = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
    let dis0 = s64(&distill_loss(&g, &g, &g, &g).unwrap());
    let terms = LossTerms {
        rec_v: t64(&[0.2], &[]),
        rec_a: t64(&[0.3], &[]),
        contra: t64(&[1.0], &[]),
        dis: Some(t64(&[0.2], &[])),
        contra_mask: (MaskStrategy::GuidedDistinct, 0.5),
    };
    let w = LossWeights {
        rec: 1.0,
        dis: 1.0,
        contra: 0.01,
    };
    let flags = LossFlags {
        dual_pass: true,
        distill: true,
    };
    let (_, report) = total_loss(&terms, w, flags).unwrap();

    let mut r = stream(4, Purpose::Generic, &[]);
    let mut unit = |n: usize, d: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| r.random::<f64>() - 0.5).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / norm).collect()
            })
            .collect()
    };
    let (gv, ga) = (unit(8, 16), unit(8, 16));
    let flat = |m: &[Vec<f64>]| t64(&m.concat(), &[8, 16]);
    let got = s64(&info_nce(&l2_normalize(&flat(&gv)).unwrap(), &l2_normalize(&flat(&ga)).unwrap(), 0.07, true).unwrap());
    let want = naive_info_nce(&gv, &ga, 0.07);
    all(&[
        ((ln4 - 4f64.ln()).abs() <= ANALYTIC_TOL, format!("identical N=4 InfoNCE {ln4:.6}")),
        ((rec - 25.0).abs() <= ANALYTIC_TOL, format!("rec hand case {rec}")),
        (dis0.abs() <= ANALYTIC_TOL, format!("distill zero case {dis0}")),
        ((report.total - 0.71).abs() <= ANALYTIC_TOL, format!("total {:.6}", report.total)),
        ((got - want).abs() <= ORACLE_TOL, format!("N=8 InfoNCE vs naive |diff| {:.1e}", (got - want).abs())),
    ])
}

fn c5_ema() -> Outcome {
    let cfg = tiny_config();
    let s = Student::new(&cfg.model, 1, DType::F64).unwrap();
    let other = Student::new(&cfg.model, 2, DType::F64).unwrap();
    let t = Teacher::from_values(&cfg.model, &values_of(&other.params), DType::F64).unwrap();
    let t0: Vec<f64> = flat64(&t.params);
    let sv: Vec<f64> = student_side(&t, &s);
    let (m, k) = (0.9f64, 5);
    for _ in 0..k {
        ema_update(&t, &s, m).unwrap();
    }
    let mk = m.powi(k);
    let err = flat64(&t.params)
        .iter()
        .zip(t0.iter().zip(&sv))
        .map(|(got, (a, b))| (got - (a * mk + b * (1.0 - mk))).abs())
        .fold(0.0, f64::max);
    let copy = Teacher::from_values(&cfg.model, &values_of(&other.params), DType::F64).unwrap();
    ema_update(&copy, &s, 0.0).unwrap();
    let copy_exact = flat64(&copy.params) == sv;

    let corpus = tiny_corpus(&cfg, 2);
    let b = batch(&cfg, &corpus, 1, DType::F32);
    let st = state(&cfg, DType::F32);
    let terms = compute_terms(&st, &b, 1, Objective::Full).unwrap();
    let total = (((terms.rec_v + terms.rec_a).unwrap() + terms.contra).unwrap() + terms.dis.unwrap()).unwrap();
    let grads = total.backward().unwrap();
    let leaked = st.teacher.params.iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();
    all(&[
        (err <= EMA_TOL, format!("{k}-step closed form max err {err:.1e}")),
        (copy_exact, "m=0 copies the student".into()),
        (leaked == 0, format!("{leaked} teacher parameters received gradients")),
    ])
}

/// Student values for exactly the teacher's parameters, in teacher order.
fn student_side(t: &Teacher, s: &Student) -> Vec<f64> {
    t.params
        .iter()
        .flat_map(|(name, _)| s.params.get(name).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .collect()
}

fn flat64(store: &tgdp::nn::ParamStore) -> Vec<f64> {
    store
        .iter()
        .flat_map(|(_, v)| v.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap())
        .collect()
}

fn c6_finite_differences() -> Outcome {
    let cfg = tiny_config();
    let corpus = tiny_corpus(&cfg, 2);
    let b = batch(&cfg, &corpus, 1, DType::F64);
    let checks = finite_difference_suite(&cfg, &b, FD_SLICES, FD_STEP);
    let worst = checks.iter().max_by(|a, b| a.rel_err().total_cmp(&b.rel_err())).unwrap();
    let terms: Vec<&str> = {
        let mut t: Vec<&str> = checks.iter().map(|c| c.term).collect();
        t.dedup();
        t
    };
    all(&[
        (checks.len() == 4 * FD_SLICES, format!("{} checks over {}", checks.len(), terms.join("/"))),
        (
            worst.rel_err() <= FD_REL,
            format!(
                "worst rel err {:.1e} ({} wrt {}[{}])",
                worst.rel_err(),
                worst.term,
                worst.param,
                worst.index
            ),
        ),
    ])
}

fn random_clip(r: &mut tgdp::rng::StreamRng, t: usize, d: usize) -> ClipEmbedding {
    let mut unit = || {
        let v: Vec<f32> = (0..d).map(|_| r.random::<f32>() - 0.5).collect();
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<f32>>()
    };
    ClipEmbedding {
        sample_id: String::new(),
        g_v: (0..t).map(|_| unit()).collect(),
        g_a: (0..t).map(|_| unit()).collect(),
        label: None,
    }
}

fn c7_retrieval_oracles() -> Outcome {
    let mut r = stream(7, Purpose::Generic, &[]);
    let mut sim_err = 0.0f64;
    for _ in 0..50 {
        let (q, c) = (random_clip(&mut r, 4, 8), random_clip(&mut r, 4, 8));
        let mut naive = 0.0f64;
        for t in 0..4 {
            for u in 0..4 {
                if t == u {
                    let dot: f64 = (0..8).map(|k| q.g_v[t][k] as f64 * c.g_a[u][k] as f64).sum();
                    naive += dot / 4.0;
                }
            }
        }
        sim_err = sim_err.max((clip_similarity(&q, &c, Direction::VisualToAudio).unwrap() - naive).abs());
    }
    let mut recall_mismatch = 0;
    let mut monotone = true;
    for trial in 0..50 {
        let n = 20;
        let scores: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let x: f64 = r.random();
                        if trial % 2 == 0 { (x * 5.0).floor() } else { x }
                    })
                    .collect()
            })
            .collect();
        let mut gt: Vec<usize> = (0..n).collect();
        gt.shuffle(&mut r);
        let mut prev = 0.0;
        for k in 1..=n {
            let got = recall_at_k(&scores, &gt, k).unwrap();
            let mut hits = 0;
            for (row, &g) in scores.iter().zip(&gt) {
                let mut rank = 1;
                for (j, &s) in row.iter().enumerate() {
                    if s > row[g] || (s == row[g] && j < g) {
                        rank += 1;
                    }
                }
                if rank <= k {
                    hits += 1;
                }
            }
            if got != hits as f64 / n as f64 {
                recall_mismatch += 1;
            }
            monotone &= got >= prev;
            prev = got;
        }
        monotone &= prev == 1.0;
    }
    all(&[
        (sim_err <= RETRIEVAL_TOL, format!("diagonal similarity max err {sim_err:.1e}")),
        (recall_mismatch == 0, format!("{recall_mismatch} recall mismatches vs rank oracle")),
        (monotone, "recall non-decreasing in K, R@C = 1".into()),
    ])
}

fn c9_ablation_wiring() -> Outcome {
    let base = tiny_config();
    let corpus = tiny_corpus(&base, 2);
    let run = |cfg: &Config| {
        let b = batch(cfg, &corpus, 1, DType::F64);
        let mut st = state(cfg, DType::F64);
        let t = compute_terms(&st, &b, 1, Objective::Full).unwrap();
        let vals = (s64(&t.rec_v), s64(&t.rec_a), s64(&t.contra), t.dis.as_ref().map(s64));
        let report = train_step(&mut st, &b).unwrap();
        (vals, report.provenance)
    };
    let ((rv, ra, contra, _), p0) = run(&base);
    let mut checks = vec![(
        (p0.rec, p0.contra, p0.dis, p0.contra_mask)
            == (PassTag::Reconstruction, PassTag::Contrastive, PassTag::Contrastive, (MaskStrategy::GuidedDistinct, 0.5)),
        "default: separate passes, guided 0.50 contrastive view".to_string(),
    )];

    let mut single = base.clone();
    single.train.dual_pass = false;
    let ((a, b, c, _), p) = run(&single);
    checks.push((
        (a, b) == (rv, ra) && c != contra && p.rec == PassTag::Shared && p.contra_mask == (MaskStrategy::Random, 0.75),
        "dual_pass off: shared random 0.75 view, reconstruction unchanged".into(),
    ));
    let mut ratio = base.clone();
    ratio.train.contra_mask_ratio = 0.2;
    let ((a, b, c, _), p) = run(&ratio);
    checks.push((
        (a, b) == (rv, ra) && c != contra && p.contra_mask.1 == 0.2,
        "contra_mask_ratio: only the contrastive view moves".into(),
    ));
    let mut nodis = base.clone();
    nodis.train.distill = false;
    let ((a, b, c, d), p) = run(&nodis);
    checks.push((
        (a, b, c) == (rv, ra, contra) && d.is_none() && p.dis == PassTag::Disabled,
        "distill off: distillation term dropped, others unchanged".into(),
    ));
    let mut strategies = Vec::new();
    for (strategy, scale) in [
        (MaskStrategy::Random, 1.0),
        (MaskStrategy::GuidedGumbel, 0.0),
        (MaskStrategy::GuidedGumbel, 1.0),
    ] {
        let mut cfg = base.clone();
        cfg.train.mask_strategy = strategy;
        cfg.train.gumbel_scale = scale;
        let ((a, b, c, _), p) = run(&cfg);
        strategies.push(((a, b) == (rv, ra), c, p.contra_mask.0 == strategy));
    }
    checks.push((
        strategies.iter().all(|s| s.0 && s.2) && strategies[0].1 != contra && strategies[2].1 != contra,
        "mask_strategy: random and gumbel change only the contrastive view".into(),
    ));
    checks.push((strategies[1].1 == contra, "gumbel_scale=0 equals guided_distinct".into()));
    all(&checks)
}

fn c11_determinism_and_resume() -> Outcome {
    let cfg = tiny_config();
    let corpus = tiny_corpus(&cfg, 4);
    let dirs: Vec<tempfile::TempDir> = (0..3).map(|_| tempfile::tempdir().unwrap()).collect();
    let go = |d: &Path, o: RunOptions| {
        run_pretraining(&cfg, &corpus, d, &o, &mut |_| {}).unwrap();
    };
    go(dirs[0].path(), RunOptions::default());
    go(dirs[1].path(), RunOptions::default());
    go(
        dirs[2].path(),
        RunOptions {
            until: Some(10),
            ..RunOptions::default()
        },
    );
    go(
        dirs[2].path(),
        RunOptions {
            resume: Some(checkpoint_path(dirs[2].path(), 10)),
            ..RunOptions::default()
        },
    );
    let log = |i: usize| std::fs::read(dirs[i].path().join(LOSSES_FILE)).unwrap();
    let params = |i: usize| {
        TrainState::from_checkpoint(&dirs[i].path().join("ckpt_final"), DType::F32)
            .unwrap()
            .student
            .params
            .flat_values()
            .unwrap()
    };
    all(&[
        (log(0) == log(1), "identical seeds give identical losses.csv".into()),
        (log(0) == log(2), format!("{}-step run equals 10 + resumed 10", cfg.train.steps)),
        (params(0) == params(2), "final parameters identical after resume".into()),
    ])
}

struct Alignment {
    embs: Vec<ClipEmbedding>,
    train_embs: Vec<ClipEmbedding>,
    student: Student,
    csv: String,
    took: Duration,
}

fn desk_config() -> Config {
    Config::parse(DESK_PROFILE).unwrap()
}

fn corpus(cfg: &Config, per_class: usize, correlation: f64, seed: u64) -> Vec<AVSample> {
    let spec = SynthSpec {
        num_classes: CLASSES,
        samples_per_class: per_class,
        correlation,
        noise_sigma: 0.05,
        seed,
    };
    synthetic_corpus(&spec, &cfg.model).unwrap()
}

fn pretrain(correlation: f64) -> Alignment {
    let cfg = desk_config();
    let train = corpus(&cfg, TRAIN_CLIPS_PER_CLASS, correlation, 1);
    let held = corpus(&cfg, HELD_OUT_PER_CLASS, correlation, 2);
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let summary = run_pretraining(&cfg, &train, dir.path(), &RunOptions::default(), &mut |_| {}).unwrap();
    let took = t0.elapsed();
    let st = TrainState::from_checkpoint(&summary.checkpoint, DType::F32).unwrap();
    Alignment {
        embs: embed_clips(&st.student, &held, 64).unwrap(),
        train_embs: embed_clips(&st.student, &train, 64).unwrap(),
        student: st.student,
        csv: std::fs::read_to_string(dir.path().join(LOSSES_FILE)).unwrap(),
        took,
    }
}

struct DirectionStats {
    r1: f64,
    p99: f64,
    null_mean: f64,
    null_sd: f64,
}

fn direction_stats(embs: &[ClipEmbedding], dir: Direction) -> DirectionStats {
    let res = retrieve(embs, dir, &[1, 5, 10]).unwrap();
    let null = permutation_null(&res.scores, 1, NULL_SHUFFLES, 99).unwrap();
    let mean = null.iter().sum::<f64>() / null.len() as f64;
    let sd = (null.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (null.len() - 1) as f64).sqrt();
    DirectionStats {
        r1: res.recall(1).unwrap(),
        p99: quantile(&null, NULL_QUANTILE),
        null_mean: mean,
        null_sd: sd,
    }
}

fn c8_alignment(aligned: &Alignment, shuffled: &Alignment) -> Outcome {
    let chance = 1.0 / aligned.embs.len() as f64;
    let mut checks = Vec::new();
    for dir in [Direction::AudioToVisual, Direction::VisualToAudio] {
        let s = direction_stats(&aligned.embs, dir);
        checks.push((
            s.r1 > s.p99 && s.r1 > CHANCE_MULTIPLE * chance,
            format!(
                "{} R@1 {:.3} (null p99 {:.3}, {}x chance {:.3})",
                dir.as_str(),
                s.r1,
                s.p99,
                CHANCE_MULTIPLE,
                CHANCE_MULTIPLE * chance
            ),
        ));
        let c = direction_stats(&shuffled.embs, dir);
        checks.push((
            (c.r1 - c.null_mean).abs() <= COUNTER_SIGMAS * c.null_sd.max(f64::EPSILON),
            format!(
                "uncorrelated {} R@1 {:.3} (null {:.3} +/- {:.3})",
                dir.as_str(),
                c.r1,
                c.null_mean,
                c.null_sd
            ),
        ));
    }
    for (name, run) in [("aligned", aligned), ("uncorrelated", shuffled)] {
        checks.push((
            run.took <= Duration::from_secs(30 * 60),
            format!("{name} pretraining {:.0}s", run.took.as_secs_f64()),
        ));
    }
    all(&checks)
}

fn c10_dynamics(aligned: &Alignment) -> Outcome {
    let log = LossLog::parse(&aligned.csv).unwrap();
    let settle = |values: &[f64]| step_to_within(&log.steps, values, final_value(values), SETTLE_BAND);
    let rec: Vec<f64> = log
        .column("rec_v")
        .unwrap()
        .iter()
        .zip(log.column("rec_a").unwrap())
        .map(|(v, a)| v + a)
        .collect();
    let rec_step = settle(&rec);
    let contra_step = settle(log.column("contra").unwrap());
    let pass = matches!((rec_step, contra_step), (Some(r), Some(c)) if r < c);
    outcome(
        pass,
        format!(
            "steps to within {:.0}%: reconstruction {:?}, contrastive {:?}",
            SETTLE_BAND * 100.0,
            rec_step,
            contra_step
        ),
    )
}

fn c12_probe(aligned: &Alignment) -> Outcome {
    let pc = ProbeConfig::default();
    let m = attention_probe_train(&aligned.student, &aligned.train_embs, &aligned.embs, ProbeInput::AudioVisual, &pc)
        .unwrap();
    let mut controls = Vec::new();
    for k in 0..CONTROL_SHUFFLES {
        let mut shuffled = aligned.train_embs.clone();
        let mut labels: Vec<Option<Label>> = shuffled.iter().map(|e| e.label.clone()).collect();
        labels.shuffle(&mut stream(12, Purpose::Probe, &[k as u64]));
        for (e, l) in shuffled.iter_mut().zip(labels) {
            e.label = l;
        }
        controls.push(attention_probe_train(&aligned.student, &shuffled, &aligned.embs, ProbeInput::AudioVisual, &pc).unwrap());
    }
    let top1 = m.top1.unwrap();
    let ctl = controls.iter().map(|c| c.top1.unwrap()).sum::<f64>() / CONTROL_SHUFFLES as f64;
    let p = 1.0 / CLASSES as f64;
    // A probe fit to shuffled labels predicts nearly one label per class
    // cluster, so the independent units are the classes, not the clips.
    let sd = (p * (1.0 - p) / CLASSES as f64 / CONTROL_SHUFFLES as f64).sqrt();
    all(&[
        (top1 >= PROBE_TOP1_FLOOR, format!("probe top-1 {top1:.3} (floor {PROBE_TOP1_FLOOR:.3})")),
        (
            (ctl - p).abs() <= CONTROL_SIGMAS * sd,
            format!(
                "random-label control mean {ctl:.3} over {CONTROL_SHUFFLES} shuffles (chance {p:.2} +/- {:.3})",
                CONTROL_SIGMAS * sd
            ),
        ),
        (
            m.encoder_grad_norm == 0.0 && controls.iter().all(|c| c.encoder_grad_norm == 0.0),
            format!("encoder gradient norm {}", m.encoder_grad_norm),
        ),
    ])
}

fn main() {
    let wanted: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let run = |n: usize| wanted.is_empty() || wanted.contains(&n);
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut timed = |n: usize, name: &'static str, budget: u64, f: &dyn Fn() -> Outcome| {
        if run(n) {
            let t0 = Instant::now();
            let o = f();
            let o = within_budget(o, t0.elapsed(), Duration::from_secs(budget));
            println!("criterion {n:>2} {}: {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o));
        }
    };
    timed(1, "token arithmetic", 1, &c1_token_arithmetic);
    timed(2, "mask cardinality and oracle", 5, &c2_mask_cardinality);
    timed(3, "gradient isolation", 30, &c3_gradient_isolation);
    timed(4, "analytic losses", 5, &c4_analytic_losses);
    timed(5, "EMA exactness", 5, &c5_ema);
    timed(6, "gradient vs finite differences", 120, &c6_finite_differences);
    timed(7, "retrieval protocol oracle", 5, &c7_retrieval_oracles);

    if run(8) || run(10) || run(12) {
        let aligned = pretrain(1.0);
        let shuffled = if run(8) { Some(pretrain(0.0)) } else { None };
        if let Some(shuffled) = &shuffled {
            timed(8, "synthetic alignment", 3600 * 2, &|| c8_alignment(&aligned, shuffled));
        }
        timed(10, "dynamics ordering", 60, &|| c10_dynamics(&aligned));
        timed(12, "probe protocol", 1800, &|| c12_probe(&aligned));
    }
    timed(9, "ablation wiring", 60, &c9_ablation_wiring);
    timed(11, "determinism and resume", 300, &c11_determinism_and_resume);

    results.sort_by_key(|r| r.0);
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {} of {} criteria passed{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() { String::new() } else { format!("; failing {failed:?}") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
