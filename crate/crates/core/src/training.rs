//! The training step (teacher pass, guided contrastive pass, random
//! reconstruction pass, one backward, Adam, EMA) and the pretraining loop.
//!
//! Every random draw comes from a stream keyed by the global step and the
//! sample's corpus index, so a resumed run replays the same masks, frames and
//! batch order as an uninterrupted one.

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Config, MaskStrategy, ModelConfig, TrainConfig};
use crate::data::AVSample;
use crate::error::{Error, Result};
use crate::losses::{
    distill_loss, info_nce, normalize_patches, rec_loss, total_loss, LossFlags, LossReport, LossTerms, LossWeights,
    CSV_HEADER,
};
use crate::masking::{apply_mask, guided_mask_distinct, guided_mask_gumbel, random_mask, MaskBookkeeping, MaskSpec, PriorityScores};
use crate::model::{ema_update, Student, Teacher};
use crate::nn::{gather_rows, l2_normalize};
use crate::optim::Adam;
use crate::rng::{stream, Purpose};
use crate::tokenizer::{patch_batch, patchify, Modality, TokenSequence};

/// Linear warmup to `peak`, then cosine decay to 0 at `total`.
pub fn lr_at(step: u64, warmup: u64, total: u64, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Patchified frame `t` and its aligned spectrogram segment.
pub fn frame_patches(sample: &AVSample, t: usize, cfg: &ModelConfig) -> Result<(Vec<f32>, Vec<f32>)> {
    let [_, h, w, c] = sample.frames_shape;
    let [_, m, f] = sample.segments_shape;
    if (h, w) != cfg.image_size || (m, f) != cfg.audio_segment_size {
        return Err(Error::Shape(format!(
            "sample `{}` is {h}x{w} / {m}x{f}, the model expects {:?} / {:?}",
            sample.sample_id, cfg.image_size, cfg.audio_segment_size
        )));
    }
    Ok((
        patchify(sample.frame(t), h, w, c, cfg.patch_size)?,
        patchify(sample.segment(t), m, f, 1, cfg.patch_size)?,
    ))
}

/// One batch of single-frame views.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, P_v, patch_dim_v]`
    pub pv: Tensor,
    /// `[B, P_a, patch_dim_a]`
    pub pa: Tensor,
    pub frame_index: Vec<usize>,
    /// Corpus index of each sample; keys every per-sample random stream.
    pub keys: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

pub fn batch_at_frames(samples: &[&AVSample], frames: &[usize], keys: &[u64], cfg: &ModelConfig, dtype: DType) -> Result<Batch> {
    let mut vis = Vec::with_capacity(samples.len());
    let mut aud = Vec::with_capacity(samples.len());
    for (s, &t) in samples.iter().zip(frames) {
        let (v, a) = frame_patches(s, t, cfg)?;
        vis.push(v);
        aud.push(a);
    }
    Ok(Batch {
        pv: patch_batch(&vis, cfg.visual_patch_dim(), dtype)?,
        pa: patch_batch(&aud, cfg.audio_patch_dim(), dtype)?,
        frame_index: frames.to_vec(),
        keys: keys.to_vec(),
    })
}

/// Batch with one uniformly drawn frame per sample.
pub fn make_batch(samples: &[&AVSample], keys: &[u64], step: u64, seed: u64, cfg: &ModelConfig, dtype: DType) -> Result<Batch> {
    let frames: Vec<usize> = samples
        .iter()
        .zip(keys)
        .map(|(s, &k)| stream(seed, Purpose::FrameChoice, &[step, k]).random_range(0..s.num_frames()))
        .collect();
    batch_at_frames(samples, &frames, keys, cfg, dtype)
}

/// Student, teacher and optimizer plus the step counter.
pub struct TrainState {
    pub config: Config,
    pub student: Student,
    pub teacher: Teacher,
    pub adam: Adam,
    /// Completed optimizer steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: &Config, dtype: DType) -> Result<Self> {
        config.validate()?;
        let student = Student::new(&config.model, config.train.seed, dtype)?;
        let teacher = Teacher::from_student(&student)?;
        Ok(Self {
            config: config.clone(),
            student,
            teacher,
            adam: Adam::default(),
            step: 0,
        })
    }

    pub fn from_checkpoint(path: &Path, dtype: DType) -> Result<Self> {
        let c = load_checkpoint(path, dtype)?;
        Ok(Self {
            config: c.config,
            student: c.student,
            teacher: c.teacher,
            adam: c.adam,
            step: c.step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, &self.config, self.step, &self.student, &self.teacher, &self.adam)
    }
}

/// Which losses a step optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Everything enabled by the config.
    Full,
    /// Only the reconstruction pass, with the same masks as a full step.
    ReconstructionOnly,
}

fn masks_for(
    modality: Modality,
    keys: &[u64],
    f: impl Fn(usize, &mut crate::rng::StreamRng) -> MaskSpec,
    purpose: Purpose,
    step: u64,
    seed: u64,
) -> Vec<MaskSpec> {
    keys.iter()
        .enumerate()
        .map(|(i, &k)| {
            let mut r = stream(seed, purpose, &[step, k, modality.index()]);
            f(i, &mut r)
        })
        .collect()
}

/// Per-sample masks for the reconstruction (or shared) pass.
pub fn random_masks(p: usize, ratio: f64, modality: Modality, keys: &[u64], purpose: Purpose, step: u64, seed: u64) -> Vec<MaskSpec> {
    masks_for(modality, keys, |_, r| random_mask(p, ratio, modality, r), purpose, step, seed)
}

/// Per-sample masks for the contrastive pass under the configured strategy.
pub fn contrastive_masks(
    tc: &TrainConfig,
    p: usize,
    modality: Modality,
    priorities: &[PriorityScores],
    keys: &[u64],
    step: u64,
) -> Vec<MaskSpec> {
    let ratio = tc.contra_mask_ratio;
    masks_for(
        modality,
        keys,
        |i, r| match tc.mask_strategy {
            MaskStrategy::Random => random_mask(p, ratio, modality, r),
            MaskStrategy::GuidedDistinct => guided_mask_distinct(&priorities[i], ratio, modality),
            MaskStrategy::GuidedGumbel => guided_mask_gumbel(&priorities[i], ratio, tc.gumbel_scale, modality, r),
        },
        Purpose::ContrastiveMask,
        step,
        tc.seed,
    )
}

/// A masked, encoded view of one modality.
pub struct EncodedView {
    pub encoded: TokenSequence,
    pub book: MaskBookkeeping,
}

pub fn encode_view(student: &Student, seq: &TokenSequence, masks: &[MaskSpec]) -> Result<EncodedView> {
    let (visible, book) = apply_mask(seq, masks)?;
    Ok(EncodedView {
        encoded: student.enc.encode(&visible)?,
        book,
    })
}

/// Reconstruction losses from two encoded views: strip specials, fuse, decode.
pub fn reconstruction_terms(student: &Student, v: &EncodedView, a: &EncodedView, batch: &Batch) -> Result<(Tensor, Tensor)> {
    let (fused, _) = student.enc.joint_fused(
        &v.encoded.patch_tokens()?,
        &a.encoded.patch_tokens()?,
        (v.book.visible_count(), a.book.visible_count()),
    )?;
    let (pred_v, pred_a) = student.dec.decode(&fused, &v.book, &a.book)?;
    let target = |patches: &Tensor, book: &MaskBookkeeping, pred: &Tensor| -> Result<Tensor> {
        if book.masked_count() == 0 {
            return Ok(pred.zeros_like()?);
        }
        let t = gather_rows(patches, &book.masked)?;
        if student.cfg.norm_pix_loss {
            normalize_patches(&t)
        } else {
            Ok(t)
        }
    };
    let tv = target(&batch.pv, &v.book, &pred_v)?;
    let ta = target(&batch.pa, &a.book, &pred_a)?;
    Ok((rec_loss(&pred_v, &tv)?, rec_loss(&pred_a, &ta)?))
}

/// Unit-norm globals from two encoded views.
pub fn contrastive_globals(student: &Student, v: &EncodedView, a: &EncodedView) -> Result<(Tensor, Tensor)> {
    let (gv, _) = student.enc.joint_single(&v.encoded)?;
    let (ga, _) = student.enc.joint_single(&a.encoded)?;
    Ok((l2_normalize(&gv)?, l2_normalize(&ga)?))
}

/// All differentiable terms of step `step` (1-based) without touching any state.
pub fn compute_terms(state: &TrainState, batch: &Batch, step: u64, objective: Objective) -> Result<LossTerms> {
    let tc = &state.config.train;
    let s = &state.student;
    if batch.len() < 2 {
        return Err(Error::InvalidArgument(format!("batch of {} is too small for InfoNCE", batch.len())));
    }
    let seq_v = s.enc.embed(Modality::Visual, &batch.pv, &batch.frame_index)?;
    let seq_a = s.enc.embed(Modality::Audio, &batch.pa, &batch.frame_index)?;
    let (pv, pa) = (seq_v.num_patch_tokens(), seq_a.num_patch_tokens());
    // the single-pass baseline reuses the reconstruction mask stream, so toggling
    // dual_pass changes only what feeds the contrastive terms
    let rec_view = || -> Result<(EncodedView, EncodedView)> {
        let purpose = Purpose::ReconstructionMask;
        let mv = random_masks(pv, tc.recon_mask_ratio, Modality::Visual, &batch.keys, purpose, step, tc.seed);
        let ma = random_masks(pa, tc.recon_mask_ratio, Modality::Audio, &batch.keys, purpose, step, tc.seed);
        Ok((encode_view(s, &seq_v, &mv)?, encode_view(s, &seq_a, &ma)?))
    };
    let zero = Tensor::zeros((), batch.pv.dtype(), batch.pv.device())?;

    if objective == Objective::ReconstructionOnly || !tc.dual_pass {
        let (v, a) = rec_view()?;
        let (rec_v, rec_a) = reconstruction_terms(s, &v, &a, batch)?;
        if objective == Objective::ReconstructionOnly {
            return Ok(LossTerms {
                rec_v,
                rec_a,
                contra: zero,
                dis: None,
                contra_mask: (MaskStrategy::Random, tc.recon_mask_ratio),
            });
        }
        let (gv, ga) = contrastive_globals(s, &v, &a)?;
        let contra = info_nce(&gv, &ga, tc.temperature, tc.symmetric_contrastive)?;
        let dis = if tc.distill {
            let t = state
                .teacher
                .forward_patches(&batch.pv, &batch.pa, &batch.frame_index, tc.guidance_source)?;
            Some(distill_loss(&gv, &ga, &l2_normalize(&t.g_v)?, &l2_normalize(&t.g_a)?)?)
        } else {
            None
        };
        return Ok(LossTerms {
            rec_v,
            rec_a,
            contra,
            dis,
            contra_mask: (MaskStrategy::Random, tc.recon_mask_ratio),
        });
    }

    // (A) teacher on full views
    let needs_teacher = tc.distill || tc.mask_strategy.is_guided();
    let teacher = if needs_teacher {
        Some(
            state
                .teacher
                .forward_patches(&batch.pv, &batch.pa, &batch.frame_index, tc.guidance_source)?,
        )
    } else {
        None
    };
    // (B) contrastive pass
    let empty = Vec::new();
    let (prio_v, prio_a) = teacher
        .as_ref()
        .map_or((&empty, &empty), |t| (&t.priority_v, &t.priority_a));
    let mv = contrastive_masks(tc, pv, Modality::Visual, prio_v, &batch.keys, step);
    let ma = contrastive_masks(tc, pa, Modality::Audio, prio_a, &batch.keys, step);
    let cv = encode_view(s, &seq_v, &mv)?;
    let ca = encode_view(s, &seq_a, &ma)?;
    let (gv, ga) = contrastive_globals(s, &cv, &ca)?;
    let contra = info_nce(&gv, &ga, tc.temperature, tc.symmetric_contrastive)?;
    let dis = match (&teacher, tc.distill) {
        (Some(t), true) => Some(distill_loss(&gv, &ga, &l2_normalize(&t.g_v)?, &l2_normalize(&t.g_a)?)?),
        _ => None,
    };
    // (C) reconstruction pass
    let (rv, ra) = rec_view()?;
    let (rec_v, rec_a) = reconstruction_terms(s, &rv, &ra, batch)?;
    Ok(LossTerms {
        rec_v,
        rec_a,
        contra,
        dis,
        contra_mask: (tc.mask_strategy, tc.contra_mask_ratio),
    })
}

pub fn loss_weights(tc: &TrainConfig) -> LossWeights {
    LossWeights {
        rec: tc.lambda_rec,
        dis: tc.lambda_dis,
        contra: tc.lambda_contra,
    }
}

/// One optimizer step followed by the EMA update.
pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<LossReport> {
    train_step_with(state, batch, Objective::Full)
}

pub fn train_step_with(state: &mut TrainState, batch: &Batch, objective: Objective) -> Result<LossReport> {
    let tc = state.config.train.clone();
    let step = state.step + 1;
    let terms = compute_terms(state, batch, step, objective)?;
    let flags = LossFlags {
        dual_pass: tc.dual_pass,
        distill: tc.distill && objective == Objective::Full,
    };
    let (total, mut report) = total_loss(&terms, loss_weights(&tc), flags)?;
    report.step = step;
    report.lr = lr_at(step, tc.warmup_steps as u64, tc.steps as u64, tc.peak_lr);
    if let Some((term, value)) = report.non_finite() {
        return Err(Error::NonFinite {
            term: term.to_string(),
            detail: format!("step {step}: {term} = {value}; row {}", report.csv_row()),
        });
    }
    let grads = total.backward()?;
    state.adam.step(&state.student.params, &grads, report.lr)?;
    ema_update(&state.teacher, &state.student, tc.ema_momentum)?;
    state.step = step;
    Ok(report)
}

/// Sample order for `epoch`: a permutation keyed by (seed, epoch).
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::EpochOrder, &[epoch]));
    order
}

/// Corpus indices of the batch for 1-based `step`; incomplete tail batches are dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = (n / batch_size) as u64;
    let epoch = (step - 1) / per_epoch;
    let pos = ((step - 1) % per_epoch) as usize;
    epoch_order(n, seed, epoch)[pos * batch_size..(pos + 1) * batch_size].to_vec()
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this step (a checkpoint is written there) instead of `steps`.
    pub until: Option<u64>,
    /// Overwrite an existing run directory.
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub final_step: u64,
    pub checkpoint: PathBuf,
    pub last: Option<LossReport>,
}

pub const LOSSES_FILE: &str = "losses.csv";
pub const CONFIG_FILE: &str = "config.txt";

pub fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join(format!("ckpt_{step}"))
}

/// Keep the header and rows with step ≤ `step`.
fn truncate_csv(path: &Path, step: u64) -> Result<()> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if i == 0 {
            kept.push(line);
            continue;
        }
        let s: u64 = line
            .split(',')
            .next()
            .and_then(|x| x.parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: malformed row `{line}`", path.display())))?;
        if s <= step {
            kept.push(line);
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Train on an in-memory corpus, writing `losses.csv`, `config.txt` and
/// checkpoints into `out`. `on_step` sees every report as it is produced.
pub fn run_pretraining(
    config: &Config,
    corpus: &[AVSample],
    out: &Path,
    opts: &RunOptions,
    on_step: &mut dyn FnMut(&LossReport),
) -> Result<RunSummary> {
    let dtype = DType::F32;
    let csv = out.join(LOSSES_FILE);
    let mut state = match &opts.resume {
        Some(ckpt) => {
            let state = TrainState::from_checkpoint(ckpt, dtype)?;
            if csv.exists() {
                truncate_csv(&csv, state.step)?;
            } else {
                fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                fs::write(&csv, format!("{CSV_HEADER}\n")).map_err(|e| Error::io(&csv, e))?;
            }
            state
        }
        None => {
            if csv.exists() && !opts.force {
                return Err(Error::InvalidArgument(format!(
                    "{} already holds a run; pass --force to overwrite",
                    out.display()
                )));
            }
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            fs::write(&csv, format!("{CSV_HEADER}\n")).map_err(|e| Error::io(&csv, e))?;
            TrainState::new(config, dtype)?
        }
    };
    let cfg = state.config.clone();
    cfg.save(&out.join(CONFIG_FILE))?;
    let tc = &cfg.train;
    if corpus.len() < tc.batch_size {
        return Err(Error::Data(format!(
            "corpus of {} clips is smaller than one batch of {}",
            corpus.len(),
            tc.batch_size
        )));
    }
    let stop = opts.until.unwrap_or(tc.steps as u64).min(tc.steps as u64);
    let mut log = OpenOptions::new()
        .append(true)
        .open(&csv)
        .map_err(|e| Error::io(&csv, e))?;
    let mut last = None;
    let mut order_cache: Option<(u64, Vec<usize>)> = None;
    let per_epoch = (corpus.len() / tc.batch_size) as u64;
    while state.step < stop {
        let step = state.step + 1;
        let epoch = (step - 1) / per_epoch;
        if order_cache.as_ref().map(|c| c.0) != Some(epoch) {
            order_cache = Some((epoch, epoch_order(corpus.len(), tc.seed, epoch)));
        }
        let order = &order_cache.as_ref().unwrap().1;
        let pos = ((step - 1) % per_epoch) as usize;
        let idx = &order[pos * tc.batch_size..(pos + 1) * tc.batch_size];
        let samples: Vec<&AVSample> = idx.iter().map(|&i| &corpus[i]).collect();
        let keys: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let batch = make_batch(&samples, &keys, step, tc.seed, &cfg.model, dtype)?;
        let report = train_step(&mut state, &batch)?;
        writeln!(log, "{}", report.csv_row()).map_err(|e| Error::io(&csv, e))?;
        on_step(&report);
        if tc.checkpoint_every > 0 && step % tc.checkpoint_every as u64 == 0 {
            state.save(&checkpoint_path(out, step))?;
        }
        last = Some(report);
    }
    log.flush().map_err(|e| Error::io(&csv, e))?;
    let checkpoint = if state.step >= tc.steps as u64 {
        out.join("ckpt_final")
    } else {
        checkpoint_path(out, state.step)
    };
    state.save(&checkpoint)?;
    Ok(RunSummary {
        final_step: state.step,
        checkpoint,
        last,
    })
}
