//! Visible/masked patch partitions: uniform random, teacher-guided top-k and
//! Gumbel-perturbed teacher-guided top-k.
//!
//! Only patch tokens are maskable. Masked counts use round-half-up:
//! `masked = floor(ratio * P + 0.5)`.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::config::MaskStrategy;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tokenizer::{Modality, SeqLayout, TokenSequence};

pub const SCORE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    /// Sorted patch positions kept visible.
    pub visible_idx: Vec<usize>,
    /// Sorted complement of `visible_idx`.
    pub masked_idx: Vec<usize>,
    pub ratio: f64,
    pub strategy: MaskStrategy,
    pub modality: Modality,
}

impl MaskSpec {
    pub fn num_patches(&self) -> usize {
        self.visible_idx.len() + self.masked_idx.len()
    }

    fn from_visible(mut visible: Vec<usize>, p: usize, ratio: f64, strategy: MaskStrategy, modality: Modality) -> Self {
        visible.sort_unstable();
        let mut is_visible = vec![false; p];
        for &v in &visible {
            is_visible[v] = true;
        }
        let masked_idx = (0..p).filter(|&i| !is_visible[i]).collect();
        Self {
            visible_idx: visible,
            masked_idx,
            ratio,
            strategy,
            modality,
        }
    }
}

/// Number of masked patches for `ratio` over `p` patches (round half up).
pub fn masked_count(p: usize, ratio: f64) -> usize {
    ((ratio * p as f64 + 0.5).floor() as usize).min(p)
}

pub fn visible_count(p: usize, ratio: f64) -> usize {
    p - masked_count(p, ratio)
}

pub fn random_mask(p: usize, ratio: f64, modality: Modality, rng: &mut StreamRng) -> MaskSpec {
    let masked = rand::seq::index::sample(rng, p, masked_count(p, ratio)).into_vec();
    let mut is_masked = vec![false; p];
    for &m in &masked {
        is_masked[m] = true;
    }
    let visible = (0..p).filter(|&i| !is_masked[i]).collect();
    MaskSpec::from_visible(visible, p, ratio, MaskStrategy::Random, modality)
}

/// Per-patch priorities, non-negative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorityScores {
    pub scores: Vec<f64>,
    pub source: String,
}

fn normalize(scores: Vec<f64>, source: String) -> Result<PriorityScores> {
    let total: f64 = scores.iter().sum();
    if !(total > 0.0) || scores.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::NonFinite {
            term: "priority".into(),
            detail: format!("cannot normalize scores summing to {total}"),
        });
    }
    Ok(PriorityScores {
        scores: scores.into_iter().map(|s| s / total).collect(),
        source,
    })
}

/// Priorities from a batch of attention maps `[B, H, L, L]`: the global
/// token's query row restricted to patch columns, averaged over heads and
/// renormalized over patches.
pub fn teacher_priorities(attn: &Tensor, layout: SeqLayout, source: &str) -> Result<Vec<PriorityScores>> {
    let (_, _, lq, lk) = attn.dims4()?;
    if lq != layout.len() || lk != layout.len() {
        return Err(Error::Shape(format!(
            "attention is {lq}x{lk} but the layout has {} tokens",
            layout.len()
        )));
    }
    let row = attn.narrow(2, 0, 1)?.squeeze(2)?.to_dtype(DType::F64)?;
    let sums = row.sum(D::Minus1)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(s) = sums.iter().find(|s| (**s - 1.0).abs() > 1e-4) {
        return Err(Error::InvalidArgument(format!(
            "global attention row sums to {s}, expected softmax-normalized rows"
        )));
    }
    let patch_mass = row
        .narrow(2, layout.num_special, layout.num_patches)?
        .mean(1)?
        .to_vec2::<f64>()?;
    patch_mass
        .into_iter()
        .map(|s| normalize(s, source.to_string()))
        .collect()
}

/// Single-sample form over `[H, L, L]`.
pub fn teacher_priority(attn: &Tensor, layout: SeqLayout) -> Result<PriorityScores> {
    let mut v = teacher_priorities(&attn.unsqueeze(0)?, layout, "global-row/head-mean")?;
    Ok(v.remove(0))
}

/// Priorities from a fused-pass attention map `[B, H, L, L]` over
/// `[visual patches ; audio patches]`: attention mass each patch receives,
/// averaged over heads and queries, renormalized within each modality block.
pub fn fused_priorities(attn: &Tensor, num_visual: usize, num_audio: usize) -> Result<(Vec<PriorityScores>, Vec<PriorityScores>)> {
    let (_, _, l, _) = attn.dims4()?;
    if l != num_visual + num_audio {
        return Err(Error::Shape(format!(
            "fused attention over {l} tokens, expected {}",
            num_visual + num_audio
        )));
    }
    let received = attn.to_dtype(DType::F64)?.mean(1)?.mean(1)?.to_vec2::<f64>()?;
    let mut vis = Vec::new();
    let mut aud = Vec::new();
    for r in received {
        vis.push(normalize(r[..num_visual].to_vec(), "fused/received".into())?);
        aud.push(normalize(r[num_visual..].to_vec(), "fused/received".into())?);
    }
    Ok((vis, aud))
}

/// Indices of the `k` largest values, ties broken by lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

pub fn guided_mask_distinct(scores: &PriorityScores, ratio: f64, modality: Modality) -> MaskSpec {
    let p = scores.scores.len();
    let visible = top_k(&scores.scores, visible_count(p, ratio));
    MaskSpec::from_visible(visible, p, ratio, MaskStrategy::GuidedDistinct, modality)
}

/// Top-k over `ln(score + eps) + scale * G`, `G ~ Gumbel(0, 1)`.
pub fn guided_mask_gumbel(
    scores: &PriorityScores,
    ratio: f64,
    gumbel_scale: f64,
    modality: Modality,
    rng: &mut StreamRng,
) -> MaskSpec {
    let p = scores.scores.len();
    if gumbel_scale == 0.0 {
        let mut spec = guided_mask_distinct(scores, ratio, modality);
        spec.strategy = MaskStrategy::GuidedGumbel;
        return spec;
    }
    let perturbed: Vec<f64> = scores
        .scores
        .iter()
        .map(|s| {
            let u: f64 = rng.sample(rand::distr::Open01);
            (s + SCORE_EPS).ln() + gumbel_scale * -(-u.ln()).ln()
        })
        .collect();
    let visible = top_k(&perturbed, visible_count(p, ratio));
    MaskSpec::from_visible(visible, p, ratio, MaskStrategy::GuidedGumbel, modality)
}

/// Positions removed by masking, kept for the decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskBookkeeping {
    pub modality: Modality,
    pub num_patches: usize,
    pub visible: Vec<Vec<usize>>,
    pub masked: Vec<Vec<usize>>,
}

impl MaskBookkeeping {
    pub fn visible_count(&self) -> usize {
        self.visible.first().map_or(0, Vec::len)
    }

    pub fn masked_count(&self) -> usize {
        self.masked.first().map_or(0, Vec::len)
    }

    /// For sample `b`: position `i` of the full grid is element `restore[i]`
    /// of the concatenation `visible ++ masked`.
    pub fn restore_order(&self, b: usize) -> Vec<usize> {
        let mut restore = vec![0; self.num_patches];
        for (j, &pos) in self.visible[b].iter().chain(&self.masked[b]).enumerate() {
            restore[pos] = j;
        }
        restore
    }
}

/// Drop masked patch tokens. Global and register tokens are always kept and
/// visible patches keep their original relative order.
pub fn apply_mask(seq: &TokenSequence, specs: &[MaskSpec]) -> Result<(TokenSequence, MaskBookkeeping)> {
    let p = seq.num_patch_tokens();
    if specs.len() != seq.batch() {
        return Err(Error::Shape(format!(
            "{} masks for a batch of {}",
            specs.len(),
            seq.batch()
        )));
    }
    let k = specs.first().map_or(0, |s| s.visible_idx.len());
    for s in specs {
        if s.num_patches() != p {
            return Err(Error::Shape(format!(
                "mask covers {} patches but the sequence has {p}",
                s.num_patches()
            )));
        }
        if s.visible_idx.len() != k {
            return Err(Error::Shape("masks in one batch must keep the same count".into()));
        }
        if s.visible_idx.iter().chain(&s.masked_idx).any(|&i| i >= p) {
            return Err(Error::Shape(format!("mask index out of range for {p} patches")));
        }
        if s.modality != seq.modality {
            return Err(Error::Shape("mask modality does not match sequence".into()));
        }
    }
    let keep: Vec<Vec<usize>> = specs.iter().map(|s| s.visible_idx.clone()).collect();
    let visible = seq.select_patches(&keep)?;
    let book = MaskBookkeeping {
        modality: seq.modality,
        num_patches: p,
        visible: keep,
        masked: specs.iter().map(|s| s.masked_idx.clone()).collect(),
    };
    Ok((visible, book))
}

pub fn full_mask(p: usize, modality: Modality) -> MaskSpec {
    MaskSpec::from_visible((0..p).collect(), p, 0.0, MaskStrategy::Random, modality)
}
