//! Reconstruction, contrastive and distillation objectives and their
//! weighted combination.

use std::fmt;

use candle_core::{DType, Tensor, D};

use crate::config::MaskStrategy;
use crate::error::{Error, Result};

/// Mean over masked patches of the squared error summed over `patch_dim`.
/// Accepts `[M, pd]` or `[B, M, pd]`; an empty mask set gives 0.
pub fn rec_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let pd = *pred.dims().last().unwrap_or(&0);
    let rows = if pd == 0 { 0 } else { pred.elem_count() / pd };
    if rows == 0 {
        return Ok(Tensor::zeros((), pred.dtype(), pred.device())?);
    }
    Ok(((pred - target)?.sqr()?.sum_all()? / rows as f64)?)
}

/// Per-patch standardization of reconstruction targets.
pub fn normalize_patches(target: &Tensor) -> Result<Tensor> {
    let mean = target.mean_keepdim(D::Minus1)?;
    let c = target.broadcast_sub(&mean)?;
    let var = (c.sqr()?.sum_keepdim(D::Minus1)? / (target.dim(D::Minus1)?.max(2) - 1) as f64)?;
    Ok(c.broadcast_div(&(var + 1e-6)?.sqrt()?)?)
}

fn logsumexp_rows(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    Ok((x.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(D::Minus1)?)
}

fn cross_entropy_diag(logits: &Tensor) -> Result<Tensor> {
    let n = logits.dim(0)?;
    let lse = logsumexp_rows(logits)?;
    let eye = Tensor::eye(n, logits.dtype(), logits.device())?;
    let diag = (logits * eye)?.sum(D::Minus1)?;
    Ok((lse - diag)?.mean_all()?)
}

/// InfoNCE over unit rows with diagonal positives. `symmetric` averages the
/// visual→audio and audio→visual directions; otherwise only visual→audio.
pub fn info_nce(gv: &Tensor, ga: &Tensor, tau: f64, symmetric: bool) -> Result<Tensor> {
    let (n, d) = gv.dims2()?;
    if ga.dims() != [n, d] {
        return Err(Error::Shape(format!("{:?} vs {:?}", gv.dims(), ga.dims())));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    for (name, g) in [("visual", gv), ("audio", ga)] {
        let norms = g.to_dtype(DType::F64)?.sqr()?.sum(D::Minus1)?.sqrt()?.to_vec1::<f64>()?;
        if let Some(bad) = norms.iter().find(|x| (**x - 1.0).abs() > 1e-4) {
            return Err(Error::InvalidArgument(format!(
                "{name} embeddings must be unit rows, found norm {bad}"
            )));
        }
    }
    let logits = (gv.matmul(&ga.t()?)? / tau)?;
    let finite = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if finite.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            term: "contra".into(),
            detail: "non-finite logits".into(),
        });
    }
    let v2a = cross_entropy_diag(&logits)?;
    if !symmetric {
        return Ok(v2a);
    }
    let a2v = cross_entropy_diag(&logits.t()?)?;
    Ok(((v2a + a2v)? * 0.5)?)
}

/// Batch mean of `||g_v − ĝ_v||² + ||g_a − ĝ_a||²`; teacher inputs are detached.
pub fn distill_loss(gv: &Tensor, ga: &Tensor, tv: &Tensor, ta: &Tensor) -> Result<Tensor> {
    for (s, t) in [(gv, tv), (ga, ta)] {
        if s.dims() != t.dims() {
            return Err(Error::Shape(format!("student {:?} vs teacher {:?}", s.dims(), t.dims())));
        }
    }
    let b = gv.dim(0)?.max(1) as f64;
    let sv = (gv - tv.detach())?.sqr()?.sum_all()?;
    let sa = (ga - ta.detach())?.sqr()?.sum_all()?;
    Ok(((sv + sa)? / b)?)
}

/// Which forward pass produced a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassTag {
    Reconstruction,
    Contrastive,
    /// Single random-masked pass feeding several losses.
    Shared,
    Disabled,
}

impl fmt::Display for PassTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PassTag::Reconstruction => "reconstruction",
            PassTag::Contrastive => "contrastive",
            PassTag::Shared => "shared",
            PassTag::Disabled => "disabled",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub rec: PassTag,
    pub contra: PassTag,
    pub dis: PassTag,
    /// Strategy and ratio of the mask that fed the contrastive term.
    pub contra_mask: (MaskStrategy, f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rec: f64,
    pub dis: f64,
    pub contra: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub dual_pass: bool,
    pub distill: bool,
}

/// Differentiable terms of one step.
pub struct LossTerms {
    pub rec_v: Tensor,
    pub rec_a: Tensor,
    pub contra: Tensor,
    pub dis: Option<Tensor>,
    pub contra_mask: (MaskStrategy, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub step: u64,
    pub rec_v: f64,
    pub rec_a: f64,
    pub contra: f64,
    /// 0 when distillation is disabled.
    pub dis: f64,
    pub total: f64,
    pub lr: f64,
    pub weights: LossWeights,
    pub provenance: Provenance,
}

pub const CSV_HEADER: &str = "step,rec_v,rec_a,contra,dis,total,lr";

impl LossReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.step, self.rec_v, self.rec_a, self.contra, self.dis, self.total, self.lr
        )
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        [
            ("rec_v", self.rec_v),
            ("rec_a", self.rec_a),
            ("contra", self.contra),
            ("dis", self.dis),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `λ1·(rec_v + rec_a) + λ2·dis + λ3·contra`, the distillation term only when
/// enabled. Returns the differentiable total and its report.
pub fn total_loss(terms: &LossTerms, w: LossWeights, flags: LossFlags) -> Result<(Tensor, LossReport)> {
    let rec = (&terms.rec_v + &terms.rec_a)?;
    let mut total = ((rec * w.rec)? + (&terms.contra * w.contra)?)?;
    let dis = if flags.distill {
        let d = terms.dis.as_ref().ok_or_else(|| {
            Error::InvalidArgument("distillation is enabled but no distillation term was computed".into())
        })?;
        total = (total + (d * w.dis)?)?;
        scalar(d)?
    } else {
        0.0
    };
    let (rec_tag, contra_tag) = if flags.dual_pass {
        (PassTag::Reconstruction, PassTag::Contrastive)
    } else {
        (PassTag::Shared, PassTag::Shared)
    };
    let report = LossReport {
        step: 0,
        rec_v: scalar(&terms.rec_v)?,
        rec_a: scalar(&terms.rec_a)?,
        contra: scalar(&terms.contra)?,
        dis,
        total: scalar(&total)?,
        lr: 0.0,
        weights: w,
        provenance: Provenance {
            rec: rec_tag,
            contra: contra_tag,
            dis: if flags.distill { contra_tag } else { PassTag::Disabled },
            contra_mask: terms.contra_mask,
        },
    };
    Ok((total, report))
}
