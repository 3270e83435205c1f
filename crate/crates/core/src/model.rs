//! Student and EMA teacher networks.
//!
//! Token routing:
//! - modality encoders and single-modality joint passes see
//!   `[global | registers | patches]`, with patch queries blocked from
//!   special keys, so patch outputs never depend on global or register tokens;
//! - the fused joint pass sees visible patch tokens only;
//! - the decoder sees fused patch features plus mask tokens.
//!
//! The joint layer's attention and MLP weights are shared across the visual,
//! audio and fused passes; each pass has its own norms.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};

use crate::config::{GuidanceSource, ModelConfig};
use crate::error::{Error, Result};
use crate::masking::{fused_priorities, teacher_priorities, MaskBookkeeping, PriorityScores};
use crate::nn::{
    block_forward, gather_rows, Block, BlockNorms, BlockWeights, Init, LayerNorm, Linear, ParamBuilder,
    ParamSource, ParamStore, BLOCKED, INIT_STD,
};
use crate::tokenizer::{embed_sequence, Modality, ModalityStem, SeqLayout, TokenSequence};

/// Additive `[L, L]` logits: patch queries cannot read special keys.
pub fn special_block_bias(layout: SeqLayout, dtype: DType) -> Result<Tensor> {
    let (s, l) = (layout.num_special, layout.len());
    let mut v = vec![0f32; l * l];
    for q in s..l {
        for k in 0..s {
            v[q * l + k] = BLOCKED as f32;
        }
    }
    Ok(Tensor::from_vec(v, (l, l), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Debug, Clone)]
pub struct JointNorms {
    pub blocks: Vec<BlockNorms>,
    pub out: LayerNorm,
}

impl JointNorms {
    fn new(pb: &mut ParamBuilder, name: &str, depth: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            blocks: (0..depth)
                .map(|i| BlockNorms::new(pb, &format!("{name}.{i}"), dim))
                .collect::<Result<_>>()?,
            out: LayerNorm::new(pb, &format!("{name}.out"), dim)?,
        })
    }

    fn detached(&self) -> Self {
        Self {
            blocks: self.blocks.iter().map(BlockNorms::detached).collect(),
            out: self.out.detached(),
        }
    }
}

/// Everything up to and including the joint layer. Shared by student and teacher.
#[derive(Debug, Clone)]
pub struct EncoderSide {
    pub stem_v: ModalityStem,
    pub stem_a: ModalityStem,
    pub enc_v: Vec<Block>,
    pub enc_a: Vec<Block>,
    pub joint: Vec<BlockWeights>,
    pub norms_v: JointNorms,
    pub norms_a: JointNorms,
    pub norms_fuse: JointNorms,
    pub heads: usize,
}

fn blocks(pb: &mut ParamBuilder, name: &str, depth: usize, cfg: &ModelConfig) -> Result<Vec<Block>> {
    (0..depth)
        .map(|i| Block::new(pb, &format!("{name}.{i}"), cfg.embed_dim, cfg.num_heads, cfg.mlp_ratio))
        .collect()
}

impl EncoderSide {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let r = cfg.num_registers;
        Ok(Self {
            stem_v: ModalityStem::new(pb, Modality::Visual, cfg.visual_patch_dim(), cfg.visual_grid(), d, r)?,
            stem_a: ModalityStem::new(pb, Modality::Audio, cfg.audio_patch_dim(), cfg.audio_grid(), d, r)?,
            enc_v: blocks(pb, "enc_v", cfg.encoder_depth, cfg)?,
            enc_a: blocks(pb, "enc_a", cfg.encoder_depth, cfg)?,
            joint: (0..cfg.joint_depth)
                .map(|i| BlockWeights::new(pb, &format!("joint.{i}"), d, cfg.num_heads, cfg.mlp_ratio))
                .collect::<Result<_>>()?,
            norms_v: JointNorms::new(pb, "norms_v", cfg.joint_depth, d)?,
            norms_a: JointNorms::new(pb, "norms_a", cfg.joint_depth, d)?,
            norms_fuse: JointNorms::new(pb, "norms_fuse", cfg.joint_depth, d)?,
            heads: cfg.num_heads,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            stem_v: self.stem_v.detached(),
            stem_a: self.stem_a.detached(),
            enc_v: self.enc_v.iter().map(Block::detached).collect(),
            enc_a: self.enc_a.iter().map(Block::detached).collect(),
            joint: self.joint.iter().map(BlockWeights::detached).collect(),
            norms_v: self.norms_v.detached(),
            norms_a: self.norms_a.detached(),
            norms_fuse: self.norms_fuse.detached(),
            heads: self.heads,
        }
    }

    pub fn stem(&self, m: Modality) -> &ModalityStem {
        match m {
            Modality::Visual => &self.stem_v,
            Modality::Audio => &self.stem_a,
        }
    }

    fn norms(&self, m: Modality) -> &JointNorms {
        match m {
            Modality::Visual => &self.norms_v,
            Modality::Audio => &self.norms_a,
        }
    }

    /// Patches `[B, P, patch_dim]` to a full token sequence.
    pub fn embed(&self, m: Modality, patches: &Tensor, frame_index: &[usize]) -> Result<TokenSequence> {
        embed_sequence(patches, self.stem(m), frame_index)
    }

    /// Run the modality's encoder stack. Layout and metadata are preserved.
    pub fn encode(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        let stack = match seq.modality {
            Modality::Visual => &self.enc_v,
            Modality::Audio => &self.enc_a,
        };
        let (_, l, d) = seq.tokens.dims3()?;
        if l != seq.len() || d != self.stem_v.pos_patch.dims()[1] {
            return Err(Error::Shape(format!(
                "sequence tensor [*, {l}, {d}] does not match its layout of {} tokens",
                seq.len()
            )));
        }
        let bias = special_block_bias(seq.layout(), seq.tokens.dtype())?;
        let mut x = seq.tokens.clone();
        for b in stack {
            x = b.forward(&x, Some(&bias))?.0;
        }
        Ok(TokenSequence {
            tokens: x,
            ..seq.clone()
        })
    }

    /// Single-modality joint pass. Returns `LN_m(J_m(Z)_0)` as `[B, D]` and the
    /// last joint layer's attention `[B, H, L, L]`.
    pub fn joint_single(&self, z: &TokenSequence) -> Result<(Tensor, Tensor)> {
        let norms = self.norms(z.modality);
        let bias = special_block_bias(z.layout(), z.tokens.dtype())?;
        let mut x = z.tokens.clone();
        let mut attn = None;
        for (w, n) in self.joint.iter().zip(&norms.blocks) {
            let (y, a) = block_forward(&x, w, n, Some(&bias))?;
            x = y;
            attn = Some(a);
        }
        let attn = match attn {
            Some(a) => a,
            None => uniform_attention(&x, self.heads)?,
        };
        let g = norms.out.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?;
        Ok((g, attn))
    }

    /// Fused joint pass over `[visual patches ; audio patches]`, each `[B, k_m, D]`.
    /// `expected` holds the visible patch counts; any other length is rejected.
    pub fn joint_fused(&self, zv: &Tensor, za: &Tensor, expected: (usize, usize)) -> Result<(Tensor, Tensor)> {
        let (_, lv, _) = zv.dims3()?;
        let (_, la, _) = za.dims3()?;
        let specials = 1 + self.stem_v.num_registers();
        for (name, got, want) in [("visual", lv, expected.0), ("audio", la, expected.1)] {
            if got == want + specials {
                return Err(Error::Shape(format!(
                    "{name} input to the fused pass has {got} tokens: global/register tokens must be stripped"
                )));
            }
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} input to the fused pass has {got} tokens, expected {want}"
                )));
            }
        }
        let mut x = Tensor::cat(&[zv, za], 1)?;
        let mut attn = None;
        for (w, n) in self.joint.iter().zip(&self.norms_fuse.blocks) {
            let (y, a) = block_forward(&x, w, n, None)?;
            x = y;
            attn = Some(a);
        }
        let attn = match attn {
            Some(a) => a,
            None => uniform_attention(&x, self.heads)?,
        };
        Ok((self.norms_fuse.out.forward(&x)?, attn))
    }

    /// Unmasked forward of both modalities; returns un-normalized globals.
    pub fn full_view_globals(&self, pv: &Tensor, pa: &Tensor, frame_index: &[usize]) -> Result<(Tensor, Tensor)> {
        let sv = self.encode(&self.embed(Modality::Visual, pv, frame_index)?)?;
        let sa = self.encode(&self.embed(Modality::Audio, pa, frame_index)?)?;
        Ok((self.joint_single(&sv)?.0, self.joint_single(&sa)?.0))
    }
}

/// Zero-depth joint layers still expose an attention map: uniform rows.
fn uniform_attention(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, l, _) = x.dims3()?;
    Ok(Tensor::full(1.0 / l as f64, (b, heads, l, l), x.device())?.to_dtype(x.dtype())?)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub embed: Linear,
    /// `[1, D]`
    pub mask_token: Tensor,
    pub pos_v: Tensor,
    pub pos_a: Tensor,
    pub type_v: Tensor,
    pub type_a: Tensor,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub head_v: Linear,
    pub head_a: Linear,
    pub pos_all: bool,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let init = Init::TruncNormal(INIT_STD);
        let (gv, ga) = (cfg.visual_grid(), cfg.audio_grid());
        Ok(Self {
            embed: Linear::new(pb, "dec.embed", d, d)?,
            mask_token: pb.param("dec.mask_token", &[1, d], init)?,
            pos_v: pb.param("dec.pos_v", &[gv.0 * gv.1, d], init)?,
            pos_a: pb.param("dec.pos_a", &[ga.0 * ga.1, d], init)?,
            type_v: pb.param("dec.type_v", &[1, d], init)?,
            type_a: pb.param("dec.type_a", &[1, d], init)?,
            blocks: blocks(pb, "dec", cfg.decoder_depth, cfg)?,
            norm: LayerNorm::new(pb, "dec.norm", d)?,
            head_v: Linear::new(pb, "dec.head_v", d, cfg.visual_patch_dim())?,
            head_a: Linear::new(pb, "dec.head_a", d, cfg.audio_patch_dim())?,
            pos_all: cfg.decoder_pos_all,
        })
    }

    /// Full-grid decoder input `[B, P, D]` for one modality block.
    fn fill(&self, vis: &Tensor, book: &MaskBookkeeping, pos: &Tensor, ty: &Tensor) -> Result<Tensor> {
        let (b, k, d) = vis.dims3()?;
        let m = book.masked_count();
        let p = book.num_patches;
        let seq = if m == 0 {
            vis.clone()
        } else {
            let masks = self.mask_token.unsqueeze(0)?.broadcast_as((b, m, d))?;
            Tensor::cat(&[vis, &masks], 1)?
        };
        let restore: Vec<Vec<usize>> = (0..b).map(|i| book.restore_order(i)).collect();
        let full = gather_rows(&seq, &restore)?;
        let pos = if self.pos_all {
            pos.unsqueeze(0)?.broadcast_as((b, p, d))?
        } else {
            let mut ind = vec![0f32; b * p];
            for (i, masked) in book.masked.iter().enumerate() {
                for &j in masked {
                    ind[i * p + j] = 1.0;
                }
            }
            let ind = Tensor::from_vec(ind, (b, p, 1), &Device::Cpu)?.to_dtype(vis.dtype())?;
            pos.unsqueeze(0)?.broadcast_mul(&ind)?
        };
        debug_assert_eq!(k + m, p);
        Ok(full.add(&pos)?.broadcast_add(ty)?)
    }

    /// Predictions `[B, |M_v|, pd_v]` and `[B, |M_a|, pd_a]`, rows in `masked` order.
    pub fn decode(&self, fused: &Tensor, book_v: &MaskBookkeeping, book_a: &MaskBookkeeping) -> Result<(Tensor, Tensor)> {
        let (b, l, _) = fused.dims3()?;
        let (kv, ka) = (book_v.visible_count(), book_a.visible_count());
        if l != kv + ka || book_v.visible.len() != b || book_a.visible.len() != b {
            return Err(Error::Shape(format!(
                "fused features [{b}, {l}] do not match {kv} visual + {ka} audio visible patches"
            )));
        }
        let x = self.embed.forward(fused)?;
        let xv = self.fill(&x.narrow(1, 0, kv)?, book_v, &self.pos_v, &self.type_v)?;
        let xa = self.fill(&x.narrow(1, kv, ka)?, book_a, &self.pos_a, &self.type_a)?;
        let mut h = Tensor::cat(&[&xv, &xa], 1)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None)?.0;
        }
        let h = self.norm.forward(&h)?;
        let (pv, pa) = (book_v.num_patches, book_a.num_patches);
        let out_v = self.head_v.forward(&h.narrow(1, 0, pv)?)?;
        let out_a = self.head_a.forward(&h.narrow(1, pv, pa)?)?;
        Ok((select_masked(&out_v, book_v)?, select_masked(&out_a, book_a)?))
    }
}

fn select_masked(out: &Tensor, book: &MaskBookkeeping) -> Result<Tensor> {
    let (b, _, pd) = out.dims3()?;
    if book.masked_count() == 0 {
        return Ok(Tensor::zeros((b, 0, pd), out.dtype(), out.device())?);
    }
    gather_rows(out, &book.masked)
}

/// Encoder side, decoder and their trainable variables.
#[derive(Debug, Clone)]
pub struct Student {
    pub enc: EncoderSide,
    pub dec: Decoder,
    pub params: ParamStore,
    pub cfg: ModelConfig,
}

impl Student {
    pub fn new(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, dtype, ParamSource::Init { seed })
    }

    pub fn from_values(cfg: &ModelConfig, values: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        Self::build(cfg, dtype, ParamSource::Copy(values))
    }

    fn build(cfg: &ModelConfig, dtype: DType, source: ParamSource) -> Result<Self> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(dtype, source);
        let enc = EncoderSide::new(&mut pb, cfg)?;
        let dec = Decoder::new(&mut pb, cfg)?;
        Ok(Self {
            enc,
            dec,
            params: pb.finish(),
            cfg: cfg.clone(),
        })
    }
}

/// Name → current value for every variable in `store`.
pub fn values_of(store: &ParamStore) -> BTreeMap<String, Tensor> {
    store
        .iter()
        .map(|(k, v)| (k.to_string(), v.as_tensor().detach()))
        .collect()
}

/// EMA mirror of the student's encoder side. Forward passes use detached
/// views of the variables, so no graph ever reaches teacher parameters.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub enc: EncoderSide,
    pub params: ParamStore,
}

#[derive(Debug, Clone)]
pub struct TeacherOutputs {
    /// `[B, D]`, un-normalized.
    pub g_v: Tensor,
    pub g_a: Tensor,
    pub priority_v: Vec<PriorityScores>,
    pub priority_a: Vec<PriorityScores>,
}

impl Teacher {
    /// Deep copy of the student's encoder side.
    pub fn from_student(student: &Student) -> Result<Self> {
        Self::from_values(&student.cfg, &values_of(&student.params), student.params.dtype())
    }

    pub fn from_values(cfg: &ModelConfig, values: &BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut pb = ParamBuilder::new(dtype, ParamSource::Copy(values));
        let enc = EncoderSide::new(&mut pb, cfg)?.detached();
        Ok(Self {
            enc,
            params: pb.finish(),
        })
    }

    /// Full-view globals and masking priorities. Inputs must be unmasked.
    pub fn forward(&self, full_v: &TokenSequence, full_a: &TokenSequence, source: GuidanceSource) -> Result<TeacherOutputs> {
        for s in [full_v, full_a] {
            let p = self.enc.stem(s.modality).num_patches();
            if s.num_patch_tokens() != p {
                return Err(Error::InvalidArgument(format!(
                    "teacher expects unmasked {} input with {p} patches, got {}",
                    s.modality.as_str(),
                    s.num_patch_tokens()
                )));
            }
        }
        let zv = self.enc.encode(&detach_seq(full_v))?;
        let za = self.enc.encode(&detach_seq(full_a))?;
        let (g_v, attn_v) = self.enc.joint_single(&zv)?;
        let (g_a, attn_a) = self.enc.joint_single(&za)?;
        let (priority_v, priority_a) = match source {
            GuidanceSource::PerModality => (
                teacher_priorities(&attn_v, zv.layout(), "joint_v/last/head-mean/global-row")?,
                teacher_priorities(&attn_a, za.layout(), "joint_a/last/head-mean/global-row")?,
            ),
            GuidanceSource::Fused => {
                let (pv, pa) = (zv.num_patch_tokens(), za.num_patch_tokens());
                let (_, attn) = self.enc.joint_fused(&zv.patch_tokens()?, &za.patch_tokens()?, (pv, pa))?;
                fused_priorities(&attn, pv, pa)?
            }
        };
        Ok(TeacherOutputs {
            g_v: g_v.detach(),
            g_a: g_a.detach(),
            priority_v,
            priority_a,
        })
    }

    /// Embed raw patches with the teacher's stems, then [`Teacher::forward`].
    pub fn forward_patches(&self, pv: &Tensor, pa: &Tensor, frame_index: &[usize], source: GuidanceSource) -> Result<TeacherOutputs> {
        let sv = self.enc.embed(Modality::Visual, &pv.detach(), frame_index)?;
        let sa = self.enc.embed(Modality::Audio, &pa.detach(), frame_index)?;
        self.forward(&sv, &sa, source)
    }
}

fn detach_seq(s: &TokenSequence) -> TokenSequence {
    TokenSequence {
        tokens: s.tokens.detach(),
        ..s.clone()
    }
}

/// `θ_t ← m·θ_t + (1 − m)·θ_s` for every teacher variable.
pub fn ema_update(teacher: &Teacher, student: &Student, m: f64) -> Result<()> {
    for (name, t) in teacher.params.iter() {
        let s = student
            .params
            .get(name)
            .ok_or_else(|| Error::Shape(format!("student has no parameter `{name}`")))?;
        if s.dims() != t.dims() {
            return Err(Error::Shape(format!(
                "`{name}`: teacher {:?} vs student {:?}",
                t.dims(),
                s.dims()
            )));
        }
        let next = (t.as_tensor().detach().affine(m, 0.0)? + s.as_tensor().detach().affine(1.0 - m, 0.0)?)?;
        t.set(&next)?;
    }
    Ok(())
}
