//! Patch extraction and token embedding.
//!
//! Every embedded sequence is laid out `[global | registers | patches]`:
//! position 0 is the global token, positions `1..=R` are registers and the
//! patch tokens follow in row-major grid order.

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::nn::{gather_rows, Init, Linear, ParamBuilder, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Audio,
}

impl Modality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
        }
    }

    pub fn index(&self) -> u64 {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
        }
    }
}

/// Split an `[H, W, C]` row-major array into non-overlapping square patches.
/// Returns `[P, patch * patch * C]`, patches in row-major grid order, each
/// flattened as `(row, col, channel)`.
pub fn patchify(input: &[f32], height: usize, width: usize, channels: usize, patch: usize) -> Result<Vec<f32>> {
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::Shape(format!(
            "{height}x{width} is not divisible into {patch}x{patch} patches"
        )));
    }
    if input.len() != height * width * channels {
        return Err(Error::Shape(format!(
            "input has {} values, expected {height}x{width}x{channels}",
            input.len()
        )));
    }
    let (gr, gc) = (height / patch, width / patch);
    let mut out = Vec::with_capacity(input.len());
    for pr in 0..gr {
        for pc in 0..gc {
            for y in 0..patch {
                let row = (pr * patch + y) * width + pc * patch;
                out.extend_from_slice(&input[row * channels..(row + patch) * channels]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &[f32], grid: (usize, usize), channels: usize, patch: usize) -> Result<Vec<f32>> {
    let (gr, gc) = grid;
    let pd = patch * patch * channels;
    if patches.len() != gr * gc * pd {
        return Err(Error::Shape(format!(
            "{} values do not form a {gr}x{gc} grid of {pd}-dim patches",
            patches.len()
        )));
    }
    let width = gc * patch;
    let mut out = vec![0f32; patches.len()];
    for pr in 0..gr {
        for pc in 0..gc {
            let src = &patches[(pr * gc + pc) * pd..(pr * gc + pc + 1) * pd];
            for y in 0..patch {
                let row = (pr * patch + y) * width + pc * patch;
                out[row * channels..(row + patch) * channels]
                    .copy_from_slice(&src[y * patch * channels..(y + 1) * patch * channels]);
            }
        }
    }
    Ok(out)
}

/// Learned embedding parameters of one modality.
#[derive(Debug, Clone)]
pub struct ModalityStem {
    pub modality: Modality,
    pub proj: Linear,
    /// `[P, D]`
    pub pos_patch: Tensor,
    /// `[1 + R, D]`: global position first, then one entry per register.
    pub pos_special: Tensor,
    /// `[1, D]`
    pub global: Tensor,
    /// `[R, D]`, absent when `R = 0`.
    pub registers: Option<Tensor>,
    pub grid: (usize, usize),
}

impl ModalityStem {
    pub fn new(
        pb: &mut ParamBuilder,
        modality: Modality,
        patch_dim: usize,
        grid: (usize, usize),
        dim: usize,
        num_registers: usize,
    ) -> Result<Self> {
        let name = modality.as_str();
        let p = grid.0 * grid.1;
        let init = Init::TruncNormal(INIT_STD);
        Ok(Self {
            modality,
            proj: Linear::new(pb, &format!("{name}.proj"), patch_dim, dim)?,
            pos_patch: pb.param(&format!("{name}.pos_patch"), &[p, dim], init)?,
            pos_special: pb.param(&format!("{name}.pos_special"), &[1 + num_registers, dim], init)?,
            global: pb.param(&format!("{name}.global"), &[1, dim], init)?,
            registers: if num_registers > 0 {
                Some(pb.param(&format!("{name}.registers"), &[num_registers, dim], init)?)
            } else {
                None
            },
            grid,
        })
    }

    pub fn num_registers(&self) -> usize {
        self.registers.as_ref().map_or(0, |r| r.dims()[0])
    }

    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn patch_dim(&self) -> usize {
        self.proj.w.dims()[0]
    }

    /// `[1 + R, D]` embedded special tokens.
    pub fn specials(&self) -> Result<Tensor> {
        let raw = match &self.registers {
            Some(r) => Tensor::cat(&[&self.global, r], 0)?,
            None => self.global.clone(),
        };
        Ok((raw + &self.pos_special)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            modality: self.modality,
            proj: self.proj.detached(),
            pos_patch: self.pos_patch.detach(),
            pos_special: self.pos_special.detach(),
            global: self.global.detach(),
            registers: self.registers.as_ref().map(Tensor::detach),
            grid: self.grid,
        }
    }
}

/// A batch of embedded sequences sharing one layout.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `[B, 1 + R + P', D]`
    pub tokens: Tensor,
    pub modality: Modality,
    pub grid: (usize, usize),
    pub num_registers: usize,
    /// Grid position of each patch token, per sample, in sequence order.
    pub patch_ids: Vec<Vec<usize>>,
    /// Frame index each sample was cut from.
    pub frame_index: Vec<usize>,
}

impl TokenSequence {
    pub fn batch(&self) -> usize {
        self.patch_ids.len()
    }

    pub fn num_special(&self) -> usize {
        1 + self.num_registers
    }

    pub fn num_patch_tokens(&self) -> usize {
        self.patch_ids.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.num_special() + self.num_patch_tokens()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn layout(&self) -> SeqLayout {
        SeqLayout {
            num_special: self.num_special(),
            num_patches: self.num_patch_tokens(),
        }
    }

    /// Patch tokens only, `[B, P', D]`.
    pub fn patch_tokens(&self) -> Result<Tensor> {
        Ok(self
            .tokens
            .narrow(1, self.num_special(), self.num_patch_tokens())?)
    }

    /// Keep the special tokens plus the given patch positions (indices into
    /// the current patch tokens), per sample.
    pub fn select_patches(&self, keep: &[Vec<usize>]) -> Result<TokenSequence> {
        let s = self.num_special();
        let rows: Vec<Vec<usize>> = keep
            .iter()
            .map(|k| (0..s).chain(k.iter().map(|i| s + i)).collect())
            .collect();
        let patch_ids = keep
            .iter()
            .zip(&self.patch_ids)
            .map(|(k, ids)| k.iter().map(|&i| ids[i]).collect())
            .collect();
        Ok(TokenSequence {
            tokens: gather_rows(&self.tokens, &rows)?,
            modality: self.modality,
            grid: self.grid,
            num_registers: self.num_registers,
            patch_ids,
            frame_index: self.frame_index.clone(),
        })
    }
}

/// Counts of special and patch tokens in a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqLayout {
    pub num_special: usize,
    pub num_patches: usize,
}

impl SeqLayout {
    pub fn len(&self) -> usize {
        self.num_special + self.num_patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Project `[B, P, patch_dim]` patches and prepend the global and register tokens.
pub fn embed_sequence(patches: &Tensor, stem: &ModalityStem, frame_index: &[usize]) -> Result<TokenSequence> {
    let (b, p, pd) = patches.dims3()?;
    if pd != stem.patch_dim() || p != stem.num_patches() {
        return Err(Error::Shape(format!(
            "{} stem expects [*, {}, {}] patches, got [{b}, {p}, {pd}]",
            stem.modality.as_str(),
            stem.num_patches(),
            stem.patch_dim()
        )));
    }
    if frame_index.len() != b {
        return Err(Error::Shape(format!("{} frame indices for batch {b}", frame_index.len())));
    }
    let patch_tok = stem.proj.forward(patches)?.broadcast_add(&stem.pos_patch)?;
    let specials = stem.specials()?;
    let (s, d) = specials.dims2()?;
    let specials = specials.unsqueeze(0)?.broadcast_as((b, s, d))?;
    let tokens = Tensor::cat(&[&specials, &patch_tok], 1)?;
    Ok(TokenSequence {
        tokens,
        modality: stem.modality,
        grid: stem.grid,
        num_registers: stem.num_registers(),
        patch_ids: vec![(0..p).collect(); b],
        frame_index: frame_index.to_vec(),
    })
}

/// Stack per-sample patch arrays into a `[B, P, patch_dim]` tensor.
pub fn patch_batch(per_sample: &[Vec<f32>], patch_dim: usize, dtype: candle_core::DType) -> Result<Tensor> {
    let b = per_sample.len();
    let p = per_sample.first().map_or(0, |v| v.len() / patch_dim);
    let mut flat = Vec::with_capacity(b * p * patch_dim);
    for v in per_sample {
        if v.len() != p * patch_dim {
            return Err(Error::Shape("patch arrays differ in size".into()));
        }
        flat.extend_from_slice(v);
    }
    Ok(Tensor::from_vec(flat, (b, p, patch_dim), &Device::Cpu)?.to_dtype(dtype)?)
}
