//! Parameter storage and the transformer building blocks.
//!
//! Layer norm and softmax are written with primitive tensor ops so every
//! path is differentiable in both f32 and f64.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub const LN_EPS: f64 = 1e-6;
/// Additive logit for blocked attention pairs; `exp` of it underflows to exactly 0.
pub const BLOCKED: f64 = -1e9;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal(0, std) truncated at two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Named trainable variables, ordered by name.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Flat f32 copy of every parameter, in name order.
    pub fn flat_values(&self) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(self.num_elements());
        for v in self.vars.values() {
            out.extend(v.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?);
        }
        Ok(out)
    }
}

/// Source of parameter values while a model is being assembled.
pub enum ParamSource<'a> {
    /// Fresh initialization from per-name random streams.
    Init { seed: u64 },
    /// Copy values by name (shapes must match).
    Copy(&'a BTreeMap<String, Tensor>),
}

/// Creates named variables and records them in a [`ParamStore`].
pub struct ParamBuilder<'a> {
    store: ParamStore,
    source: ParamSource<'a>,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(dtype: DType, source: ParamSource<'a>) -> Self {
        Self {
            store: ParamStore::new(dtype),
            source,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let dtype = self.store.dtype;
        let value = match &self.source {
            ParamSource::Init { seed } => {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::TruncNormal(std) => {
                        let mut r = rng::stream(*seed, Purpose::ParamInit, &[rng::hash_str(name)]);
                        (0..n)
                            .map(|_| loop {
                                let z: f64 = r.sample(StandardNormal);
                                if z.abs() <= 2.0 {
                                    break z * std;
                                }
                            })
                            .collect()
                    }
                };
                // Round through f32 so f32 and f64 models start from the same point.
                let data: Vec<f32> = data.into_iter().map(|x| x as f32).collect();
                Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?
            }
            ParamSource::Copy(values) => {
                let src = values
                    .get(name)
                    .ok_or_else(|| Error::Format(format!("missing parameter `{name}`")))?;
                if src.dims() != shape {
                    return Err(Error::Shape(format!(
                        "parameter `{name}`: expected {shape:?}, got {:?}",
                        src.dims()
                    )));
                }
                src.to_dtype(dtype)?.copy()?
            }
        };
        let var = Var::from_tensor(&value)?;
        let t = var.as_tensor().clone();
        if self.store.vars.insert(name.to_string(), var).is_some() {
            return Err(Error::Format(format!("duplicate parameter `{name}`")));
        }
        Ok(t)
    }

    pub fn finish(self) -> ParamStore {
        self.store
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[in, out]`
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, inp: usize, out: usize) -> Result<Self> {
        Ok(Self {
            w: pb.param(&format!("{name}.w"), &[inp, out], Init::TruncNormal(INIT_STD))?,
            b: pb.param(&format!("{name}.b"), &[out], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = *dims.last().unwrap();
        let rows = x.elem_count() / inp.max(1);
        let y = x
            .reshape((rows, inp))?
            .matmul(&self.w)?
            .broadcast_add(&self.b)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.dim(1)?;
        Ok(y.reshape(out_dims)?)
    }

    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub w: Tensor,
    pub b: Tensor,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            w: pb.param(&format!("{name}.w"), &[dim], Init::Ones)?,
            b: pb.param(&format!("{name}.b"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, &self.w, &self.b)
    }

    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
        }
    }
}

pub fn layer_norm(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(w)?.broadcast_add(b)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Row-wise L2 normalization.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(pb, &format!("{name}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(pb, &format!("{name}.proj"), dim, dim)?,
            heads,
        })
    }

    /// Self-attention over `[B, L, D]`; `bias` is an additive `[L, L]` logit mask.
    /// Returns the output and the attention probabilities `[B, H, L, L]`.
    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (b, l, d) = x.dims3()?;
        let hd = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, l, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let probs = softmax_last(&scores)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, l, d))?;
        Ok((self.proj.forward(&out)?, probs))
    }

    pub fn detached(&self) -> Self {
        Self {
            qkv: self.qkv.detached(),
            proj: self.proj.detached(),
            heads: self.heads,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(pb, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn detached(&self) -> Self {
        Self {
            fc1: self.fc1.detached(),
            fc2: self.fc2.detached(),
        }
    }
}

/// Attention + MLP weights of a pre-norm block, without its norms.
#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub attn: Attention,
    pub mlp: Mlp,
}

impl BlockWeights {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(pb, &format!("{name}.attn"), dim, heads)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, dim * mlp_ratio)?,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            attn: self.attn.detached(),
            mlp: self.mlp.detached(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockNorms {
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
}

impl BlockNorms {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(pb, &format!("{name}.norm1"), dim)?,
            norm2: LayerNorm::new(pb, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn detached(&self) -> Self {
        Self {
            norm1: self.norm1.detached(),
            norm2: self.norm2.detached(),
        }
    }
}

/// `x + attn(norm1(x))`, then `x + mlp(norm2(x))`.
pub fn block_forward(
    x: &Tensor,
    w: &BlockWeights,
    n: &BlockNorms,
    bias: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (a, probs) = w.attn.forward(&n.norm1.forward(x)?, bias)?;
    let x = (x + a)?;
    let x = (&x + w.mlp.forward(&n.norm2.forward(&x)?)?)?;
    Ok((x, probs))
}

/// A pre-norm block owning its norms.
#[derive(Debug, Clone)]
pub struct Block {
    pub weights: BlockWeights,
    pub norms: BlockNorms,
}

impl Block {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            weights: BlockWeights::new(pb, name, dim, heads, mlp_ratio)?,
            norms: BlockNorms::new(pb, name, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, bias: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        block_forward(x, &self.weights, &self.norms, bias)
    }

    pub fn detached(&self) -> Self {
        Self {
            weights: self.weights.detached(),
            norms: self.norms.detached(),
        }
    }
}

/// Index tensor on the CPU.
pub fn ids(v: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = v.iter().map(|&i| i as u32).collect();
    let n = v.len();
    Ok(Tensor::from_vec(v, n, &Device::Cpu)?)
}

/// Select rows of a `[B, L, D]` tensor: `rows[b]` lists the positions kept for sample `b`.
/// Every sample must keep the same number of rows.
pub fn gather_rows(x: &Tensor, rows: &[Vec<usize>]) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    if rows.len() != b {
        return Err(Error::Shape(format!("{} row lists for batch {b}", rows.len())));
    }
    let k = rows.first().map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(b * k);
    for (bi, r) in rows.iter().enumerate() {
        if r.len() != k {
            return Err(Error::Shape("ragged row selection".into()));
        }
        for &i in r {
            if i >= l {
                return Err(Error::Shape(format!("row {i} out of range for length {l}")));
            }
            flat.push(bi * l + i);
        }
    }
    Ok(x.reshape((b * l, d))?
        .index_select(&ids(&flat)?, 0)?
        .reshape((b, k, d))?)
}
