//! Retrieval with diagonal-averaged similarity, attention probing over
//! per-frame global tokens, and embedding export.

use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::SliceRandom;

use crate::binmap::{BinMap, Value};
use crate::data::shard::{open_reader, write_map_shards, ReaderOptions, ShardIndex};
use crate::data::{AVSample, Label};
use crate::error::{Error, Result};
use crate::model::Student;
use crate::nn::{l2_normalize, Block, Init, LayerNorm, Linear, ParamBuilder, ParamSource, INIT_STD};
use crate::optim::Adam;
use crate::rng::{stream, Purpose};
use crate::training::batch_at_frames;

/// Per-frame unit global tokens of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEmbedding {
    pub sample_id: String,
    /// `[T][D]`
    pub g_v: Vec<Vec<f32>>,
    pub g_a: Vec<Vec<f32>>,
    pub label: Option<Label>,
}

impl ClipEmbedding {
    pub fn frames(&self) -> usize {
        self.g_v.len()
    }

    pub fn to_map(&self) -> BinMap {
        let mut m = BinMap::new();
        m.insert("id", Value::Str(self.sample_id.clone()));
        let t = self.g_v.len();
        let d = self.g_v.first().map_or(0, Vec::len);
        m.insert_f32("g_v", &[t, d], self.g_v.concat());
        m.insert_f32("g_a", &[t, d], self.g_a.concat());
        match &self.label {
            Some(Label::Class(c)) => m.insert("label", Value::U32List(vec![*c])),
            Some(Label::MultiHot(v)) => m.insert_f32("label_multi", &[v.len()], v.clone()),
            None => {}
        }
        m
    }

    pub fn from_map(m: &BinMap) -> Result<Self> {
        let rows = |key: &str| -> Result<Vec<Vec<f32>>> {
            let (shape, data) = m.f32s(key)?;
            let d = shape.get(1).copied().unwrap_or(0).max(1);
            Ok(data.chunks(d).map(<[f32]>::to_vec).collect())
        };
        let label = if let Ok(c) = m.u32s("label") {
            c.first().map(|c| Label::Class(*c))
        } else if let Ok((_, v)) = m.f32s("label_multi") {
            Some(Label::MultiHot(v.to_vec()))
        } else {
            None
        };
        Ok(Self {
            sample_id: m.str("id")?.to_string(),
            g_v: rows("g_v")?,
            g_a: rows("g_a")?,
            label,
        })
    }
}

/// Full-view student globals for every frame of every clip.
pub fn embed_clips(student: &Student, samples: &[AVSample], chunk: usize) -> Result<Vec<ClipEmbedding>> {
    let enc = student.enc.detached();
    let dtype = student.params.dtype();
    let mut out: Vec<ClipEmbedding> = samples
        .iter()
        .map(|s| ClipEmbedding {
            sample_id: s.sample_id.clone(),
            g_v: Vec::new(),
            g_a: Vec::new(),
            label: s.label.clone(),
        })
        .collect();
    let t_count = samples.first().map_or(0, AVSample::num_frames);
    if samples.iter().any(|s| s.num_frames() != t_count) {
        return Err(Error::Data("clips differ in frame count".into()));
    }
    for t in 0..t_count {
        for (c, part) in samples.chunks(chunk.max(1)).enumerate() {
            let refs: Vec<&AVSample> = part.iter().collect();
            let keys: Vec<u64> = (0..part.len() as u64).collect();
            let b = batch_at_frames(&refs, &vec![t; part.len()], &keys, &student.cfg, dtype)?;
            let (gv, ga) = enc.full_view_globals(&b.pv, &b.pa, &b.frame_index)?;
            let gv = l2_normalize(&gv)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            let ga = l2_normalize(&ga)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
            for (i, (v, a)) in gv.into_iter().zip(ga).enumerate() {
                let e = &mut out[c * chunk.max(1) + i];
                e.g_v.push(v);
                e.g_a.push(a);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Visual queries against audio candidates.
    VisualToAudio,
    AudioToVisual,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::VisualToAudio => "va",
            Direction::AudioToVisual => "av",
        }
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "va" | "v2a" => Ok(Direction::VisualToAudio),
            "av" | "a2v" => Ok(Direction::AudioToVisual),
            _ => Err(Error::InvalidArgument(format!("unknown direction `{s}` (expected va or av)"))),
        }
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Mean over `t` of `cos(q_t, c_t)` between the query's modality and the
/// candidate's other modality.
pub fn clip_similarity(q: &ClipEmbedding, c: &ClipEmbedding, direction: Direction) -> Result<f64> {
    let (qs, cs) = match direction {
        Direction::VisualToAudio => (&q.g_v, &c.g_a),
        Direction::AudioToVisual => (&q.g_a, &c.g_v),
    };
    if qs.len() != cs.len() || qs.is_empty() {
        return Err(Error::Shape(format!(
            "clips have {} and {} frames",
            qs.len(),
            cs.len()
        )));
    }
    Ok(qs.iter().zip(cs).map(|(a, b)| cosine(a, b)).sum::<f64>() / qs.len() as f64)
}

pub fn score_matrix(queries: &[ClipEmbedding], gallery: &[ClipEmbedding], direction: Direction) -> Result<Vec<Vec<f64>>> {
    queries
        .iter()
        .map(|q| gallery.iter().map(|c| clip_similarity(q, c, direction)).collect())
        .collect()
}

/// 1-based rank of candidate `gt` in `row`: higher score first, lower index first on ties.
pub fn rank_of(row: &[f64], gt: usize) -> usize {
    let s = row[gt];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < gt))
        .count()
}

pub fn recall_at_k(scores: &[Vec<f64>], gt: &[usize], k: usize) -> Result<f64> {
    if scores.len() != gt.len() || scores.is_empty() {
        return Err(Error::Shape(format!("{} score rows for {} queries", scores.len(), gt.len())));
    }
    let mut hits = 0usize;
    for (row, &g) in scores.iter().zip(gt) {
        if g >= row.len() {
            return Err(Error::InvalidArgument(format!("ground truth {g} outside {} candidates", row.len())));
        }
        if rank_of(row, g) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / scores.len() as f64)
}

#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub direction: Direction,
    pub scores: Vec<Vec<f64>>,
    /// `(K, recall)` pairs.
    pub recalls: Vec<(usize, f64)>,
}

impl RetrievalResult {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|r| r.0 == k).map(|r| r.1)
    }

    /// `direction\tR@k...` row.
    pub fn tsv_row(&self) -> String {
        let mut row = self.direction.as_str().to_string();
        for (_, r) in &self.recalls {
            row.push_str(&format!("\t{r:.4}"));
        }
        row
    }
}

pub fn tsv_header(ks: &[usize]) -> String {
    let mut h = "direction".to_string();
    for k in ks {
        h.push_str(&format!("\tR@{k}"));
    }
    h
}

/// Clip `i` of the gallery is the ground truth for query `i`.
pub fn retrieve(embs: &[ClipEmbedding], direction: Direction, ks: &[usize]) -> Result<RetrievalResult> {
    let scores = score_matrix(embs, embs, direction)?;
    let gt: Vec<usize> = (0..embs.len()).collect();
    let recalls = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(&scores, &gt, k)?)))
        .collect::<Result<_>>()?;
    Ok(RetrievalResult {
        direction,
        scores,
        recalls,
    })
}

/// Recall@k under `shuffles` random ground-truth permutations.
pub fn permutation_null(scores: &[Vec<f64>], k: usize, shuffles: usize, seed: u64) -> Result<Vec<f64>> {
    let mut gt: Vec<usize> = (0..scores.len()).collect();
    let mut r = stream(seed, Purpose::Generic, &[0x6e756c6c]);
    (0..shuffles)
        .map(|_| {
            gt.shuffle(&mut r);
            recall_at_k(scores, &gt, k)
        })
        .collect()
}

/// Empirical quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Which global sequences a probe reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeInput {
    AudioVisual,
    Audio,
    Visual,
}

impl FromStr for ProbeInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "av" => Ok(ProbeInput::AudioVisual),
            "a" => Ok(ProbeInput::Audio),
            "v" => Ok(ProbeInput::Visual),
            _ => Err(Error::InvalidArgument(format!("unknown probe modality `{s}` (expected av, a or v)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub heads: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            heads: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeMetrics {
    /// Single-label top-1 accuracy on the test split.
    pub top1: Option<f64>,
    /// Multi-label mean average precision on the test split.
    pub map: Option<f64>,
    pub final_train_loss: f64,
    /// Norm of every gradient that reached encoder parameters (0 when frozen).
    pub encoder_grad_norm: f64,
}

enum Targets {
    Classes(Vec<usize>, usize),
    MultiHot(Vec<Vec<f32>>),
}

fn targets(embs: &[ClipEmbedding]) -> Result<Targets> {
    let mut classes = Vec::new();
    let mut multi = Vec::new();
    for e in embs {
        match &e.label {
            Some(Label::Class(c)) => classes.push(*c as usize),
            Some(Label::MultiHot(v)) => multi.push(v.clone()),
            None => return Err(Error::Data(format!("clip `{}` has no label", e.sample_id))),
        }
    }
    match (classes.is_empty(), multi.is_empty()) {
        (false, true) => {
            let k = classes.iter().max().map_or(0, |m| m + 1);
            Ok(Targets::Classes(classes, k))
        }
        (true, false) => Ok(Targets::MultiHot(multi)),
        _ => Err(Error::Data("mixed or missing label kinds".into())),
    }
}

/// `[N, T, W]` probe input rows.
fn probe_features(embs: &[ClipEmbedding], input: ProbeInput) -> Result<Tensor> {
    let t = embs.first().map_or(0, ClipEmbedding::frames);
    let mut flat = Vec::new();
    let mut width = 0;
    for e in embs {
        if e.frames() != t {
            return Err(Error::Data("clips differ in frame count".into()));
        }
        for step in 0..t {
            let row: Vec<f32> = match input {
                ProbeInput::AudioVisual => [e.g_v[step].as_slice(), e.g_a[step].as_slice()].concat(),
                ProbeInput::Audio => e.g_a[step].clone(),
                ProbeInput::Visual => e.g_v[step].clone(),
            };
            width = row.len();
            flat.extend(row);
        }
    }
    Ok(Tensor::from_vec(flat, (embs.len(), t, width), &Device::Cpu)?)
}

struct ProbeHead {
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
}

impl ProbeHead {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (n, _, w) = x.dims3()?;
        let cls = self.cls.unsqueeze(0)?.broadcast_as((n, 1, w))?;
        let mut h = Tensor::cat(&[&cls, x], 1)?.broadcast_add(&self.pos)?;
        for b in &self.blocks {
            h = b.forward(&h, None)?.0;
        }
        self.out.forward(&self.norm.forward(&h.narrow(1, 0, 1)?.squeeze(1)?)?)
    }
}

fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let total = positive.iter().filter(|p| **p).count();
    if total == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let (mut hits, mut acc) = (0usize, 0.0);
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(acc / total as f64)
}

/// Train a CLS-prepended two-block transformer head on frozen per-frame
/// globals of `train`, then score `test`. Cross-entropy for class labels,
/// binary cross-entropy for multi-hot labels.
pub fn attention_probe_train(
    student: &Student,
    train: &[ClipEmbedding],
    test: &[ClipEmbedding],
    input: ProbeInput,
    cfg: &ProbeConfig,
) -> Result<ProbeMetrics> {
    let x_train = probe_features(train, input)?;
    let x_test = probe_features(test, input)?;
    let y_train = targets(train)?;
    let y_test = targets(test)?;
    let (_, t, w) = x_train.dims3()?;
    let classes = match (&y_train, &y_test) {
        (Targets::Classes(_, a), Targets::Classes(_, b)) => *a.max(b),
        (Targets::MultiHot(v), Targets::MultiHot(_)) => v[0].len(),
        _ => return Err(Error::Data("train and test label kinds differ".into())),
    };
    let heads = if w % cfg.heads == 0 { cfg.heads } else { 1 };
    let mut pb = ParamBuilder::new(DType::F32, ParamSource::Init { seed: cfg.seed ^ 0x7072_6f62 });
    let head = ProbeHead {
        cls: pb.param("probe.cls", &[1, w], Init::TruncNormal(INIT_STD))?,
        pos: pb.param("probe.pos", &[t + 1, w], Init::TruncNormal(INIT_STD))?,
        blocks: (0..2)
            .map(|i| Block::new(&mut pb, &format!("probe.{i}"), w, heads, 2))
            .collect::<Result<_>>()?,
        norm: LayerNorm::new(&mut pb, "probe.norm", w)?,
        out: Linear::new(&mut pb, "probe.out", w, classes)?,
    };
    let params = pb.finish();
    let mut adam = Adam::default();
    let n = train.len();
    let bs = cfg.batch_size.clamp(1, n.max(1));
    let steps_per_epoch = n.div_ceil(bs);
    let total_steps = (cfg.epochs * steps_per_epoch) as u64;
    let mut last_loss = f64::NAN;
    let mut grad_sq = 0.0f64;
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Probe, &[epoch as u64]));
        for chunk in order.chunks(bs) {
            step += 1;
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let logits = head.forward(&x_train.index_select(&idx, 0)?)?;
            let loss = match &y_train {
                Targets::Classes(y, _) => {
                    let y: Vec<u32> = chunk.iter().map(|&i| y[i] as u32).collect();
                    let onehot = Tensor::from_vec(y, chunk.len(), &Device::Cpu)?
                        .to_dtype(DType::I64)?;
                    cross_entropy(&logits, &onehot, classes)?
                }
                Targets::MultiHot(y) => {
                    let rows: Vec<f32> = chunk.iter().flat_map(|&i| y[i].clone()).collect();
                    let y = Tensor::from_vec(rows, (chunk.len(), classes), &Device::Cpu)?;
                    binary_cross_entropy(&logits, &y)?
                }
            };
            last_loss = loss.to_scalar::<f32>()? as f64;
            let grads = loss.backward()?;
            for (_, v) in student.params.iter() {
                if let Some(g) = grads.get(v.as_tensor()) {
                    grad_sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
                }
            }
            let lr = crate::training::lr_at(step, (total_steps / 10).max(1), total_steps, cfg.lr);
            adam.step(&params, &grads, lr)?;
        }
    }
    let logits = head.forward(&x_test)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let (top1, map) = match &y_test {
        Targets::Classes(y, _) => {
            let correct = logits
                .iter()
                .zip(y)
                .filter(|(row, &c)| {
                    let best = (0..row.len())
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap_or(0);
                    best == c
                })
                .count();
            (Some(correct as f64 / y.len().max(1) as f64), None)
        }
        Targets::MultiHot(y) => {
            let aps: Vec<f64> = (0..classes)
                .filter_map(|c| {
                    let s: Vec<f64> = logits.iter().map(|r| r[c]).collect();
                    let p: Vec<bool> = y.iter().map(|r| r[c] > 0.5).collect();
                    average_precision(&s, &p)
                })
                .collect();
            (None, Some(aps.iter().sum::<f64>() / aps.len().max(1) as f64))
        }
    };
    Ok(ProbeMetrics {
        top1,
        map,
        final_train_loss: last_loss,
        encoder_grad_norm: grad_sq.sqrt(),
    })
}

/// Attention probe reading a single modality's global sequence.
pub fn unimodal_probe(
    student: &Student,
    train: &[ClipEmbedding],
    test: &[ClipEmbedding],
    input: ProbeInput,
    cfg: &ProbeConfig,
) -> Result<ProbeMetrics> {
    if input == ProbeInput::AudioVisual {
        return Err(Error::InvalidArgument("unimodal probe needs `a` or `v`".into()));
    }
    attention_probe_train(student, train, test, input, cfg)
}

fn cross_entropy(logits: &Tensor, y: &Tensor, classes: usize) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    let logp = shifted.broadcast_sub(&lse)?;
    let n = y.dim(0)?;
    let ys = y.to_vec1::<i64>()?;
    let mut onehot = vec![0f32; n * classes];
    for (i, c) in ys.iter().enumerate() {
        onehot[i * classes + *c as usize] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (n, classes), &Device::Cpu)?.to_dtype(logits.dtype())?;
    Ok(((logp * onehot)?.sum_all()? / -(n as f64))?)
}

fn binary_cross_entropy(logits: &Tensor, y: &Tensor) -> Result<Tensor> {
    // softplus(x) - y*x, with softplus(x) = max(x,0) + ln(1 + e^{-|x|})
    let relu = logits.relu()?;
    let soft = (relu + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let per = (soft - (y * logits)?)?;
    Ok(per.mean_all()?)
}

/// Write embeddings as shards readable by the corpus reader.
pub fn export_embeddings(embs: &[ClipEmbedding], out_dir: &Path, per_shard: usize) -> Result<ShardIndex> {
    write_map_shards(embs.iter().map(|e| Ok(e.to_map())), out_dir, per_shard)
}

/// Read exported embeddings back in write order.
pub fn read_embeddings(index: &ShardIndex) -> Result<Vec<ClipEmbedding>> {
    open_reader(index, ReaderOptions::default())?
        .map(|m| m.and_then(|m| ClipEmbedding::from_map(&m)))
        .collect()
}
