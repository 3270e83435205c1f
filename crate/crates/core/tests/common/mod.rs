#![allow(dead_code)]

pub mod grad;

use candle_core::{DType, Tensor, Var};

use tgdp::config::Config;
use tgdp::data::synth::{synthetic_corpus, SynthSpec};
use tgdp::data::AVSample;
use tgdp::training::{make_batch, Batch, TrainState};

/// A model small enough for finite differences: 16 visual and 8 audio patches.
pub fn tiny_config() -> Config {
    let mut c = Config::default();
    let m = &mut c.model;
    m.embed_dim = 16;
    m.num_heads = 2;
    m.encoder_depth = 1;
    m.decoder_depth = 1;
    m.mlp_ratio = 2;
    m.num_registers = 2;
    m.patch_size = 8;
    m.image_size = (32, 32);
    m.audio_segment_size = (16, 32);
    m.frames_per_clip = 2;
    let t = &mut c.train;
    t.batch_size = 4;
    t.steps = 20;
    t.warmup_steps = 5;
    t.seed = 11;
    c
}

pub fn tiny_corpus(cfg: &Config, n_per_class: usize) -> Vec<AVSample> {
    let spec = SynthSpec {
        num_classes: 4,
        samples_per_class: n_per_class,
        correlation: 1.0,
        noise_sigma: 0.05,
        seed: 5,
    };
    synthetic_corpus(&spec, &cfg.model).unwrap()
}

pub fn batch(cfg: &Config, corpus: &[AVSample], step: u64, dtype: DType) -> Batch {
    let n = cfg.train.batch_size;
    let samples: Vec<&AVSample> = corpus.iter().take(n).collect();
    let keys: Vec<u64> = (0..n as u64).collect();
    make_batch(&samples, &keys, step, cfg.train.seed, &cfg.model, dtype).unwrap()
}

pub fn state(cfg: &Config, dtype: DType) -> TrainState {
    TrainState::new(cfg, dtype).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs(t: &Tensor) -> f64 {
    scalar(&t.to_dtype(DType::F64).unwrap().abs().unwrap().max_all().unwrap())
}

/// Read element `i` of a flattened variable.
pub fn get_elem(var: &Var, i: usize) -> f64 {
    var.as_tensor()
        .flatten_all()
        .unwrap()
        .to_dtype(DType::F64)
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()[i]
}

/// Overwrite element `i` of a flattened variable.
pub fn set_elem(var: &Var, i: usize, value: f64) {
    let t = var.as_tensor();
    let mut v = t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    v[i] = value;
    let next = Tensor::from_vec(v, t.dims(), t.device())
        .unwrap()
        .to_dtype(t.dtype())
        .unwrap();
    var.set(&next).unwrap();
}

/// Central difference of `f` with respect to element `i` of `var`.
pub fn central_difference(var: &Var, i: usize, h: f64, mut f: impl FnMut() -> f64) -> f64 {
    let x = get_elem(var, i);
    set_elem(var, i, x + h);
    let up = f();
    set_elem(var, i, x - h);
    let down = f();
    set_elem(var, i, x);
    (up - down) / (2.0 * h)
}
