//! Synthetic audio-visual corpus with known cross-modal structure.
//!
//! Class `c` fixes a visual texture (oriented sinusoid with class colour and
//! spatial frequency) and an audio template (harmonic stack whose fundamental
//! and modulation rate depend on `c`). Each clip also draws instance latents
//! (a pitch/frequency offset, a phase and a per-frame intensity envelope)
//! that both modalities share when the pair is matched. With probability
//! `1 - correlation` the audio comes from an unrelated draw: a uniformly
//! resampled class and fresh latents.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::data::sample::{AVSample, Label};
use crate::data::shard::{write_shards, ShardIndex};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng};

pub const DEFAULT_SAMPLES_PER_SHARD: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    /// Probability that a clip's audio shares its visual class and latents.
    pub correlation: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn total(&self) -> usize {
        self.num_classes * self.samples_per_class
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 {
            return Err(Error::InvalidArgument(
                "num_classes and samples_per_class must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.correlation) {
            return Err(Error::InvalidArgument(format!(
                "correlation {} is outside [0, 1]",
                self.correlation
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

struct Latents {
    class: usize,
    shift: f64,
    phase: f64,
    envelope: Vec<f64>,
}

impl Latents {
    fn draw(class: usize, frames: usize, rng: &mut StreamRng) -> Self {
        Self {
            class,
            shift: rng.random::<f64>(),
            phase: rng.random::<f64>() * 2.0 * PI,
            envelope: (0..frames).map(|_| 0.3 + 0.7 * rng.random::<f64>()).collect(),
        }
    }
}

fn render_frames(lat: &Latents, k: usize, cfg: &ModelConfig, sigma: f64, rng: &mut StreamRng) -> Vec<f32> {
    let (h, w) = cfg.image_size;
    let t_count = cfg.frames_per_clip;
    let c = lat.class as f64;
    let theta = PI * c / k as f64;
    let freq = (1.5 + 0.75 * (lat.class % 4) as f64) * (1.0 + 0.6 * lat.shift);
    let colour: Vec<f64> = (0..3)
        .map(|ch| 0.55 + 0.45 * (2.0 * PI * c / k as f64 + 2.0 * PI * ch as f64 / 3.0).cos())
        .collect();
    let (ct, st) = (theta.cos(), theta.sin());
    let mut out = Vec::with_capacity(t_count * h * w * 3);
    for t in 0..t_count {
        let amp = 0.45 * lat.envelope[t];
        let phase = lat.phase + 0.8 * t as f64;
        for y in 0..h {
            let v = y as f64 / h as f64;
            for x in 0..w {
                let u = x as f64 / w as f64;
                let wave = (2.0 * PI * freq * (u * ct + v * st) + phase).sin();
                for col in &colour {
                    let noise: f64 = rng.sample(StandardNormal);
                    let px = 0.5 + amp * col * wave + sigma * noise;
                    out.push(px.clamp(0.0, 1.0) as f32);
                }
            }
        }
    }
    out
}

fn render_segments(lat: &Latents, k: usize, cfg: &ModelConfig, sigma: f64, rng: &mut StreamRng) -> Vec<f32> {
    let (mels, frames) = cfg.audio_segment_size;
    let t_count = cfg.frames_per_clip;
    let spacing = mels as f64 / (k as f64 + 2.0);
    let fundamental = 1.0 + spacing * (lat.class as f64 + 0.35 * lat.shift);
    let partials: Vec<(f64, f64)> = (1..=4)
        .map(|hm| (fundamental * (hm as f64).powf(0.7), 1.0 / hm as f64))
        .filter(|(pos, _)| *pos < mels as f64 + 2.0)
        .collect();
    let rate = 1.0 + (lat.class % 3) as f64 + lat.shift;
    let floor = 0.02f64;
    let mut out = Vec::with_capacity(t_count * mels * frames);
    for t in 0..t_count {
        let env = lat.envelope[t];
        for m in 0..mels {
            let profile: f64 = partials
                .iter()
                .map(|(pos, a)| a * (-(m as f64 - pos).powi(2) / (2.0 * 0.8 * 0.8)).exp())
                .sum();
            for tau in 0..frames {
                let modulation =
                    0.6 + 0.4 * (2.0 * PI * rate * tau as f64 / frames as f64 + lat.phase).sin();
                let energy = env * modulation * profile;
                let level = ((floor + energy).ln() - floor.ln()) / -floor.ln();
                let noise: f64 = rng.sample(StandardNormal);
                out.push((level + sigma * noise) as f32);
            }
        }
    }
    out
}

/// Generate sample `index` of the corpus described by `spec`.
pub fn synth_sample(spec: &SynthSpec, cfg: &ModelConfig, index: usize) -> AVSample {
    let k = spec.num_classes;
    let t_count = cfg.frames_per_clip;
    let mut r = rng::stream(spec.seed, Purpose::Synthetic, &[index as u64]);
    let visual = Latents::draw(index % k, t_count, &mut r);
    let matched = r.random::<f64>() < spec.correlation;
    let audio = if matched {
        Latents {
            class: visual.class,
            shift: visual.shift,
            phase: visual.phase,
            envelope: visual.envelope.clone(),
        }
    } else {
        let class = r.random_range(0..k);
        Latents::draw(class, t_count, &mut r)
    };
    let frames = render_frames(&visual, k, cfg, spec.noise_sigma, &mut r);
    let segments = render_segments(&audio, k, cfg, spec.noise_sigma, &mut r);
    let (h, w) = cfg.image_size;
    let (m, f) = cfg.audio_segment_size;
    AVSample {
        sample_id: format!("syn{}-{index:06}", spec.seed),
        frames,
        frames_shape: [t_count, h, w, 3],
        segments,
        segments_shape: [t_count, m, f],
        label: Some(Label::Class(visual.class as u32)),
        visual_class: Some(visual.class as u32),
        audio_class: Some(audio.class as u32),
    }
}

/// The whole corpus in memory, in index order.
pub fn synthetic_corpus(spec: &SynthSpec, cfg: &ModelConfig) -> Result<Vec<AVSample>> {
    spec.validate()?;
    Ok((0..spec.total()).map(|i| synth_sample(spec, cfg, i)).collect())
}

pub fn gen_synthetic_corpus_sharded(
    spec: &SynthSpec,
    cfg: &ModelConfig,
    out_dir: &Path,
    samples_per_shard: usize,
) -> Result<ShardIndex> {
    spec.validate()?;
    cfg.validate()?;
    write_shards(
        (0..spec.total()).map(|i| synth_sample(spec, cfg, i)),
        out_dir,
        samples_per_shard,
    )
}

pub fn gen_synthetic_corpus(spec: &SynthSpec, cfg: &ModelConfig, out_dir: &Path) -> Result<ShardIndex> {
    gen_synthetic_corpus_sharded(spec, cfg, out_dir, DEFAULT_SAMPLES_PER_SHARD)
}
