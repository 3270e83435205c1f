//! Run configuration.
//!
//! Configs are flat `key = value` text files. `#` starts a comment, booleans
//! are `true`/`false` and tuples are written `a,b`. Every key has a default,
//! so an empty file yields the desk-scale profile.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Zero gives an identity encoder.
    pub encoder_depth: usize,
    pub joint_depth: usize,
    pub decoder_depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: usize,
    pub num_registers: usize,
    pub patch_size: usize,
    /// (height, width) of a visual frame.
    pub image_size: (usize, usize),
    /// (mel_bins, frames) of one aligned spectrogram segment.
    pub audio_segment_size: (usize, usize),
    pub frames_per_clip: usize,
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
    /// Standardize each target patch before the reconstruction loss.
    pub norm_pix_loss: bool,
    /// Add decoder positions to visible tokens as well as mask tokens.
    pub decoder_pos_all: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            encoder_depth: 2,
            joint_depth: 1,
            decoder_depth: 1,
            num_heads: 4,
            mlp_ratio: 4,
            num_registers: 2,
            patch_size: 16,
            image_size: (64, 64),
            audio_segment_size: (32, 64),
            frames_per_clip: 4,
            pixel_mean: [0.485, 0.456, 0.406],
            pixel_std: [0.229, 0.224, 0.225],
            norm_pix_loss: false,
            decoder_pos_all: true,
        }
    }
}

impl ModelConfig {
    pub fn visual_grid(&self) -> (usize, usize) {
        (
            self.image_size.0 / self.patch_size,
            self.image_size.1 / self.patch_size,
        )
    }

    pub fn audio_grid(&self) -> (usize, usize) {
        (
            self.audio_segment_size.0 / self.patch_size,
            self.audio_segment_size.1 / self.patch_size,
        )
    }

    pub fn visual_patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn audio_patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("joint_depth", self.joint_depth),
            ("num_heads", self.num_heads),
            ("mlp_ratio", self.mlp_ratio),
            ("patch_size", self.patch_size),
            ("frames_per_clip", self.frames_per_clip),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be a positive integer"));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(
                "embed_dim",
                format!(
                    "embed_dim ({}) must be divisible by num_heads ({})",
                    self.embed_dim, self.num_heads
                ),
            ));
        }
        let p = self.patch_size;
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::config(
                "image_size",
                format!("({h},{w}) must be non-zero and divisible by patch_size {p}"),
            ));
        }
        let (m, f) = self.audio_segment_size;
        if m == 0 || f == 0 || m % p != 0 || f % p != 0 {
            return Err(Error::config(
                "audio_segment_size",
                format!("({m},{f}) must be non-zero and divisible by patch_size {p}"),
            ));
        }
        if self.pixel_std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("pixel_std", "entries must be positive"));
        }
        Ok(())
    }
}

/// Patch counts `(visual, audio)` for one frame / one segment.
pub fn resolve_token_counts(cfg: &ModelConfig) -> (usize, usize) {
    let (vr, vc) = cfg.visual_grid();
    let (ar, ac) = cfg.audio_grid();
    (vr * vc, ar * ac)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskStrategy {
    Random,
    GuidedDistinct,
    GuidedGumbel,
}

impl MaskStrategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaskStrategy::Random => "random",
            MaskStrategy::GuidedDistinct => "guided_distinct",
            MaskStrategy::GuidedGumbel => "guided_gumbel",
        }
    }

    pub fn is_guided(&self) -> bool {
        !matches!(self, MaskStrategy::Random)
    }
}

impl fmt::Display for MaskStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskStrategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(MaskStrategy::Random),
            "guided_distinct" => Ok(MaskStrategy::GuidedDistinct),
            "guided_gumbel" => Ok(MaskStrategy::GuidedGumbel),
            other => Err(format!(
                "unknown mask strategy `{other}` (expected random, guided_distinct or guided_gumbel)"
            )),
        }
    }
}

/// Which teacher attention map feeds the guided masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceSource {
    /// Global-token row of the modality's own joint pass.
    PerModality,
    /// Attention mass received by each patch in the fused joint pass.
    Fused,
}

impl GuidanceSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceSource::PerModality => "per_modality",
            GuidanceSource::Fused => "fused",
        }
    }
}

impl FromStr for GuidanceSource {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "per_modality" => Ok(GuidanceSource::PerModality),
            "fused" => Ok(GuidanceSource::Fused),
            other => Err(format!(
                "unknown guidance source `{other}` (expected per_modality or fused)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub recon_mask_ratio: f64,
    pub contra_mask_ratio: f64,
    pub lambda_rec: f64,
    pub lambda_dis: f64,
    /// Reconstruction is summed over each patch's pixels, so the contrastive
    /// weight sits at the same order as `lambda_rec` rather than far below it.
    pub lambda_contra: f64,
    pub temperature: f64,
    pub ema_momentum: f64,
    pub mask_strategy: MaskStrategy,
    pub gumbel_scale: f64,
    pub guidance_source: GuidanceSource,
    pub dual_pass: bool,
    pub distill: bool,
    /// Average both retrieval directions in InfoNCE; `false` keeps only visual→audio.
    pub symmetric_contrastive: bool,
    pub batch_size: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub seed: u64,
    /// Write `ckpt_<step>` every this many steps (0 disables periodic checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            recon_mask_ratio: 0.75,
            contra_mask_ratio: 0.50,
            lambda_rec: 1.0,
            lambda_dis: 1.0,
            lambda_contra: 1.0,
            temperature: 0.05,
            ema_momentum: 0.999,
            mask_strategy: MaskStrategy::GuidedDistinct,
            gumbel_scale: 1.0,
            guidance_source: GuidanceSource::PerModality,
            dual_pass: true,
            distill: true,
            symmetric_contrastive: true,
            batch_size: 32,
            steps: 3000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, r) in [
            ("recon_mask_ratio", self.recon_mask_ratio),
            ("contra_mask_ratio", self.contra_mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(key, format!("{r} is outside [0, 1]")));
            }
        }
        for (key, l) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_dis", self.lambda_dis),
            ("lambda_contra", self.lambda_contra),
        ] {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::config(key, format!("{l} must be a non-negative real")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::config("ema_momentum", "must lie in [0, 1)"));
        }
        if !(self.gumbel_scale >= 0.0 && self.gumbel_scale.is_finite()) {
            return Err(Error::config("gumbel_scale", "must be non-negative"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(
                "batch_size",
                "must be at least 2 (InfoNCE needs negatives)",
            ));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::config(
                "warmup_steps",
                format!("{} must be below steps ({})", self.warmup_steps, self.steps),
            ));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::config("peak_lr", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::config(key, format!("cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(
            key,
            format!("expected `true` or `false`, got `{value}`"),
        )),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str, n: usize) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let items: Vec<&str> = value.split(',').map(str::trim).collect();
    if items.len() != n {
        return Err(Error::config(
            key,
            format!("expected {n} comma-separated values, got `{value}`"),
        ));
    }
    items.into_iter().map(|s| parse_value(key, s)).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(usize, usize)> {
    let v = parse_list::<usize>(key, value, 2)?;
    Ok((v[0], v[1]))
}

fn parse_triple(key: &str, value: &str) -> Result<[f64; 3]> {
    let v = parse_list::<f64>(key, value, 3)?;
    Ok([v[0], v[1], v[2]])
}

impl Config {
    /// Assign one key. Does not validate cross-field invariants.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "embed_dim" => m.embed_dim = parse_value(key, value)?,
            "encoder_depth" => m.encoder_depth = parse_value(key, value)?,
            "joint_depth" => m.joint_depth = parse_value(key, value)?,
            "decoder_depth" => m.decoder_depth = parse_value(key, value)?,
            "num_heads" => m.num_heads = parse_value(key, value)?,
            "mlp_ratio" => m.mlp_ratio = parse_value(key, value)?,
            "num_registers" => m.num_registers = parse_value(key, value)?,
            "patch_size" => m.patch_size = parse_value(key, value)?,
            "image_size" => m.image_size = parse_pair(key, value)?,
            "audio_segment_size" => m.audio_segment_size = parse_pair(key, value)?,
            "frames_per_clip" => m.frames_per_clip = parse_value(key, value)?,
            "pixel_mean" => m.pixel_mean = parse_triple(key, value)?,
            "pixel_std" => m.pixel_std = parse_triple(key, value)?,
            "norm_pix_loss" => m.norm_pix_loss = parse_bool(key, value)?,
            "decoder_pos_all" => m.decoder_pos_all = parse_bool(key, value)?,
            "recon_mask_ratio" => t.recon_mask_ratio = parse_value(key, value)?,
            "contra_mask_ratio" => t.contra_mask_ratio = parse_value(key, value)?,
            "lambda_rec" => t.lambda_rec = parse_value(key, value)?,
            "lambda_dis" => t.lambda_dis = parse_value(key, value)?,
            "lambda_contra" => t.lambda_contra = parse_value(key, value)?,
            "temperature" => t.temperature = parse_value(key, value)?,
            "ema_momentum" => t.ema_momentum = parse_value(key, value)?,
            "mask_strategy" => t.mask_strategy = parse_value(key, value)?,
            "gumbel_scale" => t.gumbel_scale = parse_value(key, value)?,
            "guidance_source" => t.guidance_source = parse_value(key, value)?,
            "dual_pass" => t.dual_pass = parse_bool(key, value)?,
            "distill" => t.distill = parse_bool(key, value)?,
            "symmetric_contrastive" => t.symmetric_contrastive = parse_bool(key, value)?,
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "steps" => t.steps = parse_value(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
            "peak_lr" => t.peak_lr = parse_value(key, value)?,
            "seed" => t.seed = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key=value` overrides in order; the last write wins.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: 0,
                msg: format!("override `{o}` is not of the form key=value"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let triple = |a: &[f64; 3]| format!("{},{},{}", a[0], a[1], a[2]);
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("embed_dim", m.embed_dim.to_string());
        kv("encoder_depth", m.encoder_depth.to_string());
        kv("joint_depth", m.joint_depth.to_string());
        kv("decoder_depth", m.decoder_depth.to_string());
        kv("num_heads", m.num_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("num_registers", m.num_registers.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("image_size", format!("{},{}", m.image_size.0, m.image_size.1));
        kv(
            "audio_segment_size",
            format!("{},{}", m.audio_segment_size.0, m.audio_segment_size.1),
        );
        kv("frames_per_clip", m.frames_per_clip.to_string());
        kv("pixel_mean", triple(&m.pixel_mean));
        kv("pixel_std", triple(&m.pixel_std));
        kv("norm_pix_loss", m.norm_pix_loss.to_string());
        kv("decoder_pos_all", m.decoder_pos_all.to_string());
        kv("recon_mask_ratio", t.recon_mask_ratio.to_string());
        kv("contra_mask_ratio", t.contra_mask_ratio.to_string());
        kv("lambda_rec", t.lambda_rec.to_string());
        kv("lambda_dis", t.lambda_dis.to_string());
        kv("lambda_contra", t.lambda_contra.to_string());
        kv("temperature", t.temperature.to_string());
        kv("ema_momentum", t.ema_momentum.to_string());
        kv("mask_strategy", t.mask_strategy.to_string());
        kv("gumbel_scale", t.gumbel_scale.to_string());
        kv("guidance_source", t.guidance_source.as_str().to_string());
        kv("dual_pass", t.dual_pass.to_string());
        kv("distill", t.distill.to_string());
        kv("symmetric_contrastive", t.symmetric_contrastive.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("steps", t.steps.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("peak_lr", t.peak_lr.to_string());
        kv("seed", t.seed.to_string());
        kv("checkpoint_every", t.checkpoint_every.to_string());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Read, parse and validate a config file.
pub fn load_config(path: &Path) -> Result<(ModelConfig, TrainConfig)> {
    let cfg = load_config_with_overrides(path, &[] as &[&str])?;
    Ok((cfg.model, cfg.train))
}

pub fn load_config_with_overrides<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Config> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = Config::parse(&text)?;
    cfg.apply_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}
