//! Clip data: the sample type, real-input preprocessing, the synthetic
//! corpus and sharded storage.

pub mod audio;
pub mod frames;
pub mod sample;
pub mod shard;
pub mod synth;

pub use audio::{align_segments, compute_log_mel, Spectrogram};
pub use frames::preprocess_frames;
pub use sample::{AVSample, Label};
pub use shard::{open_reader, read_all, write_shards, ReaderOptions, ShardIndex, ShardReader};
pub use synth::{gen_synthetic_corpus, synthetic_corpus, SynthSpec};

use image::RgbImage;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Build a clip from decoded frames and a mono waveform.
///
/// Frames are sampled and normalized to `cfg.image_size`; the waveform becomes
/// a 128-bin log-Mel spectrogram cut into `frames_per_clip` aligned segments
/// of `cfg.audio_segment_size.1` frames. Short spectrograms are right-padded
/// with silence.
pub fn ingest_clip(
    sample_id: &str,
    raw_frames: &[RgbImage],
    waveform: &[f32],
    sample_rate: f64,
    cfg: &ModelConfig,
    label: Option<Label>,
) -> Result<AVSample> {
    let (mels, width) = cfg.audio_segment_size;
    if mels != audio::N_MELS {
        return Err(Error::InvalidArgument(format!(
            "real audio yields {} mel bins but the model expects {mels}",
            audio::N_MELS
        )));
    }
    let t = cfg.frames_per_clip;
    let frames = preprocess_frames(raw_frames, t, cfg.image_size, &cfg.pixel_mean, &cfg.pixel_std)?;
    let spec = compute_log_mel(waveform, sample_rate)?;
    let spec = audio::pad_to_width(&spec, width);
    let segments = audio::align_segments_with_width(&spec, t, width)?;
    let (h, w) = cfg.image_size;
    AVSample::new(sample_id, frames, [t, h, w, 3], segments, [t, mels, width], label)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ingest_builds_aligned_clip() {
        let cfg = ModelConfig {
            image_size: (32, 32),
            audio_segment_size: (128, 64),
            frames_per_clip: 3,
            ..ModelConfig::default()
        };
        let frames: Vec<RgbImage> = (0..5)
            .map(|i| RgbImage::from_pixel(48, 40, image::Rgb([i * 40, 10, 200])))
            .collect();
        let wave: Vec<f32> = (0..16_000).map(|i| ((i as f32) * 0.05).sin()).collect();
        let s = ingest_clip("c", &frames, &wave, 16_000.0, &cfg, Some(Label::Class(1))).unwrap();
        assert_eq!(s.frames_shape, [3, 32, 32, 3]);
        assert_eq!(s.segments_shape, [3, 128, 64]);

        let short = ingest_clip("d", &frames, &wave[..800], 16_000.0, &cfg, None).unwrap();
        assert_eq!(short.segments_shape, [3, 128, 64]);

        let bad = ModelConfig { audio_segment_size: (32, 64), ..cfg };
        assert!(ingest_clip("e", &frames, &wave, 16_000.0, &bad, None).is_err());
    }
}
