//! Log-Mel filterbanks and frame-aligned spectrogram segments.

use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};

pub const N_MELS: usize = 128;
pub const WINDOW_SECONDS: f64 = 0.025;
pub const HOP_SECONDS: f64 = 0.010;
pub const LOG_EPS: f64 = 1e-10;
/// Width in spectrogram frames of one aligned segment (4 s at a 10 ms hop).
pub const SEGMENT_FRAMES: usize = 416;

/// A `[n_mels, n_frames]` row-major spectrogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    pub n_mels: usize,
    pub n_frames: usize,
    pub data: Vec<f32>,
}

impl Spectrogram {
    pub fn at(&self, mel: usize, frame: usize) -> f32 {
        self.data[mel * self.n_frames + frame]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Centre frequency in Hz of every mel band.
pub fn mel_band_centers(n_mels: usize, sample_rate: f64) -> Vec<f64> {
    let top = hz_to_mel(sample_rate / 2.0);
    (1..=n_mels)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Triangular HTK-style filters, `[n_mels, n_fft / 2 + 1]`, peak weight 1.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: f64) -> Vec<Vec<f64>> {
    let top = hz_to_mel(sample_rate / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let n_bins = n_fft / 2 + 1;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate / n_fft as f64;
                    if f > lo && f <= mid {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f < hi {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Window and hop lengths in samples, and the FFT size.
pub fn frame_geometry(sample_rate: f64) -> (usize, usize, usize) {
    let win = (WINDOW_SECONDS * sample_rate).round() as usize;
    let hop = (HOP_SECONDS * sample_rate).round() as usize;
    (win, hop, win.next_power_of_two())
}

pub fn num_frames(len: usize, win: usize, hop: usize) -> usize {
    1 + (len - win) / hop
}

/// 128-bin log-Mel spectrogram with a 25 ms Hann window and 10 ms hop.
/// Each value is `ln(mel_power + 1e-10)`.
pub fn compute_log_mel(waveform: &[f32], sample_rate: f64) -> Result<Spectrogram> {
    if !(sample_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sample rate must be positive, got {sample_rate}"
        )));
    }
    let (win, hop, n_fft) = frame_geometry(sample_rate);
    if win == 0 || hop == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample rate {sample_rate} Hz gives an empty window or hop"
        )));
    }
    if waveform.len() < win {
        return Err(Error::InvalidArgument(format!(
            "waveform has {} samples, shorter than one {win}-sample window",
            waveform.len()
        )));
    }
    let n_frames = num_frames(waveform.len(), win, hop);
    let window = hann(win);
    let filters = mel_filterbank(N_MELS, n_fft, sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let n_bins = n_fft / 2 + 1;

    let mut data = vec![0f32; N_MELS * n_frames];
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0f64; n_bins];
    for f in 0..n_frames {
        let start = f * hop;
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = if i < win {
                Complex::new(waveform[start + i] as f64 * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for (m, filt) in filters.iter().enumerate() {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data[m * n_frames + f] = (e + LOG_EPS).ln() as f32;
        }
    }
    Ok(Spectrogram {
        n_mels: N_MELS,
        n_frames,
        data,
    })
}

/// Start offsets of the `count` windows of `width` frames aligned to `count`
/// uniformly sampled video frames over a spectrogram of `n` frames.
///
/// Window `t` is centred at `round(t * (n - 1) / (count - 1))` and clamped to
/// lie inside `[0, n)`.
pub fn segment_starts(n: usize, count: usize, width: usize) -> Result<Vec<usize>> {
    if n < width {
        return Err(Error::InvalidArgument(format!(
            "spectrogram has {n} frames but segments need {width}; pad the input first"
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("segment count must be positive".into()));
    }
    let max_start = n - width;
    Ok((0..count)
        .map(|t| {
            let center = if count == 1 {
                ((n - 1) as f64 / 2.0).round() as usize
            } else {
                (t as f64 * (n - 1) as f64 / (count - 1) as f64).round() as usize
            };
            center.saturating_sub(width / 2).min(max_start)
        })
        .collect())
}

/// Cut `count` frame-aligned windows of `width` frames; output `[count, n_mels, width]`.
pub fn align_segments_with_width(
    spec: &Spectrogram,
    count: usize,
    width: usize,
) -> Result<Vec<f32>> {
    let starts = segment_starts(spec.n_frames, count, width)?;
    let mut out = Vec::with_capacity(count * spec.n_mels * width);
    for start in starts {
        for m in 0..spec.n_mels {
            let row = &spec.data[m * spec.n_frames..(m + 1) * spec.n_frames];
            out.extend_from_slice(&row[start..start + width]);
        }
    }
    Ok(out)
}

/// `[T, 128, 416]` segments, one per sampled video frame.
pub fn align_segments(spec: &Spectrogram, frames_per_clip: usize) -> Result<Vec<f32>> {
    align_segments_with_width(spec, frames_per_clip, SEGMENT_FRAMES)
}

/// Right-pad a spectrogram to at least `width` frames with the silence value `ln(1e-10)`.
pub fn pad_to_width(spec: &Spectrogram, width: usize) -> Spectrogram {
    if spec.n_frames >= width {
        return spec.clone();
    }
    let silence = LOG_EPS.ln() as f32;
    let mut data = Vec::with_capacity(spec.n_mels * width);
    for m in 0..spec.n_mels {
        data.extend_from_slice(&spec.data[m * spec.n_frames..(m + 1) * spec.n_frames]);
        data.extend(std::iter::repeat(silence).take(width - spec.n_frames));
    }
    Spectrogram {
        n_mels: spec.n_mels,
        n_frames: width,
        data,
    }
}
