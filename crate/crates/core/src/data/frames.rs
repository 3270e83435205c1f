//! Frame sampling and visual preprocessing for real clips.

use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};

/// Indices of `count` frames sampled uniformly from `available` frames.
pub fn temporal_indices(available: usize, count: usize) -> Vec<usize> {
    if count == 1 || available == 1 {
        return vec![0; count];
    }
    (0..count)
        .map(|t| {
            ((t as f64 * (available - 1) as f64 / (count - 1) as f64).round() as usize)
                .min(available - 1)
        })
        .collect()
}

/// Resize so the frame covers `height x width`, centre-crop, scale to [0, 1]
/// and normalize per channel. Output `[height, width, 3]`.
pub fn preprocess_frame(
    img: &RgbImage,
    size: (usize, usize),
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Vec<f32> {
    let (th, tw) = size;
    let (w0, h0) = img.dimensions();
    let scale = (th as f64 / h0 as f64).max(tw as f64 / w0 as f64);
    let rw = ((w0 as f64 * scale).round() as u32).max(tw as u32);
    let rh = ((h0 as f64 * scale).round() as u32).max(th as u32);
    let resized = image::imageops::resize(img, rw, rh, FilterType::Triangle);
    let x0 = (rw - tw as u32) / 2;
    let y0 = (rh - th as u32) / 2;
    let mut out = Vec::with_capacity(th * tw * 3);
    for y in 0..th as u32 {
        for x in 0..tw as u32 {
            let p = resized.get_pixel(x0 + x, y0 + y);
            for c in 0..3 {
                let v = p[c] as f64 / 255.0;
                out.push(((v - mean[c]) / std[c]) as f32);
            }
        }
    }
    out
}

/// Sample `count` frames uniformly and preprocess each; output `[count, H, W, 3]`.
pub fn preprocess_frames(
    raw: &[RgbImage],
    count: usize,
    size: (usize, usize),
    mean: &[f64; 3],
    std: &[f64; 3],
) -> Result<Vec<f32>> {
    if raw.is_empty() {
        return Err(Error::InvalidArgument("no frames to sample from".into()));
    }
    let mut out = Vec::with_capacity(count * size.0 * size.1 * 3);
    for idx in temporal_indices(raw.len(), count) {
        out.extend(preprocess_frame(&raw[idx], size, mean, std));
    }
    Ok(out)
}

/// Decode a PNG (or other supported image) frame sequence.
pub fn load_frames<P: AsRef<Path>>(paths: &[P]) -> Result<Vec<RgbImage>> {
    paths
        .iter()
        .map(|p| {
            let p = p.as_ref();
            image::open(p)
                .map(|img| img.to_rgb8())
                .map_err(|e| Error::Data(format!("{}: cannot decode frame: {e}", p.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_maps() {
        assert_eq!(temporal_indices(16, 16), (0..16).collect::<Vec<_>>());
        assert_eq!(temporal_indices(1, 4), vec![0; 4]);
        let idx = temporal_indices(100, 16);
        assert_eq!(&idx[..3], &[0, 7, 13]);
        assert_eq!(idx[15], 99);
        for (t, i) in idx.iter().enumerate() {
            assert_eq!(*i, (t as f64 * 99.0 / 15.0).round() as usize);
        }
    }

    #[test]
    fn constant_frame_normalizes_per_channel() {
        let img = RgbImage::from_pixel(40, 30, image::Rgb([255, 0, 51]));
        let mean = [0.5, 0.0, 0.1];
        let std = [0.5, 1.0, 0.1];
        let out = preprocess_frames(&[img], 2, (16, 16), &mean, &std).unwrap();
        assert_eq!(out.len(), 2 * 16 * 16 * 3);
        for px in out.chunks(3) {
            assert!((px[0] - 1.0).abs() < 1e-6);
            assert!(px[1].abs() < 1e-6);
            assert!((px[2] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn centre_crop_keeps_the_middle() {
        // Left half black, right half white, wide frame: crop must straddle the edge.
        let img = RgbImage::from_fn(64, 16, |x, _| {
            if x < 32 {
                image::Rgb([0, 0, 0])
            } else {
                image::Rgb([255, 255, 255])
            }
        });
        let out = preprocess_frame(&img, (16, 16), &[0.0; 3], &[1.0; 3]);
        assert!(out[0] < 0.1);
        assert!(out[(15) * 3] > 0.9);
    }

    #[test]
    fn undecodable_frame_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(load_frames(&[p]), Err(Error::Data(_))));
    }
}
