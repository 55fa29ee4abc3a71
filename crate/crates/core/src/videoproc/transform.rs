use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::VideoTensor;
use crate::error::{Error, Result};

/// Spatial crop retries before giving up on per-frame distinctness.
const DISTINCT_RETRIES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Temporal,
    Spatial,
}

/// Per-frame rectangles used to cut one crop.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub mode: CropMode,
    pub rects: Vec<Rect>,
    pub crop_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskInfo {
    pub fraction: f64,
    pub masked_patches: Vec<usize>,
    pub patch_count: usize,
}

/// Sparse sampling: one uniformly drawn frame from each of `n` equal segments.
pub fn sample_frames(video: &VideoTensor, n: usize, seed: u64) -> Result<(VideoTensor, Vec<usize>)> {
    let indices = sample_indices(video.frames(), n, seed)?;
    Ok((video.select_frames(&indices)?, indices))
}

/// Frame indices of [`sample_frames`].
pub fn sample_indices(frames: usize, n: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 || n > frames {
        return Err(Error::arg(format!("cannot sample {n} of {frames} frames")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|i| {
            let lo = i * frames / n;
            let hi = (i + 1) * frames / n;
            rng.gen_range(lo..hi)
        })
        .collect())
}

/// Segment midpoints; the deterministic variant used at evaluation time.
pub fn center_indices(frames: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > frames {
        return Err(Error::arg(format!("cannot sample {n} of {frames} frames")));
    }
    Ok((0..n)
        .map(|i| (i * frames / n + (i + 1) * frames / n - 1) / 2)
        .collect())
}

fn check_crop(video: &VideoTensor, crop_hw: (usize, usize)) -> Result<()> {
    let (h, w) = crop_hw;
    if h == 0 || w == 0 || h > video.height() || w > video.width() {
        return Err(Error::arg(format!(
            "crop {h}x{w} does not fit {}x{} frames",
            video.height(),
            video.width()
        )));
    }
    Ok(())
}

fn random_rect(rng: &mut ChaCha8Rng, video: &VideoTensor, (h, w): (usize, usize)) -> Rect {
    Rect {
        x: rng.gen_range(0..=video.width() - w),
        y: rng.gen_range(0..=video.height() - h),
        w,
        h,
    }
}

fn cut(video: &VideoTensor, rects: &[Rect]) -> VideoTensor {
    let (h, w) = (rects[0].h, rects[0].w);
    let mut out = VideoTensor::zeros(video.channels(), video.frames(), h, w);
    for c in 0..video.channels() {
        for (f, r) in rects.iter().enumerate() {
            for y in 0..h {
                let src = video.offset(c, f, r.y + y, r.x);
                let dst = out.offset(c, f, y, 0);
                out.data[dst..dst + w].copy_from_slice(&video.data[src..src + w]);
            }
        }
    }
    out
}

/// Crops sharing one rectangle across all frames, so motion stays in view.
pub fn temporal_crop_set(
    video: &VideoTensor,
    crop_count: usize,
    crop_hw: (usize, usize),
    seed: u64,
) -> Result<Vec<(VideoTensor, CropSpec)>> {
    check_crop(video, crop_hw)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..crop_count)
        .map(|_| {
            let r = random_rect(&mut rng, video, crop_hw);
            let rects = vec![r; video.frames()];
            let spec = CropSpec {
                mode: CropMode::Temporal,
                rects,
                crop_count,
            };
            (cut(video, &spec.rects), spec)
        })
        .collect())
}

/// Crops with an independent rectangle per frame; at least two frames differ when `F ≥ 2`.
pub fn spatial_crop_set(
    video: &VideoTensor,
    crop_count: usize,
    crop_hw: (usize, usize),
    seed: u64,
) -> Result<Vec<(VideoTensor, CropSpec)>> {
    check_crop(video, crop_hw)?;
    let need_distinct = video.frames() >= 2;
    if need_distinct && crop_hw == (video.height(), video.width()) {
        return Err(Error::arg(
            "spatial crops equal to the frame size cannot vary across frames",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(crop_count);
    for _ in 0..crop_count {
        let mut attempt = 0;
        let rects = loop {
            let rects: Vec<Rect> = (0..video.frames())
                .map(|_| random_rect(&mut rng, video, crop_hw))
                .collect();
            if !need_distinct || rects.iter().any(|r| *r != rects[0]) {
                break rects;
            }
            attempt += 1;
            if attempt >= DISTINCT_RETRIES {
                return Err(Error::arg("could not draw distinct spatial crops"));
            }
        };
        let spec = CropSpec {
            mode: CropMode::Spatial,
            rects,
            crop_count,
        };
        out.push((cut(video, &spec.rects), spec));
    }
    Ok(out)
}

/// Zeroes `round(fraction × patches)` spatial patches, the same ones in every frame.
pub fn random_mask(
    video: &VideoTensor,
    fraction_range: (f64, f64),
    patch_size: usize,
    seed: u64,
) -> Result<(VideoTensor, MaskInfo)> {
    let (lo, hi) = fraction_range;
    if !(lo <= hi) || lo < 0.0 || hi >= 1.0 {
        return Err(Error::arg(format!("bad mask fraction range [{lo}, {hi}]")));
    }
    if patch_size == 0 || !video.height().is_multiple_of(patch_size) || !video.width().is_multiple_of(patch_size) {
        return Err(Error::arg(format!(
            "patch {patch_size} does not tile {}x{} frames",
            video.height(),
            video.width()
        )));
    }
    let gh = video.height() / patch_size;
    let gw = video.width() / patch_size;
    let patch_count = gh * gw;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fraction = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let count = (fraction * patch_count as f64).round() as usize;
    let mut order: Vec<usize> = (0..patch_count).collect();
    order.shuffle(&mut rng);
    let mut masked: Vec<usize> = order[..count].to_vec();
    masked.sort_unstable();
    let mut out = video.clone();
    for &p in &masked {
        let (py, px) = (p / gw, p % gw);
        for c in 0..video.channels() {
            for f in 0..video.frames() {
                for y in py * patch_size..(py + 1) * patch_size {
                    let o = out.offset(c, f, y, px * patch_size);
                    out.data[o..o + patch_size].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }
    Ok((
        out,
        MaskInfo {
            fraction,
            masked_patches: masked,
            patch_count,
        },
    ))
}

/// Bilinear resize of every frame (align-corners off, edge clamped).
pub fn resize(video: &VideoTensor, height: usize, width: usize) -> Result<VideoTensor> {
    if height == 0 || width == 0 {
        return Err(Error::arg("resize target must be positive"));
    }
    if (height, width) == (video.height(), video.width()) {
        return Ok(video.clone());
    }
    let sy = video.height() as f64 / height as f64;
    let sx = video.width() as f64 / width as f64;
    let mut out = VideoTensor::zeros(video.channels(), video.frames(), height, width);
    let coord = |o: usize, scale: f64, n: usize| {
        let p = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - i0 as f64)
    };
    for c in 0..video.channels() {
        for f in 0..video.frames() {
            for y in 0..height {
                let (y0, y1, ty) = coord(y, sy, video.height());
                for x in 0..width {
                    let (x0, x1, tx) = coord(x, sx, video.width());
                    let v = |yy, xx| video.get(c, f, yy, xx) as f64;
                    let top = v(y0, x0) * (1.0 - tx) + v(y0, x1) * tx;
                    let bot = v(y1, x0) * (1.0 - tx) + v(y1, x1) * tx;
                    let val = (top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0) as f32;
                    out.set(c, f, y, x, val);
                }
            }
        }
    }
    Ok(out)
}
