//! Video tensors, their file format, frame sampling, crops, masking and the
//! synthetic moving-shapes corpus.

mod io;
mod manifest;
mod synth;
mod transform;

pub use io::{load_video, read_tensor, store_video, write_tensor, MAGIC};
pub use manifest::{read_manifest, write_manifest, QaSample, QuestionType};
pub use synth::{
    generate_synth_dataset, video_id, Motion, Shape, SynthConfig, SynthDataset, SynthScene,
    ACTIONS, ENTITIES, MIN_FRAME,
};
pub use transform::{
    center_indices, random_mask, resize, sample_frames, sample_indices, spatial_crop_set, temporal_crop_set, CropMode, CropSpec,
    MaskInfo, Rect,
};

use crate::error::{Error, Result};

/// Dense `C×F×H×W` frame stack with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    channels: usize,
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl VideoTensor {
    pub fn new(channels: usize, frames: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || frames == 0 || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "video dims must be positive, got {channels}x{frames}x{height}x{width}"
            )));
        }
        let n = channels
            .checked_mul(frames)
            .and_then(|x| x.checked_mul(height))
            .and_then(|x| x.checked_mul(width))
            .ok_or_else(|| Error::shape("video dims overflow"))?;
        if n != data.len() {
            return Err(Error::shape(format!(
                "video {channels}x{frames}x{height}x{width} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "video value {} at index {i} outside [0, 1]",
                data[i]
            )));
        }
        Ok(VideoTensor {
            channels,
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, frames: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            channels,
            frames,
            height,
            width,
            data: vec![0.0; channels * frames * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.channels, self.frames, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn offset(&self, c: usize, f: usize, y: usize, x: usize) -> usize {
        ((c * self.frames + f) * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, f: usize, y: usize, x: usize) -> f32 {
        self.data[self.offset(c, f, y, x)]
    }

    /// Caller keeps values in `[0, 1]`.
    #[inline]
    pub(crate) fn set(&mut self, c: usize, f: usize, y: usize, x: usize, v: f32) {
        let o = self.offset(c, f, y, x);
        self.data[o] = v;
    }

    /// Keeps the listed frames, in the given order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<VideoTensor> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.frames) {
            return Err(Error::arg(format!("frame {bad} out of {}", self.frames)));
        }
        let mut out = VideoTensor::zeros(self.channels, indices.len(), self.height, self.width);
        let plane = self.height * self.width;
        for c in 0..self.channels {
            for (k, &f) in indices.iter().enumerate() {
                let src = self.offset(c, f, 0, 0);
                let dst = out.offset(c, k, 0, 0);
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(out)
    }
}
