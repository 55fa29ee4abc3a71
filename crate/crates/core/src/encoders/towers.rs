use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Attention, FeedForward, LayerNorm, Linear};
use super::params::{uniform, Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::substrate::{Tensor, Var};
use crate::textproc::TokenSequence;
use crate::videoproc::VideoTensor;

const EMBED_INIT: f64 = 0.035;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VideoEncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub patch: usize,
    pub channels: usize,
    pub max_frames: usize,
    pub max_patches: usize,
    pub ffn_mult: usize,
}

impl Default for VideoEncoderConfig {
    fn default() -> Self {
        VideoEncoderConfig {
            layers: 2,
            dim: 32,
            heads: 4,
            patch: 8,
            channels: 3,
            max_frames: 16,
            max_patches: 16,
            ffn_mult: 2,
        }
    }
}

impl VideoEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.layers, self.dim, self.heads)?;
        if self.patch == 0 || self.channels == 0 || self.max_frames == 0 || self.max_patches == 0 || self.ffn_mult == 0 {
            return Err(Error::config("video encoder sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub ffn_mult: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            layers: 2,
            dim: 32,
            heads: 4,
            max_len: 32,
            vocab_size: 128,
            ffn_mult: 2,
        }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        check_dims(self.layers, self.dim, self.heads)?;
        if self.max_len == 0 || self.vocab_size == 0 || self.ffn_mult == 0 {
            return Err(Error::config("text encoder sizes must be positive"));
        }
        Ok(())
    }
}

fn check_dims(layers: usize, dim: usize, heads: usize) -> Result<()> {
    if layers == 0 {
        return Err(Error::config("encoders need at least one layer"));
    }
    if heads == 0 || dim == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::config(format!("model dim {dim} not divisible by {heads} heads")));
    }
    Ok(())
}

/// Encoder output on a tape: the whole sequence and its `[CLS]` row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Encoded {
    /// `[1, d]`
    pub cls: Var,
    /// `[n, d]`, row 0 is the `[CLS]` position.
    pub tokens: Var,
}

/// Detached encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub cls: Vec<f64>,
    pub tokens: Tensor,
}

impl Embedding {
    pub fn from_graph(g: &Graph, e: Encoded) -> Self {
        Embedding {
            cls: g.value(e.cls).data().to_vec(),
            tokens: g.value(e.tokens).clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct VideoBlock {
    norm_time: LayerNorm,
    attn_time: Attention,
    norm_space: LayerNorm,
    attn_space: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Patch transformer with divided space-time attention.
#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub config: VideoEncoderConfig,
    patch_embed: Linear,
    cls: ParamId,
    pos_space: ParamId,
    pos_time: ParamId,
    blocks: Vec<VideoBlock>,
    norm: LayerNorm,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &VideoEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let patch_len = config.channels * config.patch * config.patch;
        let patch_embed = Linear::new(store, &format!("{name}.patch_embed"), patch_len, d, true, rng)?;
        let cls = store.add(format!("{name}.cls"), uniform(rng, &[1, d], EMBED_INIT))?;
        let pos_space = store.add(format!("{name}.pos_space"), uniform(rng, &[config.max_patches, d], EMBED_INIT))?;
        let pos_time = store.add(format!("{name}.pos_time"), uniform(rng, &[config.max_frames, d], EMBED_INIT))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{name}.block{l}");
            blocks.push(VideoBlock {
                norm_time: LayerNorm::new(store, &format!("{p}.norm_time"), d)?,
                attn_time: Attention::new(store, &format!("{p}.attn_time"), d, config.heads, rng)?,
                norm_space: LayerNorm::new(store, &format!("{p}.norm_space"), d)?,
                attn_space: Attention::new(store, &format!("{p}.attn_space"), d, config.heads, rng)?,
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng)?,
            });
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(VideoEncoder {
            config: config.clone(),
            patch_embed,
            cls,
            pos_space,
            pos_time,
            blocks,
            norm,
        })
    }

    /// Patch grid `(rows, cols)` for a frame, or a shape error.
    pub fn grid(&self, video: &VideoTensor) -> Result<(usize, usize)> {
        let p = self.config.patch;
        if !video.height().is_multiple_of(p) || !video.width().is_multiple_of(p) {
            return Err(Error::shape(format!(
                "{}x{} frames do not tile into {p}x{p} patches",
                video.height(),
                video.width()
            )));
        }
        if video.channels() != self.config.channels {
            return Err(Error::shape(format!(
                "encoder expects {} channels, video has {}",
                self.config.channels,
                video.channels()
            )));
        }
        let grid = (video.height() / p, video.width() / p);
        if grid.0 * grid.1 > self.config.max_patches || video.frames() > self.config.max_frames {
            return Err(Error::shape(format!(
                "{} frames of {} patches exceed the encoder's {}x{}",
                video.frames(),
                grid.0 * grid.1,
                self.config.max_frames,
                self.config.max_patches
            )));
        }
        Ok(grid)
    }

    /// Rows `f·P + p` hold the flattened `C×patch×patch` pixels of patch `p` in frame `f`.
    fn patchify(&self, video: &VideoTensor, grid: (usize, usize)) -> Tensor {
        let p = self.config.patch;
        let (gh, gw) = grid;
        let n_patch = gh * gw;
        let cols = video.channels() * p * p;
        let mut data = Vec::with_capacity(video.frames() * n_patch * cols);
        for f in 0..video.frames() {
            for gy in 0..gh {
                for gx in 0..gw {
                    for c in 0..video.channels() {
                        for y in 0..p {
                            for x in 0..p {
                                data.push(video.get(c, f, gy * p + y, gx * p + x) as f64);
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![video.frames() * n_patch, cols], data).expect("patch matrix")
    }

    pub fn forward(&self, g: &mut Graph, video: &VideoTensor) -> Result<Encoded> {
        let grid = self.grid(video)?;
        let (nf, np) = (video.frames(), grid.0 * grid.1);
        let patches = g.constant(self.patchify(video, grid));
        let x = self.patch_embed.forward(g, patches)?;
        let ps = g.param(self.pos_space);
        let space_idx: Vec<usize> = (0..nf * np).map(|i| i % np).collect();
        let ps = g.gather_rows(ps, &space_idx)?;
        let pt = g.param(self.pos_time);
        let time_idx: Vec<usize> = (0..nf * np).map(|i| i / np).collect();
        let pt = g.gather_rows(pt, &time_idx)?;
        let x = g.add(x, ps)?;
        let x = g.add(x, pt)?;
        let cls = g.param(self.cls);
        let mut x = g.concat_rows(&[cls, x])?;

        // Location-major order of the patch rows and its inverse.
        let by_location: Vec<usize> = (0..np * nf).map(|i| 1 + (i % nf) * np + i / nf).collect();
        let back_to_frames: Vec<usize> = (0..nf * np).map(|i| (i % np) * nf + i / np).collect();
        // One block per frame: the [CLS] row followed by that frame's patches.
        let per_frame: Vec<usize> = (0..nf)
            .flat_map(|f| std::iter::once(0).chain((0..np).map(move |p| 1 + f * np + p)))
            .collect();
        let frame_cls: Vec<usize> = (0..nf).map(|f| f * (np + 1)).collect();
        let frame_patches: Vec<usize> = (0..nf)
            .flat_map(|f| (0..np).map(move |p| f * (np + 1) + 1 + p))
            .collect();
        let patch_rows: Vec<usize> = (1..=nf * np).collect();

        for b in &self.blocks {
            // Temporal attention: each location attends over frames; [CLS] passes through.
            let h = b.norm_time.forward(g, x)?;
            let h = g.gather_rows(h, &by_location)?;
            let t = b.attn_time.forward(g, h, h, np)?;
            let t = g.gather_rows(t, &back_to_frames)?;
            let cls_row = g.gather_rows(x, &[0])?;
            let pr = g.gather_rows(x, &patch_rows)?;
            let pr = g.add(pr, t)?;
            x = g.concat_rows(&[cls_row, pr])?;

            // Spatial attention within each frame; the [CLS] update is averaged over frames.
            let h = b.norm_space.forward(g, x)?;
            let h = g.gather_rows(h, &per_frame)?;
            let s = b.attn_space.forward(g, h, h, nf)?;
            let s_cls = g.gather_rows(s, &frame_cls)?;
            let s_cls = g.mean_rows(s_cls);
            let s_patch = g.gather_rows(s, &frame_patches)?;
            let upd = g.concat_rows(&[s_cls, s_patch])?;
            x = g.add(x, upd)?;

            let h = b.norm_ffn.forward(g, x)?;
            let h = b.ffn.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let tokens = self.norm.forward(g, x)?;
        let cls = g.gather_rows(tokens, &[0])?;
        Ok(Encoded { cls, tokens })
    }
}

#[derive(Clone, Debug)]
struct TextBlock {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Bidirectional transformer over token ids.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_embed: ParamId,
    pos: ParamId,
    blocks: Vec<TextBlock>,
    norm: LayerNorm,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, name: &str, config: &TextEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let token_embed = store.add(format!("{name}.token_embed"), uniform(rng, &[config.vocab_size, d], EMBED_INIT))?;
        let pos = store.add(format!("{name}.pos"), uniform(rng, &[config.max_len, d], EMBED_INIT))?;
        let mut blocks = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = format!("{name}.block{l}");
            blocks.push(TextBlock {
                norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), d)?,
                attn: Attention::new(store, &format!("{p}.attn"), d, config.heads, rng)?,
                norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), d)?,
                ffn: FeedForward::new(store, &format!("{p}.ffn"), d, d * config.ffn_mult, rng)?,
            });
        }
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d)?;
        Ok(TextEncoder {
            config: config.clone(),
            token_embed,
            pos,
            blocks,
            norm,
        })
    }

    pub fn forward(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Encoded> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::shape("empty token sequence"));
        }
        if n > self.config.max_len {
            return Err(Error::shape(format!(
                "sequence of {n} tokens exceeds max length {}",
                self.config.max_len
            )));
        }
        let ids: Vec<usize> = seq.ids().iter().map(|&i| i as usize).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::shape(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let emb = g.param(self.token_embed);
        let x = g.gather_rows(emb, &ids)?;
        let pos = g.param(self.pos);
        let pos = g.gather_rows(pos, &(0..n).collect::<Vec<_>>())?;
        let mut x = g.add(x, pos)?;
        for b in &self.blocks {
            let h = b.norm_attn.forward(g, x)?;
            let h = b.attn.forward(g, h, h, 1)?;
            x = g.add(x, h)?;
            let h = b.norm_ffn.forward(g, x)?;
            let h = b.ffn.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let tokens = self.norm.forward(g, x)?;
        let cls = g.gather_rows(tokens, &[0])?;
        Ok(Encoded { cls, tokens })
    }
}
