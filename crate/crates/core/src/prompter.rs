//! The entity/action prompter: contrastive pretraining of a dual encoder, heuristic
//! distributions from temporal and spatial crops, threshold filtering and freezing.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    Graph, HeadConfig, ParamStore, ProjectionHead, TextEncoder, TextEncoderConfig, VideoEncoder, VideoEncoderConfig,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::substrate::{argmax, check_distribution, softmax, Tape, Tensor, Var};
use crate::textproc::{convert_oe, PromptKind, PromptSet, TokenSequence, Vocabulary};
use crate::training::{clip_global_norm, AdamW};
use crate::videoproc::{random_mask, resize, sample_frames, spatial_crop_set, temporal_crop_set, VideoTensor};

pub const DEFAULT_THRESHOLD: f64 = 0.1;
pub const TOP_K: usize = 5;
pub const CHECKPOINT_KIND: &str = "prompter";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CropConfig {
    /// Frames sparsely sampled before cropping.
    pub frames: usize,
    pub temporal_crops: usize,
    pub spatial_crops: usize,
    /// Square crop side; crops are resized back to the frame size before encoding.
    pub crop_size: usize,
    pub mask: bool,
    pub mask_range: (f64, f64),
}

impl Default for CropConfig {
    fn default() -> Self {
        CropConfig {
            frames: 8,
            temporal_crops: 4,
            spatial_crops: 4,
            crop_size: 24,
            mask: false,
            mask_range: (0.5, 0.7),
        }
    }
}

impl CropConfig {
    pub fn count(&self, kind: PromptKind) -> usize {
        match kind {
            PromptKind::Action => self.temporal_crops,
            PromptKind::Entity => self.spatial_crops,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct PrompterConfig {
    pub video: VideoEncoderConfig,
    pub text: TextEncoderConfig,
    pub head: HeadConfig,
    /// One video encoder for both branches instead of two.
    pub share_video: bool,
    pub crops: CropConfig,
}


/// Dual encoder: an action video tower, an entity video tower, a text tower and the projection head.
#[derive(Clone, Debug)]
pub struct Prompter {
    pub config: PrompterConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    pub action_video: VideoEncoder,
    pub entity_video: VideoEncoder,
    pub text: TextEncoder,
    pub head: ProjectionHead,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    prompter: PrompterConfig,
    vocab: Vec<(String, u64)>,
}

impl Prompter {
    /// Fresh parameters. The text tower's vocabulary size is taken from `vocab`.
    pub fn new(config: &PrompterConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.text.vocab_size = vocab.len();
        if config.text.dim != config.video.dim {
            return Err(Error::config(format!(
                "text dim {} differs from video dim {}",
                config.text.dim, config.video.dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prompter-init", 0));
        let mut store = ParamStore::new();
        let action_video = VideoEncoder::new(&mut store, "action_video", &config.video, &mut rng)?;
        let entity_video = if config.share_video {
            action_video.clone()
        } else {
            VideoEncoder::new(&mut store, "entity_video", &config.video, &mut rng)?
        };
        let text = TextEncoder::new(&mut store, "text", &config.text, &mut rng)?;
        let head = ProjectionHead::new(&mut store, "head", config.video.dim, &config.head, &mut rng)?;
        Ok(Prompter {
            config,
            vocab,
            store,
            action_video,
            entity_video,
            text,
            head,
        })
    }

    pub fn video_encoder(&self, kind: PromptKind) -> &VideoEncoder {
        match kind {
            PromptKind::Action => &self.action_video,
            PromptKind::Entity => &self.entity_video,
        }
    }

    pub fn freeze(&mut self) {
        self.store.freeze();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.is_frozen()
    }

    pub fn checksum(&self) -> String {
        self.store.checksum()
    }

    pub fn tau(&self) -> f64 {
        self.head.tau(&self.store)
    }

    pub fn tokenize(&self, prompt: &str) -> TokenSequence {
        convert_oe(prompt, &self.vocab)
    }

    fn saved_config(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(SavedConfig {
            prompter: self.config.clone(),
            vocab: self.vocab.entries(),
        })?)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        self.store.write_checkpoint(w, CHECKPOINT_KIND, &self.saved_config()?)
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let (header, store) = ParamStore::read_checkpoint(r)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!("checkpoint holds a {:?}, not a prompter", header.kind)));
        }
        let saved: SavedConfig = serde_json::from_value(header.config)?;
        let mut p = Prompter::new(&saved.prompter, Vocabulary::from_entries(&saved.vocab), 0)?;
        let layout_matches = p.store.len() == store.len()
            && p.store
                .ids()
                .all(|id| p.store.name(id) == store.name(id) && p.store.get(id).shape() == store.get(id).shape());
        if !layout_matches {
            return Err(Error::Data("checkpoint parameters do not match the prompter layout".into()));
        }
        p.store = store;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Projected video embedding (`[1, p]`) of one clip.
    pub fn project_clip(&self, clip: &VideoTensor, kind: PromptKind) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store);
        let e = self.video_encoder(kind).forward(&mut g, clip)?;
        let v = self.head.project_video(&mut g, e.cls)?;
        Ok(g.value(v).data().to_vec())
    }

    /// Projected text embeddings, one row per prompt.
    pub fn project_prompts(&self, prompts: &[String]) -> Result<Tensor> {
        let mut rows = Vec::with_capacity(prompts.len());
        for p in prompts {
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &self.store);
            let e = self.text.forward(&mut g, &self.tokenize(p))?;
            let t = self.head.project_text(&mut g, e.cls)?;
            rows.push(g.value(t).data().to_vec());
        }
        Tensor::from_rows(&rows)
    }
}

/// The two directions of the contrastive loss and their average.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VtcTerms<T> {
    pub v2t: T,
    pub t2v: T,
    pub total: T,
}

/// Contrastive loss over a `B×B` similarity node, summed over the batch.
pub fn vtc_on_tape(tape: &mut Tape, s: Var, inv_tau: Var) -> Result<VtcTerms<Var>> {
    let shape = tape.shape(s).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape(format!("similarity matrix must be square, got {shape:?}")));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::arg(format!("contrastive loss needs a batch of at least 2, got {b}")));
    }
    let mut eye = Tensor::zeros(&[b, b]);
    for i in 0..b {
        eye.data_mut()[i * b + i] = 1.0;
    }
    let eye = tape.constant(eye);
    let logits = tape.mul_scalar(s, inv_tau)?;
    let direction = |tape: &mut Tape, l: Var| -> Result<Var> {
        let lp = tape.log_softmax_rows(l);
        let diag = tape.mul(lp, eye)?;
        let sum = tape.sum(diag);
        Ok(tape.scale(sum, -1.0))
    };
    let v2t = direction(tape, logits)?;
    let lt = tape.transpose(logits)?;
    let t2v = direction(tape, lt)?;
    let both = tape.add(v2t, t2v)?;
    let total = tape.scale(both, 0.5);
    Ok(VtcTerms { v2t, t2v, total })
}

/// Contrastive loss of a given similarity matrix at temperature `tau`.
pub fn vtc_from_similarity(s: &Tensor, tau: f64) -> Result<VtcTerms<f64>> {
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("temperature {tau} must be positive")));
    }
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let it = tape.constant(Tensor::scalar(1.0 / tau));
    let t = vtc_on_tape(&mut tape, sv, it)?;
    Ok(VtcTerms {
        v2t: tape.value(t.v2t).item(),
        t2v: tape.value(t.t2v).item(),
        total: tape.value(t.total).item(),
    })
}

/// Contrastive loss of row-stacked `[B, d]` embeddings under `head`.
pub fn vtc_loss(video_cls: &Tensor, text_cls: &Tensor, head: &ProjectionHead, store: &ParamStore) -> Result<f64> {
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, store);
    let v = g.constant(video_cls.clone());
    let t = g.constant(text_cls.clone());
    let s = head.similarity_matrix(&mut g, v, t)?;
    let it = head.inv_tau(&mut g);
    let terms = vtc_on_tape(&mut g, s, it)?;
    Ok(g.value(terms.total).item())
}

/// One contrastive training pair: a clip for the branch of `kind` and its prompt text.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainPair {
    pub kind: PromptKind,
    pub clip: VideoTensor,
    pub text: String,
}

/// Forward, backward, clip to `max_grad_norm` and one optimizer step; returns the loss and τ before the step.
pub fn pretrain_step(
    prompter: &mut Prompter,
    batch: &[PretrainPair],
    optimizer: &mut AdamW,
    lr: f64,
    max_grad_norm: f64,
) -> Result<(f64, f64)> {
    if prompter.is_frozen() {
        return Err(Error::State("prompter is frozen".into()));
    }
    let (loss, mut grads) = {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &prompter.store);
        let mut vs = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for pair in batch {
            vs.push(prompter.video_encoder(pair.kind).forward(&mut g, &pair.clip)?.cls);
            ts.push(prompter.text.forward(&mut g, &prompter.tokenize(&pair.text))?.cls);
        }
        let v = g.concat_rows(&vs)?;
        let t = g.concat_rows(&ts)?;
        let s = prompter.head.similarity_matrix(&mut g, v, t)?;
        let it = prompter.head.inv_tau(&mut g);
        let terms = vtc_on_tape(&mut g, s, it)?;
        let loss = g.value(terms.total).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("contrastive loss is {loss}")));
        }
        let grads = g.backward(terms.total)?;
        (loss, g.param_grads(&grads))
    };
    let tau = prompter.tau();
    clip_global_norm(&mut grads, max_grad_norm);
    optimizer.step(&mut prompter.store, &grads, lr)?;
    Ok((loss, tau))
}

/// A softmax-normalized score vector over one prompt set's words.
#[derive(Clone, Debug, PartialEq)]
pub struct HeuristicDistribution {
    pub video_id: String,
    pub kind: PromptKind,
    pub scores: Vec<f64>,
    pub crop_count: usize,
}

impl HeuristicDistribution {
    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-crop word distribution: similarities averaged over each word's templates, divided by `tau`, softmaxed.
pub fn crop_distribution(crop: &[f64], prompts: &Tensor, templates_per_word: usize, tau: f64) -> Result<Vec<f64>> {
    let n = prompts.rows();
    if templates_per_word == 0 || !n.is_multiple_of(templates_per_word) {
        return Err(Error::shape(format!("{n} prompts do not split into groups of {templates_per_word}")));
    }
    if prompts.cols() != crop.len() {
        return Err(Error::shape(format!(
            "crop embedding of {} against prompts of {}",
            crop.len(),
            prompts.cols()
        )));
    }
    let sims: Vec<f64> = (0..n)
        .map(|i| prompts.row(i).iter().zip(crop).map(|(a, b)| a * b).sum())
        .collect();
    let words: Vec<f64> = sims
        .chunks(templates_per_word)
        .map(|c| c.iter().sum::<f64>() / templates_per_word as f64)
        .collect();
    softmax(&words, tau)
}

/// Equal-weight mean of per-crop distributions.
pub fn aggregate_crops(per_crop: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = per_crop.first().ok_or_else(|| Error::arg("no crops to aggregate"))?;
    if per_crop.iter().any(|d| d.len() != first.len()) {
        return Err(Error::shape("crop distributions differ in length"));
    }
    let k = per_crop.len() as f64;
    Ok((0..first.len())
        .map(|j| per_crop.iter().map(|d| d[j]).sum::<f64>() / k)
        .collect())
}

fn crop_seed(seed: u64, kind: PromptKind, video_id: &str) -> u64 {
    derive_seed(seed, &format!("heuristic-crops/{kind}/{video_id}"), 0)
}

/// The clips a heuristic of `kind` is computed from: sampled frames, cropped, resized back to frame size.
pub fn heuristic_crops(video: &VideoTensor, kind: PromptKind, crops: &CropConfig, seed: u64) -> Result<Vec<VideoTensor>> {
    let (sampled, _) = sample_frames(video, crops.frames.min(video.frames()), derive_seed(seed, "frames", 0))?;
    let size = (crops.crop_size, crops.crop_size);
    let count = crops.count(kind);
    if count == 0 {
        return Err(Error::config(format!("{kind} crop count must be positive")));
    }
    let cut = match kind {
        PromptKind::Action => temporal_crop_set(&sampled, count, size, derive_seed(seed, "crops", 0))?,
        PromptKind::Entity => spatial_crop_set(&sampled, count, size, derive_seed(seed, "crops", 0))?,
    };
    cut.into_iter()
        .enumerate()
        .map(|(i, (clip, _))| {
            let clip = resize(&clip, video.height(), video.width())?;
            if crops.mask {
                Ok(random_mask(&clip, crops.mask_range, 8, derive_seed(seed, "mask", i as u64))?.0)
            } else {
                Ok(clip)
            }
        })
        .collect()
}

/// Heuristic over the words of `prompts` for one video; the crop kind follows `prompts.kind`.
pub fn heuristics(
    prompter: &Prompter,
    video_id: &str,
    video: &VideoTensor,
    prompts: &PromptSet,
    prompt_embeddings: &Tensor,
    seed: u64,
) -> Result<HeuristicDistribution> {
    if !prompter.is_frozen() {
        return Err(Error::State("prompter not frozen".into()));
    }
    if prompts.is_empty() {
        return Err(Error::arg("empty prompt set"));
    }
    let kind = prompts.kind;
    let clips = heuristic_crops(video, kind, &prompter.config.crops, crop_seed(seed, kind, video_id))?;
    let tau = prompter.tau();
    let per_crop = clips
        .iter()
        .map(|c| {
            let v = prompter.project_clip(c, kind)?;
            crop_distribution(&v, prompt_embeddings, prompts.templates_per_word, tau)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = aggregate_crops(&per_crop)?;
    check_distribution(&scores, "heuristic")?;
    Ok(HeuristicDistribution {
        video_id: video_id.to_string(),
        kind,
        scores,
        crop_count: clips.len(),
    })
}

fn expect_kind(prompts: &PromptSet, kind: PromptKind) -> Result<()> {
    if prompts.kind != kind {
        return Err(Error::arg(format!("expected {kind} prompts, got {}", prompts.kind)));
    }
    Ok(())
}

/// Action heuristic from temporal crops.
pub fn action_heuristics(
    prompter: &Prompter,
    video_id: &str,
    video: &VideoTensor,
    prompts: &PromptSet,
    seed: u64,
) -> Result<HeuristicDistribution> {
    expect_kind(prompts, PromptKind::Action)?;
    let emb = prompter.project_prompts(&prompts.prompts)?;
    heuristics(prompter, video_id, video, prompts, &emb, seed)
}

/// Entity heuristic from spatial crops.
pub fn entity_heuristics(
    prompter: &Prompter,
    video_id: &str,
    video: &VideoTensor,
    prompts: &PromptSet,
    seed: u64,
) -> Result<HeuristicDistribution> {
    expect_kind(prompts, PromptKind::Entity)?;
    let emb = prompter.project_prompts(&prompts.prompts)?;
    heuristics(prompter, video_id, video, prompts, &emb, seed)
}

/// `Some(dist)` when its largest score reaches `threshold`.
pub fn filter_heuristic(dist: HeuristicDistribution, threshold: f64) -> Option<HeuristicDistribution> {
    (dist.max_score() >= threshold).then_some(dist)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub word: String,
    pub score: f64,
}

/// One heuristic-store line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicRecord {
    pub video_id: String,
    pub kind: PromptKind,
    pub scores: Vec<f64>,
    pub top: Vec<TopEntry>,
    pub kept: bool,
}

impl HeuristicRecord {
    pub fn new(dist: &HeuristicDistribution, words: &[String], threshold: f64) -> Result<Self> {
        if words.len() != dist.scores.len() {
            return Err(Error::shape(format!(
                "{} words for {} scores",
                words.len(),
                dist.scores.len()
            )));
        }
        Ok(HeuristicRecord {
            video_id: dist.video_id.clone(),
            kind: dist.kind,
            scores: dist.scores.clone(),
            top: top_k(&dist.scores, words, TOP_K),
            kept: dist.max_score() >= threshold,
        })
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The `k` highest scores with their words; ties keep index order.
pub fn top_k(scores: &[f64], words: &[String], k: usize) -> Vec<TopEntry> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
        .into_iter()
        .take(k)
        .map(|i| TopEntry {
            word: words[i].clone(),
            score: scores[i],
        })
        .collect()
}

/// Heuristics for every video, action then entity, in input order.
pub fn generate_heuristics(
    prompter: &Prompter,
    videos: &[(String, VideoTensor)],
    action: &PromptSet,
    entity: &PromptSet,
    seed: u64,
    threshold: f64,
) -> Result<Vec<HeuristicRecord>> {
    expect_kind(action, PromptKind::Action)?;
    expect_kind(entity, PromptKind::Entity)?;
    if !prompter.is_frozen() {
        return Err(Error::State("prompter not frozen".into()));
    }
    let action_emb = prompter.project_prompts(&action.prompts)?;
    let entity_emb = prompter.project_prompts(&entity.prompts)?;
    let mut out = Vec::with_capacity(2 * videos.len());
    for (id, video) in videos {
        for (set, emb) in [(action, &action_emb), (entity, &entity_emb)] {
            let d = heuristics(prompter, id, video, set, emb, seed)?;
            out.push(HeuristicRecord::new(&d, &set.words, threshold)?);
        }
    }
    Ok(out)
}

pub fn write_heuristic_store<W: Write>(mut w: W, records: &[HeuristicRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_heuristic_store<R: BufRead>(r: R) -> Result<Vec<HeuristicRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Heuristic records keyed by `(video id, kind)`.
#[derive(Clone, Debug, Default)]
pub struct HeuristicStore {
    records: HashMap<(String, PromptKind), HeuristicRecord>,
}

impl HeuristicStore {
    pub fn new(records: Vec<HeuristicRecord>) -> Result<Self> {
        let mut map = HashMap::with_capacity(records.len());
        for r in records {
            check_distribution(&r.scores, "stored heuristic")?;
            let key = (r.video_id.clone(), r.kind);
            if map.insert(key, r).is_some() {
                return Err(Error::Data("duplicate heuristic record".into()));
            }
        }
        Ok(HeuristicStore { records: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(read_heuristic_store(std::io::BufReader::new(std::fs::File::open(path)?))?)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, video_id: &str, kind: PromptKind) -> Option<&HeuristicRecord> {
        self.records.get(&(video_id.to_string(), kind))
    }

    pub fn contains_video(&self, video_id: &str) -> bool {
        self.get(video_id, PromptKind::Action).is_some() || self.get(video_id, PromptKind::Entity).is_some()
    }

    /// Training target: scores of a kept record; `None` when missing or filtered.
    pub fn target(&self, video_id: &str, kind: PromptKind) -> Option<&[f64]> {
        self.get(video_id, kind).filter(|r| r.kept).map(|r| r.scores.as_slice())
    }

    /// Index-space size per kind (all records of a kind must agree).
    pub fn width(&self, kind: PromptKind) -> Result<Option<usize>> {
        let mut w = None;
        for ((_, k), r) in &self.records {
            if *k != kind {
                continue;
            }
            match w {
                None => w = Some(r.scores.len()),
                Some(n) if n != r.scores.len() => {
                    return Err(Error::Data(format!("{kind} heuristics disagree in length")));
                }
                _ => {}
            }
        }
        Ok(w)
    }
}

/// Argmax of a single-crop distribution at temperature `tau`.
pub fn crop_argmax(crop: &[f64], prompts: &Tensor, templates_per_word: usize, tau: f64) -> Result<usize> {
    Ok(argmax(&crop_distribution(crop, prompts, templates_per_word, tau)?))
}
