//! The question-answering model: cross-modal fusion, heuristic heads with their
//! soft-target losses, answer prediction, the question-conditioned gate and the
//! combined objective.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{
    Attention, Encoded, FeedForward, Graph, LayerNorm, Linear, ParamStore, TextEncoder, TextEncoderConfig,
    VideoEncoder, VideoEncoderConfig,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::substrate::{argmax, soft_cross_entropy, softmax, Tape, Tensor, Var};
use crate::textproc::{TokenSequence, Vocabulary};
use crate::videoproc::QuestionType;

pub const CHECKPOINT_KIND: &str = "reasoner";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    /// Multiple choice: one score per candidate.
    Mc,
    /// Open ended: logits over the global answer list.
    Oe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// `L_pred + α·L_TAM + (1−α)·L_SEM`
    FixedAlpha,
    /// `L_pred + g·L_TAM + (1−g)·L_SEM`
    Gated,
    /// `L_pred` alone.
    NoHeuristics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub mode: LossMode,
    pub alpha: f64,
    /// Gate hidden width; 0 means half the model dim.
    pub gate_hidden: usize,
    pub dropout: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: LossMode::Gated,
            alpha: 0.5,
            gate_hidden: 0,
            dropout: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    pub video: VideoEncoderConfig,
    pub text: TextEncoderConfig,
    pub fusion_layers: usize,
    pub answer_mode: AnswerMode,
    /// Action and entity index-space sizes (M, N).
    pub num_actions: usize,
    pub num_entities: usize,
    pub loss: LossConfig,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            video: VideoEncoderConfig::default(),
            text: TextEncoderConfig::default(),
            fusion_layers: 1,
            answer_mode: AnswerMode::Mc,
            num_actions: 4,
            num_entities: 4,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct FusionBlock {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Fused sequence on a tape: fused text tokens followed by the video tokens.
#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// `[1, d]`
    pub e_cls: Var,
    /// `[N_t + N_v, d]`
    pub tokens: Var,
}

/// One sample ready for the model.
#[derive(Clone, Debug)]
pub struct ModelInput {
    /// One sequence per candidate (MC) or the question alone (OE).
    pub texts: Vec<TokenSequence>,
    /// `[CLS] question`, read by the gate.
    pub question: TokenSequence,
    /// Ground-truth index into candidates (MC) or answers (OE); `None` for an unseen OE answer.
    pub label: Option<usize>,
    pub h_action: Option<Vec<f64>>,
    pub h_entity: Option<Vec<f64>>,
}

/// Per-sample loss nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub logits: Var,
    pub pred: Var,
    pub tam: Var,
    pub sem: Var,
    pub gate: Var,
    pub total: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub predicted: usize,
    pub truth: Option<usize>,
}

/// Predicts `argmax(logits)` (lowest index on ties).
pub fn predict(logits: &[f64], truth: Option<usize>) -> Result<Prediction> {
    if logits.is_empty() {
        return Err(Error::arg("no candidates to predict from"));
    }
    Ok(Prediction {
        logits: logits.to_vec(),
        predicted: argmax(logits),
        truth,
    })
}

/// Cross entropy of the softmaxed logits against the one-hot truth.
pub fn pred_loss(p: &Prediction) -> Result<f64> {
    let y = p
        .truth
        .filter(|&y| y < p.logits.len())
        .ok_or_else(|| Error::arg(format!("truth {:?} outside {} logits", p.truth, p.logits.len())))?;
    let mx = p.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + p.logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    Ok(lse - p.logits[y])
}

/// Soft cross entropy of the action head against its heuristic; exactly 0 when filtered.
pub fn tam_loss(p_action: &[f64], h_action: Option<&[f64]>) -> Result<f64> {
    h_action.map_or(Ok(0.0), |h| soft_cross_entropy(h, p_action))
}

/// Entity counterpart of [`tam_loss`].
pub fn sem_loss(p_entity: &[f64], h_entity: Option<&[f64]>) -> Result<f64> {
    h_entity.map_or(Ok(0.0), |h| soft_cross_entropy(h, p_entity))
}

/// Combined objective; `g` is read only in gated mode.
pub fn total_loss(pred: f64, tam: f64, sem: f64, config: &LossConfig, g: Option<f64>) -> Result<f64> {
    config.validate()?;
    match config.mode {
        LossMode::FixedAlpha => Ok(pred + config.alpha * tam + (1.0 - config.alpha) * sem),
        LossMode::Gated => {
            let g = g.ok_or_else(|| Error::arg("gated loss needs a gate value"))?;
            Ok(pred + g * tam + (1.0 - g) * sem)
        }
        LossMode::NoHeuristics => Ok(pred),
    }
}

/// Combined objective on a tape, mirroring [`total_loss`].
pub fn total_loss_on_tape(tape: &mut Tape, pred: Var, tam: Var, sem: Var, g: Var, config: &LossConfig) -> Result<Var> {
    match config.mode {
        LossMode::FixedAlpha => {
            let a = tape.scale(tam, config.alpha);
            let b = tape.scale(sem, 1.0 - config.alpha);
            let l = tape.add(pred, a)?;
            tape.add(l, b)
        }
        LossMode::Gated => {
            let one = tape.constant(Tensor::full(tape.shape(g), 1.0));
            let omg = tape.sub(one, g)?;
            let a = tape.mul_scalar(tam, g)?;
            let b = tape.mul_scalar(sem, omg)?;
            let l = tape.add(pred, a)?;
            tape.add(l, b)
        }
        LossMode::NoHeuristics => Ok(pred),
    }
}

/// Mean over rows of `−Σ h·log softmax(logits)`; a constant 0 when the heuristic is absent.
fn soft_target_loss(tape: &mut Tape, logits: Var, target: Option<&[f64]>) -> Result<Var> {
    let Some(h) = target else {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    };
    let (rows, cols) = (tape.value(logits).rows(), tape.value(logits).cols());
    if h.len() != cols {
        return Err(Error::shape(format!("heuristic of {} against {cols} classes", h.len())));
    }
    let tiled: Vec<f64> = (0..rows).flat_map(|_| h.iter().copied()).collect();
    let t = tape.constant(Tensor::new(vec![rows, cols], tiled)?);
    let lp = tape.log_softmax_rows(logits);
    let prod = tape.mul(t, lp)?;
    let s = tape.sum(prod);
    Ok(tape.scale(s, -1.0 / rows as f64))
}

#[derive(Clone, Debug)]
pub struct Reasoner {
    pub config: ReasonerConfig,
    pub vocab: Vocabulary,
    /// Open-ended answer list; empty in MC mode.
    pub answers: Vec<String>,
    pub store: ParamStore,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    fusion: Vec<FusionBlock>,
    fusion_norm: LayerNorm,
    pub action_head: Linear,
    pub entity_head: Linear,
    pub answer_head: Linear,
    pub gate_hidden: Linear,
    pub gate_out: Linear,
}

#[derive(Serialize, Deserialize)]
struct SavedConfig {
    reasoner: ReasonerConfig,
    vocab: Vec<(String, u64)>,
    answers: Vec<String>,
}

impl Reasoner {
    pub fn new(config: &ReasonerConfig, vocab: Vocabulary, answers: Vec<String>, seed: u64) -> Result<Self> {
        let mut config = config.clone();
        config.text.vocab_size = vocab.len();
        config.loss.validate()?;
        let d = config.video.dim;
        if config.text.dim != d {
            return Err(Error::config(format!("text dim {} differs from video dim {d}", config.text.dim)));
        }
        if config.fusion_layers == 0 {
            return Err(Error::config("fusion needs at least one layer"));
        }
        if config.num_actions == 0 || config.num_entities == 0 {
            return Err(Error::config("heuristic heads need at least one class each"));
        }
        if config.answer_mode == AnswerMode::Oe && answers.is_empty() {
            return Err(Error::config("open-ended mode needs an answer list"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "reasoner-init", 0));
        let mut store = ParamStore::new();
        let video = VideoEncoder::new(&mut store, "video", &config.video, &mut rng)?;
        let text = TextEncoder::new(&mut store, "text", &config.text, &mut rng)?;
        let heads = config.text.heads;
        let mut fusion = Vec::with_capacity(config.fusion_layers);
        for l in 0..config.fusion_layers {
            let p = format!("fusion.block{l}");
            fusion.push(FusionBlock {
                norm_self: LayerNorm::new(&mut store, &format!("{p}.norm_self"), d)?,
                self_attn: Attention::new(&mut store, &format!("{p}.self_attn"), d, heads, &mut rng)?,
                norm_cross: LayerNorm::new(&mut store, &format!("{p}.norm_cross"), d)?,
                cross_attn: Attention::new(&mut store, &format!("{p}.cross_attn"), d, heads, &mut rng)?,
                norm_ffn: LayerNorm::new(&mut store, &format!("{p}.norm_ffn"), d)?,
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, 2 * d, &mut rng)?,
            });
        }
        let fusion_norm = LayerNorm::new(&mut store, "fusion.norm", d)?;
        let action_head = Linear::new(&mut store, "action_head", d, config.num_actions, true, &mut rng)?;
        let entity_head = Linear::new(&mut store, "entity_head", d, config.num_entities, true, &mut rng)?;
        let out = match config.answer_mode {
            AnswerMode::Mc => 1,
            AnswerMode::Oe => answers.len(),
        };
        let answer_head = Linear::new(&mut store, "answer_head", d, out, true, &mut rng)?;
        let hidden = if config.loss.gate_hidden == 0 { (d / 2).max(1) } else { config.loss.gate_hidden };
        let gate_hidden = Linear::new(&mut store, "gate.hidden", d, hidden, true, &mut rng)?;
        let gate_out = Linear::zeros(&mut store, "gate.out", hidden, 1)?;
        Ok(Reasoner {
            config,
            vocab,
            answers,
            store,
            video,
            text,
            fusion,
            fusion_norm,
            action_head,
            entity_head,
            answer_head,
            gate_hidden,
            gate_out,
        })
    }

    fn saved_config(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(SavedConfig {
            reasoner: self.config.clone(),
            vocab: self.vocab.entries(),
            answers: self.answers.clone(),
        })?)
    }

    pub fn write_checkpoint<W: Write>(&self, w: W) -> Result<()> {
        self.store.write_checkpoint(w, CHECKPOINT_KIND, &self.saved_config()?)
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let (header, store) = ParamStore::read_checkpoint(r)?;
        if header.kind != CHECKPOINT_KIND {
            return Err(Error::Data(format!("checkpoint holds a {:?}, not a reasoner", header.kind)));
        }
        let saved: SavedConfig = serde_json::from_value(header.config)?;
        let mut m = Reasoner::new(&saved.reasoner, Vocabulary::from_entries(&saved.vocab), saved.answers, 0)?;
        let matches = m.store.len() == store.len()
            && m.store
                .ids()
                .all(|id| m.store.name(id) == store.name(id) && m.store.get(id).shape() == store.get(id).shape());
        if !matches {
            return Err(Error::Data("checkpoint parameters do not match the reasoner layout".into()));
        }
        m.store = store;
        Ok(m)
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

    /// Text self-attention, text-to-video cross-attention and a feed-forward layer per block.
    pub fn fuse(&self, g: &mut Graph, video: Encoded, text: Encoded) -> Result<FusionOutput> {
        let (dv, dt) = (g.value(video.tokens).cols(), g.value(text.tokens).cols());
        if dv != dt {
            return Err(Error::shape(format!("video dim {dv} and text dim {dt} differ")));
        }
        let mut x = text.tokens;
        for b in &self.fusion {
            let h = b.norm_self.forward(g, x)?;
            let h = b.self_attn.forward(g, h, h, 1)?;
            x = g.add(x, h)?;
            let h = b.norm_cross.forward(g, x)?;
            let h = b.cross_attn.forward(g, h, video.tokens, 1)?;
            x = g.add(x, h)?;
            let h = b.norm_ffn.forward(g, x)?;
            let h = b.ffn.forward(g, h)?;
            x = g.add(x, h)?;
        }
        let x = self.fusion_norm.forward(g, x)?;
        let e_cls = g.gather_rows(x, &[0])?;
        let tokens = g.concat_rows(&[x, video.tokens])?;
        Ok(FusionOutput { e_cls, tokens })
    }

    /// Action and entity logits (`[K, M]`, `[K, N]`) of row-stacked `e_cls`.
    pub fn heuristic_logits(&self, g: &mut Graph, e_cls: Var) -> Result<(Var, Var)> {
        Ok((self.action_head.forward(g, e_cls)?, self.entity_head.forward(g, e_cls)?))
    }

    /// Gate value `[1, 1]` from the question's `[CLS]` embedding; dropout follows the graph's mode.
    pub fn gate(&self, g: &mut Graph, t_cls: Var) -> Result<Var> {
        let h = self.gate_hidden.forward(g, t_cls)?;
        let h = g.gelu(h);
        let h = g.dropout(h, self.config.loss.dropout)?;
        let o = self.gate_out.forward(g, h)?;
        Ok(g.sigmoid(o))
    }

    /// Row-stacked `e_cls` of every text sequence fused with one video encoding.
    pub fn fused_cls(&self, g: &mut Graph, video: Encoded, texts: &[TokenSequence]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::arg("empty candidate list"));
        }
        let mut rows = Vec::with_capacity(texts.len());
        for t in texts {
            let te = self.text.forward(g, t)?;
            rows.push(self.fuse(g, video, te)?.e_cls);
        }
        g.concat_rows(&rows)
    }

    /// Answer logits `[1, K]` (MC) or `[1, |A|]` (OE).
    pub fn answer_logits(&self, g: &mut Graph, e_cls: Var) -> Result<Var> {
        let s = self.answer_head.forward(g, e_cls)?;
        match self.config.answer_mode {
            AnswerMode::Mc => {
                let k = g.value(s).rows();
                g.reshape(s, &[1, k])
            }
            AnswerMode::Oe => {
                if g.value(e_cls).rows() != 1 {
                    return Err(Error::arg("open-ended mode takes a single sequence"));
                }
                Ok(s)
            }
        }
    }

    /// Every loss term of one sample, with a pre-encoded video.
    pub fn sample_losses(&self, g: &mut Graph, video: Encoded, input: &ModelInput) -> Result<LossNodes> {
        let e = self.fused_cls(g, video, &input.texts)?;
        let logits = self.answer_logits(g, e)?;
        let label = input.label.ok_or_else(|| Error::arg("training sample has no label"))?;
        let pred = g.cross_entropy_logits(logits, label)?;
        let (la, le) = self.heuristic_logits(g, e)?;
        let tam = soft_target_loss(g, la, input.h_action.as_deref())?;
        let sem = soft_target_loss(g, le, input.h_entity.as_deref())?;
        let q = self.text.forward(g, &input.question)?;
        let gate = self.gate(g, q.cls)?;
        let total = total_loss_on_tape(g, pred, tam, sem, gate, &self.config.loss)?;
        Ok(LossNodes {
            logits,
            pred,
            tam,
            sem,
            gate,
            total,
        })
    }

    /// Answer logits for evaluation (no dropout, no gradients).
    pub fn infer(&self, video: &crate::videoproc::VideoTensor, texts: &[TokenSequence]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store);
        let v = self.video.forward(&mut g, video)?;
        let e = self.fused_cls(&mut g, v, texts)?;
        let l = self.answer_logits(&mut g, e)?;
        Ok(g.value(l).data().to_vec())
    }

    /// Heuristic-head distributions of one `e_cls` row.
    pub fn heuristic_heads(&self, e_cls: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store);
        let e = g.constant(Tensor::matrix(1, e_cls.len(), e_cls.to_vec())?);
        let (a, n) = self.heuristic_logits(&mut g, e)?;
        Ok((softmax(g.value(a).data(), 1.0)?, softmax(g.value(n).data(), 1.0)?))
    }

    /// Evaluation-mode gate value for a question.
    pub fn gate_value(&self, question: &TokenSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &self.store);
        let q = self.text.forward(&mut g, question)?;
        let v = self.gate(&mut g, q.cls)?;
        Ok(g.value(v).item())
    }
}

/// Accuracy summary written after QA training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy_overall: f64,
    pub accuracy_by_question_type: std::collections::BTreeMap<String, f64>,
    pub num_samples: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn from_outcomes(outcomes: &[(QuestionType, bool)], seed: u64) -> Self {
        let acc = |xs: &[bool]| {
            if xs.is_empty() {
                0.0
            } else {
                xs.iter().filter(|&&c| c).count() as f64 / xs.len() as f64
            }
        };
        let all: Vec<bool> = outcomes.iter().map(|o| o.1).collect();
        let mut by = std::collections::BTreeMap::new();
        for qt in QuestionType::ALL {
            let xs: Vec<bool> = outcomes.iter().filter(|o| o.0 == qt).map(|o| o.1).collect();
            if !xs.is_empty() {
                by.insert(qt.as_str().to_string(), acc(&xs));
            }
        }
        EvalReport {
            accuracy_overall: acc(&all),
            accuracy_by_question_type: by,
            num_samples: outcomes.len(),
            seed,
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::substrate::{entropy, grad_check};
    use rand::Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_texts(["what is the box doing", "advance retreat grow shrink ball in video thing"])
    }

    pub(crate) fn tiny(mode: LossMode) -> ReasonerConfig {
        ReasonerConfig {
            video: VideoEncoderConfig {
                layers: 1,
                dim: 16,
                heads: 2,
                max_frames: 2,
                max_patches: 4,
                ..Default::default()
            },
            text: TextEncoderConfig {
                layers: 1,
                dim: 16,
                heads: 2,
                max_len: 12,
                ..Default::default()
            },
            fusion_layers: 1,
            answer_mode: AnswerMode::Mc,
            num_actions: 3,
            num_entities: 2,
            loss: LossConfig {
                mode,
                ..Default::default()
            },
        }
    }

    fn video(seed: u64) -> crate::videoproc::VideoTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 2 * 16 * 16).map(|_| r.gen::<f32>()).collect();
        crate::videoproc::VideoTensor::new(3, 2, 16, 16, data).unwrap()
    }

    fn input(v: &Vocabulary) -> ModelInput {
        let q = "what is the box doing";
        ModelInput {
            texts: ["advance", "grow"]
                .iter()
                .map(|c| crate::textproc::convert_mc(q, c, v))
                .collect(),
            question: crate::textproc::convert_oe(q, v),
            label: Some(1),
            h_action: Some(vec![0.2, 0.5, 0.3]),
            h_entity: Some(vec![0.7, 0.3]),
        }
    }

    #[test]
    fn fusion_shape_and_zero_video() {
        let mut cfg = tiny(LossMode::Gated);
        cfg.video.max_frames = 4;
        let m = Reasoner::new(&cfg, vocab(), vec![], 1).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &m.store);
        let v = m.video.forward(&mut g, &crate::videoproc::VideoTensor::zeros(3, 4, 16, 16)).unwrap();
        let t = m.text.forward(&mut g, &TokenSequence(vec![2, 4, 5, 6, 7, 8, 9, 10])).unwrap();
        let f = m.fuse(&mut g, v, t).unwrap();
        assert_eq!(g.shape(f.tokens), &[25, 16]);
        assert!(g.value(f.e_cls).is_finite());
    }

    #[test]
    fn fusion_rejects_dim_mismatch() {
        let m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 1).unwrap();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &m.store);
        let v = g.constant(Tensor::zeros(&[5, 8]));
        let t = m.text.forward(&mut g, &TokenSequence(vec![2, 4])).unwrap();
        let bad = Encoded { cls: v, tokens: v };
        assert!(matches!(m.fuse(&mut g, bad, t), Err(Error::Shape(_))));
    }

    #[test]
    fn heads_normalize_and_are_independent() {
        let mut m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 1).unwrap();
        let e: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let (pa, pe) = m.heuristic_heads(&e).unwrap();
        assert_eq!(pa.len(), 3);
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((pe.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let w = m.entity_head.weight;
        let t = m.store.get_mut(w).unwrap();
        *t = t.map(|x| x + 0.5);
        let (pa2, pe2) = m.heuristic_heads(&e).unwrap();
        assert_eq!(pa, pa2);
        assert_ne!(pe, pe2);
        for id in [m.action_head.weight, m.action_head.bias.unwrap()] {
            let t = m.store.get_mut(id).unwrap();
            *t = t.map(|_| 0.0);
        }
        let (pa3, _) = m.heuristic_heads(&e).unwrap();
        assert!(pa3.iter().all(|&p| (p - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn tam_sem_reference_values() {
        assert!((tam_loss(&[0.5, 0.5], Some(&[1.0, 0.0])).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let h = [0.7, 0.3];
        let s = sem_loss(&h, Some(&h)).unwrap();
        assert!((s - 0.610864).abs() < 1e-6);
        assert!((s - entropy(&h)).abs() < 1e-15);
        assert_eq!(sem_loss(&[1.0, 0.0], Some(&[1.0, 0.0])).unwrap(), 0.0);
        assert_eq!(tam_loss(&[0.2, 0.8], None).unwrap(), 0.0);
        assert_eq!(tam_loss(&h, Some(&[0.4, 0.6])).unwrap(), sem_loss(&h, Some(&[0.4, 0.6])).unwrap());
        assert!(matches!(tam_loss(&[0.5, 0.5], Some(&[1.0, 0.0, 0.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn prediction_rules() {
        let p = predict(&[0.1, 2.0, 0.3, 0.1, 0.1], Some(1)).unwrap();
        assert_eq!(p.predicted, 1);
        assert_eq!(predict(&[0.0; 6], None).unwrap().predicted, 0);
        assert!(matches!(predict(&[], None), Err(Error::Argument(_))));
        let u = pred_loss(&predict(&[0.3; 5], Some(2)).unwrap()).unwrap();
        assert!((u - 5f64.ln()).abs() < 1e-12);
        let sharp = pred_loss(&predict(&[0.0, 20.0, 0.0], Some(1)).unwrap()).unwrap();
        assert!(sharp < 1e-4);
        let lower = pred_loss(&predict(&[0.0, 21.0, 0.0], Some(1)).unwrap()).unwrap();
        assert!(lower < sharp);
        assert!(matches!(pred_loss(&predict(&[0.0, 1.0], Some(2)).unwrap()), Err(Error::Argument(_))));
    }

    #[test]
    fn oe_zero_head_ties_to_first() {
        let mut cfg = tiny(LossMode::Gated);
        cfg.answer_mode = AnswerMode::Oe;
        let answers: Vec<String> = ["advance", "grow", "shrink"].iter().map(|s| s.to_string()).collect();
        let mut m = Reasoner::new(&cfg, vocab(), answers, 1).unwrap();
        for id in [m.answer_head.weight, m.answer_head.bias.unwrap()] {
            let t = m.store.get_mut(id).unwrap();
            *t = t.map(|_| 0.0);
        }
        let l = m.infer(&video(1), &[TokenSequence(vec![2, 4, 5])]).unwrap();
        assert_eq!(l, vec![0.0; 3]);
        assert_eq!(predict(&l, None).unwrap().predicted, 0);
    }

    #[test]
    fn mc_logits_follow_candidate_permutation() {
        let m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 3).unwrap();
        let v = vocab();
        let q = "what is the box doing";
        let cands = ["advance", "retreat", "grow", "shrink"];
        let seqs: Vec<TokenSequence> = cands.iter().map(|c| crate::textproc::convert_mc(q, c, &v)).collect();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<TokenSequence> = perm.iter().map(|&i| seqs[i].clone()).collect();
        let vid = video(4);
        let a = m.infer(&vid, &seqs).unwrap();
        let b = m.infer(&vid, &permuted).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b[k], a[i]);
        }
    }

    #[test]
    fn gate_properties() {
        let m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 1).unwrap();
        let q = TokenSequence(vec![2, 4, 5, 6]);
        assert_eq!(m.gate_value(&q).unwrap(), 0.5);
        let mut m2 = m.clone();
        let t = m2.store.get_mut(m2.gate_out.weight).unwrap();
        *t = t.map(|_| 3.0);
        let g1 = m2.gate_value(&q).unwrap();
        assert!(g1 > 0.0 && g1 < 1.0 && g1 != 0.5);
        assert_eq!(g1, m2.gate_value(&q).unwrap());
    }

    #[test]
    fn objective_algebra() {
        let fixed = LossConfig {
            mode: LossMode::FixedAlpha,
            ..Default::default()
        };
        let gated = LossConfig {
            mode: LossMode::Gated,
            ..Default::default()
        };
        assert_eq!(total_loss(1.0, 0.4, 0.6, &fixed, None).unwrap(), 1.5);
        assert!((total_loss(1.0, 0.4, 0.6, &gated, Some(0.25)).unwrap() - 1.55).abs() < 1e-15);
        assert_eq!(
            total_loss(1.3, 0.7, 0.2, &gated, Some(0.5)).unwrap(),
            total_loss(1.3, 0.7, 0.2, &fixed, None).unwrap()
        );
        let bad = LossConfig { alpha: 1.5, ..fixed.clone() };
        assert!(matches!(total_loss(1.0, 0.4, 0.6, &bad, None), Err(Error::Config(_))));
        let at = |a: f64| {
            total_loss(0.9, 0.31, 0.77, &LossConfig { alpha: a, ..fixed.clone() }, None).unwrap()
        };
        for a in [0.0, 0.1, 0.35, 0.8, 1.0] {
            assert!((at(a) + at(1.0 - a) - 2.0 * at(0.5)).abs() < 1e-12);
        }
        assert_eq!(at(1.0), 0.9 + 0.31);
        assert_eq!(at(0.0), 0.9 + 0.77);
    }

    #[test]
    fn gate_derivative_is_tam_minus_sem() {
        let cfg = LossConfig::default();
        let (pred, tam, sem) = (1.1, 0.45, 0.8);
        let f = |g: f64| total_loss(pred, tam, sem, &cfg, Some(g)).unwrap();
        let fd = (f(0.3 + 1e-6) - f(0.3 - 1e-6)) / 2e-6;
        assert!((fd - (tam - sem)).abs() < 1e-6);
        let mut tape = Tape::new();
        let vars: Vec<Var> = [pred, tam, sem].iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let g = tape.var(Tensor::scalar(0.3));
        let l = total_loss_on_tape(&mut tape, vars[0], vars[1], vars[2], g, &cfg).unwrap();
        let grads = tape.backward(l).unwrap();
        assert!((grads.get(g).item() - (tam - sem)).abs() < 1e-12);
    }

    #[test]
    fn absent_heuristic_contributes_zero() {
        let m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 2).unwrap();
        let v = vocab();
        let mut inp = input(&v);
        inp.h_action = None;
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &m.store);
        let enc = m.video.forward(&mut g, &video(5)).unwrap();
        let l = m.sample_losses(&mut g, enc, &inp).unwrap();
        assert_eq!(g.value(l.tam).item(), 0.0);
        assert!(g.value(l.sem).item() > 0.0);
    }

    #[test]
    fn first_step_loss_fixed_equals_zero_gate() {
        let v = vocab();
        let inp = input(&v);
        let run = |mode| {
            let m = Reasoner::new(&tiny(mode), vocab(), vec![], 2).unwrap();
            let mut tape = Tape::new();
            let mut g = Graph::new(&mut tape, &m.store).training(ChaCha8Rng::seed_from_u64(0));
            let enc = m.video.forward(&mut g, &video(6)).unwrap();
            let l = m.sample_losses(&mut g, enc, &inp).unwrap();
            g.value(l.total).item()
        };
        assert_eq!(run(LossMode::Gated), run(LossMode::FixedAlpha));
    }

    #[test]
    fn composed_loss_grad_check() {
        let m = Reasoner::new(&tiny(LossMode::Gated), vocab(), vec![], 7).unwrap();
        let v = vocab();
        let inp = input(&v);
        let names = [
            "video.patch_embed.weight",
            "text.block0.attn.query.weight",
            "fusion.block0.cross_attn.value.weight",
            "fusion.block0.ffn.up.weight",
            "action_head.weight",
            "entity_head.bias",
            "answer_head.weight",
            "gate.hidden.weight",
            "gate.out.weight",
        ];
        let ids: Vec<_> = names.iter().map(|n| m.store.id(n).unwrap()).collect();
        let inputs: Vec<Tensor> = ids.iter().map(|&id| m.store.get(id).clone()).collect();
        let vid = video(8);
        let err = grad_check(
            |tape, vars| {
                let mut g = Graph::new(tape, &m.store);
                for (&id, &var) in ids.iter().zip(vars) {
                    g.bind(id, var)?;
                }
                let enc = m.video.forward(&mut g, &vid)?;
                Ok(m.sample_losses(&mut g, enc, &inp)?.total)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn eval_report_breakdown() {
        let r = EvalReport::from_outcomes(
            &[
                (QuestionType::Entity, true),
                (QuestionType::Entity, false),
                (QuestionType::Action, true),
            ],
            3,
        );
        assert!((r.accuracy_overall - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.accuracy_by_question_type["entity"], 0.5);
        assert_eq!(r.num_samples, 3);
        let json = serde_json::to_value(&r).unwrap();
        for k in ["accuracy_overall", "accuracy_by_question_type", "num_samples", "seed"] {
            assert!(json.get(k).is_some());
        }
    }
}
