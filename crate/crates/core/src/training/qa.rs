use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{clip_global_norm, lr_at, AdamW, AdamWConfig, Schedule};
use crate::encoders::Graph;
use crate::error::{Error, Result};
use crate::prompter::HeuristicStore;
use crate::reasoner::{AnswerMode, EvalReport, LossMode, ModelInput, Reasoner};
use crate::rng::{derive_seed, stream};
use crate::substrate::{argmax, Tape};
use crate::textproc::{convert_mc, convert_oe, PromptKind};
use crate::videoproc::{center_indices, sample_indices, QaSample, QuestionType, VideoTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Frames sparsely sampled per video.
    pub frames: usize,
    /// Share of videos held out for evaluation.
    pub holdout: f64,
    /// Largest tolerated share of training samples without any heuristic record.
    pub max_missing: f64,
    /// Learning-rate multiplier of the gate network.
    pub gate_lr_scale: f64,
    pub optimizer: AdamWConfig,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        QaTrainConfig {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            max_grad_norm: 1.0,
            frames: 4,
            holdout: 0.2,
            max_missing: 0.1,
            gate_lr_scale: 0.05,
            optimizer: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub loss_pred: f64,
    pub loss_tam: f64,
    pub loss_sem: f64,
    pub gate_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaRun {
    pub log: Vec<QaLog>,
    pub train_accuracy: f64,
    /// Held-out evaluation; empty when nothing was held out.
    pub report: EvalReport,
    pub train_videos: Vec<String>,
    pub eval_videos: Vec<String>,
}

/// Splits by video id so no held-out video is seen in training.
pub fn split_by_video(samples: &[QaSample], holdout: f64, seed: u64) -> Result<(Vec<QaSample>, Vec<QaSample>)> {
    if !(0.0..1.0).contains(&holdout) {
        return Err(Error::config(format!("holdout {holdout} outside [0, 1)")));
    }
    let mut ids: Vec<String> = samples.iter().map(QaSample::video_id).collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut stream(seed, "qa-split", 0));
    let n_eval = (ids.len() as f64 * holdout).round() as usize;
    let eval: BTreeSet<&String> = ids[..n_eval].iter().collect();
    let (e, t): (Vec<QaSample>, Vec<QaSample>) = samples.iter().cloned().partition(|s| eval.contains(&s.video_id()));
    Ok((t, e))
}

/// Distinct answers of `samples`, sorted.
pub fn answer_space(samples: &[QaSample]) -> Vec<String> {
    samples
        .iter()
        .filter_map(|s| s.answer().map(str::to_string))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

fn model_input(reasoner: &Reasoner, s: &QaSample, heuristics: Option<&HeuristicStore>) -> ModelInput {
    let v = &reasoner.vocab;
    let (texts, label) = match reasoner.config.answer_mode {
        AnswerMode::Mc => (
            s.candidates.iter().map(|c| convert_mc(&s.question, c, v)).collect(),
            Some(s.answer_index).filter(|&i| i < s.candidates.len()),
        ),
        AnswerMode::Oe => (
            vec![convert_oe(&s.question, v)],
            s.answer().and_then(|a| reasoner.answers.iter().position(|x| x == a)),
        ),
    };
    let id = s.video_id();
    ModelInput {
        texts,
        question: convert_oe(&s.question, v),
        label,
        h_action: heuristics.and_then(|h| h.target(&id, PromptKind::Action)).map(<[f64]>::to_vec),
        h_entity: heuristics.and_then(|h| h.target(&id, PromptKind::Entity)).map(<[f64]>::to_vec),
    }
}

fn video<'a>(videos: &'a BTreeMap<String, VideoTensor>, s: &QaSample) -> Result<&'a VideoTensor> {
    videos
        .get(&s.video_id())
        .ok_or_else(|| Error::Data(format!("no video for {:?}", s.video_path)))
}

/// Accuracy outcomes of `samples` with center-frame sampling.
pub fn evaluate(
    reasoner: &Reasoner,
    samples: &[QaSample],
    videos: &BTreeMap<String, VideoTensor>,
    frames: usize,
) -> Result<Vec<(QuestionType, bool)>> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let v = video(videos, s)?;
        let clip = v.select_frames(&center_indices(v.frames(), frames.min(v.frames()))?)?;
        let input = model_input(reasoner, s, None);
        let logits = reasoner.infer(&clip, &input.texts)?;
        out.push((s.question_type, input.label == Some(argmax(&logits))));
    }
    Ok(out)
}

fn check_heuristics(reasoner: &Reasoner, train: &[QaSample], store: &HeuristicStore, max_missing: f64) -> Result<()> {
    for (kind, want) in [
        (PromptKind::Action, reasoner.config.num_actions),
        (PromptKind::Entity, reasoner.config.num_entities),
    ] {
        if let Some(w) = store.width(kind)? {
            if w != want {
                return Err(Error::config(format!("{kind} heuristics have {w} classes, the head has {want}")));
            }
        }
    }
    let missing = train.iter().filter(|s| !store.contains_video(&s.video_id())).count();
    let frac = missing as f64 / train.len() as f64;
    if frac > max_missing {
        return Err(Error::Data(format!(
            "{missing} of {} training samples have no heuristics ({frac:.3} > {max_missing})",
            train.len()
        )));
    }
    Ok(())
}

/// Trains the reasoner on a video-level split of `samples` and evaluates the held-out part.
/// Only the offline heuristic store is read; no prompter parameters are touched.
pub fn run_train_qa(
    reasoner: &mut Reasoner,
    samples: &[QaSample],
    videos: &BTreeMap<String, VideoTensor>,
    heuristics: &HeuristicStore,
    config: &QaTrainConfig,
    seed: u64,
) -> Result<QaRun> {
    if config.batch_size == 0 || config.frames == 0 {
        return Err(Error::config("batch size and frame count must be positive"));
    }
    if config.frames > reasoner.config.video.max_frames {
        return Err(Error::config(format!(
            "{} frames exceed the video encoder's {}",
            config.frames, reasoner.config.video.max_frames
        )));
    }
    let (train, held) = split_by_video(samples, config.holdout, seed)?;
    if train.is_empty() {
        return Err(Error::arg("no training samples"));
    }
    let store = match reasoner.config.loss.mode {
        LossMode::NoHeuristics => None,
        _ => {
            check_heuristics(reasoner, &train, heuristics, config.max_missing)?;
            Some(heuristics)
        }
    };
    let inputs: Vec<ModelInput> = train.iter().map(|s| model_input(reasoner, s, store)).collect();
    if inputs.iter().any(|i| i.label.is_none()) {
        return Err(Error::Data("a training sample's answer is outside the answer space".into()));
    }
    for s in &train {
        video(videos, s)?;
    }

    let per_epoch = train.len().div_ceil(config.batch_size) as u64;
    let schedule = Schedule {
        base_lr: config.lr,
        total_steps: per_epoch * config.epochs as u64,
    };
    let mut optimizer = AdamW::new(config.optimizer.clone(), &reasoner.store);
    for lin in [&reasoner.gate_hidden, &reasoner.gate_out] {
        for id in std::iter::once(lin.weight).chain(lin.bias) {
            optimizer.set_lr_scale(id, config.gate_lr_scale);
        }
    }
    let mut log = Vec::with_capacity(schedule.total_steps as usize);
    let mut step = 0u64;
    for epoch in 0..config.epochs as u64 {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(seed, "qa-shuffle", epoch));
        for batch in order.chunks(config.batch_size) {
            let (entry, mut grads) = {
                let mut tape = Tape::new();
                let mut g = Graph::new(&mut tape, &reasoner.store).training(stream(seed, "qa-dropout", step));
                let mut totals = Vec::with_capacity(batch.len());
                let mut sums = [0.0; 4];
                for &i in batch {
                    let v = video(videos, &train[i])?;
                    let fs = sample_indices(
                        v.frames(),
                        config.frames.min(v.frames()),
                        derive_seed(seed, &format!("qa-frames/{epoch}"), i as u64),
                    )?;
                    let clip = v.select_frames(&fs)?;
                    let enc = reasoner.video.forward(&mut g, &clip)?;
                    let l = reasoner.sample_losses(&mut g, enc, &inputs[i])?;
                    for (k, var) in [l.pred, l.tam, l.sem, l.gate].into_iter().enumerate() {
                        sums[k] += g.value(var).item();
                    }
                    totals.push(l.total);
                }
                let stacked = g.concat_rows(&totals)?;
                let loss = g.mean(stacked);
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("training loss is {value} at step {step}")));
                }
                let grads = g.backward(loss)?;
                let n = batch.len() as f64;
                let entry = QaLog {
                    step,
                    lr: lr_at(step, &schedule),
                    loss: value,
                    loss_pred: sums[0] / n,
                    loss_tam: sums[1] / n,
                    loss_sem: sums[2] / n,
                    gate_mean: sums[3] / n,
                };
                (entry, g.param_grads(&grads))
            };
            clip_global_norm(&mut grads, config.max_grad_norm);
            optimizer.step(&mut reasoner.store, &grads, entry.lr)?;
            log.push(entry);
            step += 1;
        }
    }

    let train_outcomes = evaluate(reasoner, &train, videos, config.frames)?;
    let train_accuracy = EvalReport::from_outcomes(&train_outcomes, seed).accuracy_overall;
    let report = EvalReport::from_outcomes(&evaluate(reasoner, &held, videos, config.frames)?, seed);
    let ids = |xs: &[QaSample]| xs.iter().map(QaSample::video_id).collect::<BTreeSet<_>>().into_iter().collect();
    Ok(QaRun {
        log,
        train_accuracy,
        report,
        train_videos: ids(&train),
        eval_videos: ids(&held),
    })
}

pub fn write_qa_log<W: Write>(mut w: W, log: &[QaLog]) -> Result<()> {
    writeln!(w, "step,lr,loss,loss_pred,loss_tam,loss_sem,gate_mean")?;
    for l in log {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            l.step, l.lr, l.loss, l.loss_pred, l.loss_tam, l.loss_sem, l.gate_mean
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompter::{HeuristicRecord, TopEntry};
    use crate::reasoner::tests::tiny;
    use crate::textproc::Vocabulary;
    use crate::videoproc::{generate_synth_dataset, SynthConfig};

    struct Fixture {
        samples: Vec<QaSample>,
        videos: BTreeMap<String, VideoTensor>,
        vocab: Vocabulary,
    }

    fn fixture(n: usize) -> Fixture {
        let cfg = SynthConfig {
            num_videos: n,
            frame_hw: 16,
            frames: 8,
            ..Default::default()
        };
        let ds = generate_synth_dataset(&cfg, 2).unwrap();
        let vocab = Vocabulary::from_texts(
            ds.samples
                .iter()
                .flat_map(|s| std::iter::once(s.question.as_str()).chain(s.candidates.iter().map(String::as_str))),
        );
        Fixture {
            samples: ds.samples,
            videos: ds.videos.into_iter().collect(),
            vocab,
        }
    }

    fn record(id: &str, kind: PromptKind, scores: Vec<f64>) -> HeuristicRecord {
        HeuristicRecord {
            video_id: id.to_string(),
            kind,
            top: vec![TopEntry {
                word: "w".into(),
                score: scores[0],
            }],
            kept: true,
            scores,
        }
    }

    fn store_for(f: &Fixture, skip: usize) -> HeuristicStore {
        let ids: BTreeSet<String> = f.samples.iter().map(QaSample::video_id).collect();
        let recs = ids
            .iter()
            .skip(skip)
            .flat_map(|id| {
                [
                    record(id, PromptKind::Action, vec![0.5, 0.3, 0.2]),
                    record(id, PromptKind::Entity, vec![0.6, 0.4]),
                ]
            })
            .collect();
        HeuristicStore::new(recs).unwrap()
    }

    fn reasoner(f: &Fixture, mode: LossMode) -> Reasoner {
        let mut cfg = tiny(mode);
        cfg.video.max_frames = 2;
        Reasoner::new(&cfg, f.vocab.clone(), vec![], 5).unwrap()
    }

    fn qa_config() -> QaTrainConfig {
        QaTrainConfig {
            epochs: 1,
            batch_size: 4,
            frames: 2,
            holdout: 0.25,
            ..Default::default()
        }
    }

    #[test]
    fn split_keeps_videos_apart() {
        let f = fixture(8);
        let (t, e) = split_by_video(&f.samples, 0.25, 1).unwrap();
        assert_eq!(t.len() + e.len(), f.samples.len());
        let ti: BTreeSet<String> = t.iter().map(QaSample::video_id).collect();
        let ei: BTreeSet<String> = e.iter().map(QaSample::video_id).collect();
        assert_eq!(ei.len(), 2);
        assert!(ti.is_disjoint(&ei));
        assert_eq!(split_by_video(&f.samples, 0.25, 1).unwrap().1, e);
        assert!(matches!(split_by_video(&f.samples, 1.0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn answer_space_is_sorted_and_distinct() {
        let f = fixture(8);
        let a = answer_space(&f.samples);
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(a, sorted);
        assert!(f.samples.iter().all(|s| a.iter().any(|x| Some(x.as_str()) == s.answer())));
    }

    #[test]
    fn training_run_logs_and_reports() {
        let f = fixture(8);
        let mut m = reasoner(&f, LossMode::Gated);
        let run = run_train_qa(&mut m, &f.samples, &f.videos, &store_for(&f, 0), &qa_config(), 4).unwrap();
        assert_eq!(run.log.len(), 5);
        assert_eq!(run.log[0].gate_mean, 0.5);
        assert!(run.log.iter().all(|l| l.loss.is_finite() && l.loss_tam > 0.0));
        assert_eq!(run.report.num_samples, 6);
        let mut csv = Vec::new();
        write_qa_log(&mut csv, &run.log).unwrap();
        let csv = String::from_utf8(csv).unwrap();
        assert!(csv.starts_with("step,lr,loss,loss_pred,loss_tam,loss_sem,gate_mean\n"));
        assert_eq!(csv.lines().count(), 6);

        let mut again = reasoner(&f, LossMode::Gated);
        let rerun = run_train_qa(&mut again, &f.samples, &f.videos, &store_for(&f, 0), &qa_config(), 4).unwrap();
        assert_eq!(rerun, run);
        assert_eq!(again.store.checksum(), m.store.checksum());
    }

    #[test]
    fn too_many_missing_heuristics_is_a_data_error() {
        let f = fixture(8);
        let mut m = reasoner(&f, LossMode::Gated);
        let err = run_train_qa(&mut m, &f.samples, &f.videos, &store_for(&f, 4), &qa_config(), 4).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        let mut off = reasoner(&f, LossMode::NoHeuristics);
        let run = run_train_qa(&mut off, &f.samples, &f.videos, &HeuristicStore::default(), &qa_config(), 4).unwrap();
        assert!(run.log.iter().all(|l| l.loss_tam == 0.0 && l.loss == l.loss_pred));
    }

    #[test]
    fn mismatched_heuristic_width_is_a_config_error() {
        let f = fixture(8);
        let mut cfg = tiny(LossMode::Gated);
        cfg.num_actions = 4;
        let mut m = Reasoner::new(&cfg, f.vocab.clone(), vec![], 5).unwrap();
        let err = run_train_qa(&mut m, &f.samples, &f.videos, &store_for(&f, 0), &qa_config(), 4).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fixed_and_gated_share_the_first_loss() {
        let f = fixture(8);
        let first = |mode| {
            let mut m = reasoner(&f, mode);
            run_train_qa(&mut m, &f.samples, &f.videos, &store_for(&f, 0), &qa_config(), 4).unwrap().log[0].loss
        };
        assert_eq!(first(LossMode::Gated), first(LossMode::FixedAlpha));
    }

    #[test]
    fn open_ended_mode_trains() {
        let f = fixture(8);
        let mut cfg = tiny(LossMode::FixedAlpha);
        cfg.answer_mode = AnswerMode::Oe;
        let mut m = Reasoner::new(&cfg, f.vocab.clone(), answer_space(&f.samples), 5).unwrap();
        let run = run_train_qa(&mut m, &f.samples, &f.videos, &store_for(&f, 0), &qa_config(), 4).unwrap();
        assert!(run.log.iter().all(|l| l.loss.is_finite()));
    }
}
