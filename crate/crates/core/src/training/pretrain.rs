use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{lr_at, AdamW, AdamWConfig, Schedule};
use crate::error::{Error, Result};
use crate::prompter::{heuristic_crops, pretrain_step, PretrainPair, Prompter};
use crate::rng::{derive_seed, stream};
use crate::textproc::{PromptKind, PromptSet};
use crate::videoproc::VideoTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub max_grad_norm: f64,
    /// Random patch masking of the training clips.
    pub mask: bool,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 8,
            batch_size: 8,
            lr: 1e-3,
            max_grad_norm: 1.0,
            mask: false,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// A video with the action and entity words describing it.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainSample {
    pub video_id: String,
    pub video: VideoTensor,
    pub action: String,
    pub entity: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub tau: f64,
}

/// Batches of one epoch: each kind shuffled separately, then interleaved; batches under 2 pairs are dropped.
pub fn pretrain_batches(
    n_action: usize,
    n_entity: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Vec<(PromptKind, Vec<usize>)> {
    let chunks = |n: usize, kind: PromptKind| {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, &format!("pretrain-shuffle/{kind}"), epoch));
        order
            .chunks(batch_size.max(2))
            .filter(|c| c.len() >= 2)
            .map(|c| (kind, c.to_vec()))
            .collect::<Vec<_>>()
    };
    let a = chunks(n_action, PromptKind::Action);
    let e = chunks(n_entity, PromptKind::Entity);
    let mut out = Vec::with_capacity(a.len() + e.len());
    let (mut ai, mut ei) = (a.into_iter(), e.into_iter());
    loop {
        match (ai.next(), ei.next()) {
            (None, None) => break,
            (x, y) => out.extend(x.into_iter().chain(y)),
        }
    }
    out
}

/// Contrastive pretraining; the prompter is left unfrozen for the caller to freeze and save.
pub fn run_pretrain(
    prompter: &mut Prompter,
    data: &[PretrainSample],
    action: &PromptSet,
    entity: &PromptSet,
    config: &PretrainConfig,
    seed: u64,
) -> Result<Vec<PretrainLog>> {
    if data.is_empty() {
        return Err(Error::arg("pretraining dataset is empty"));
    }
    if config.batch_size < 2 {
        return Err(Error::config("contrastive batches need at least 2 pairs"));
    }
    // (sample, word index) for every sample whose word is in the prompt set.
    let index = |set: &PromptSet, word: &dyn Fn(&PretrainSample) -> &str| -> Vec<(usize, usize)> {
        data.iter()
            .enumerate()
            .filter_map(|(i, s)| set.words.iter().position(|w| w == word(s)).map(|w| (i, w)))
            .collect()
    };
    let action_pairs = index(action, &|s| &s.action);
    let entity_pairs = index(entity, &|s| &s.entity);
    if action_pairs.len() < 2 && entity_pairs.len() < 2 {
        return Err(Error::arg("no pretraining sample matches a prompt-set word"));
    }
    let per_epoch = pretrain_batches(action_pairs.len(), entity_pairs.len(), config.batch_size, seed, 0).len() as u64;
    let schedule = Schedule {
        base_lr: config.lr,
        total_steps: per_epoch * config.epochs as u64,
    };
    let mut crops = prompter.config.crops.clone();
    crops.temporal_crops = 1;
    crops.spatial_crops = 1;
    crops.mask = config.mask;
    let mut optimizer = AdamW::new(config.optimizer.clone(), &prompter.store);
    let mut log = Vec::with_capacity(schedule.total_steps as usize);
    let mut step = 0u64;
    for epoch in 0..config.epochs as u64 {
        for (b, (kind, members)) in pretrain_batches(action_pairs.len(), entity_pairs.len(), config.batch_size, seed, epoch)
            .into_iter()
            .enumerate()
        {
            let (pairs, set) = match kind {
                PromptKind::Action => (&action_pairs, action),
                PromptKind::Entity => (&entity_pairs, entity),
            };
            let mut rng = stream(seed, &format!("pretrain-batch/{epoch}"), b as u64);
            let mut batch = Vec::with_capacity(members.len());
            for m in members {
                let (i, w) = pairs[m];
                let crop_seed = derive_seed(seed, &format!("pretrain-crop/{kind}/{}", data[i].video_id), epoch);
                let clip = heuristic_crops(&data[i].video, kind, &crops, crop_seed)?.swap_remove(0);
                let options = set.prompts_for(w);
                let text = options[rng.gen_range(0..options.len())].clone();
                batch.push(PretrainPair { kind, clip, text });
            }
            let lr = lr_at(step, &schedule);
            let (loss, tau) = pretrain_step(prompter, &batch, &mut optimizer, lr, config.max_grad_norm)?;
            log.push(PretrainLog { step, lr, loss, tau });
            step += 1;
        }
    }
    Ok(log)
}

pub fn write_pretrain_log<W: Write>(mut w: W, log: &[PretrainLog]) -> Result<()> {
    writeln!(w, "step,lr,loss,tau")?;
    for l in log {
        writeln!(w, "{},{},{},{}", l.step, l.lr, l.loss, l.tau)?;
    }
    Ok(())
}
