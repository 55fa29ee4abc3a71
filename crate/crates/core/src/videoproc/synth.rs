//! Moving-shapes videos with entity/action labels and three question families.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{QaSample, QuestionType, VideoTensor};
use crate::error::{Error, Result};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Ball,
    Cross,
    Bar,
    Ring,
    Frame,
    Diamond,
    Pillar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Right,
    Left,
    Grow,
    Shrink,
    Up,
    Down,
}

/// Entity classes: noun, shape, RGB colour.
pub const ENTITIES: [(&str, Shape, [f32; 3]); 8] = [
    ("box", Shape::Box, [1.0, 0.15, 0.15]),
    ("ball", Shape::Ball, [0.15, 1.0, 0.15]),
    ("cross", Shape::Cross, [0.2, 0.3, 1.0]),
    ("bar", Shape::Bar, [1.0, 1.0, 0.1]),
    ("ring", Shape::Ring, [1.0, 0.1, 1.0]),
    ("frame", Shape::Frame, [0.1, 1.0, 1.0]),
    ("diamond", Shape::Diamond, [1.0, 1.0, 1.0]),
    ("pillar", Shape::Pillar, [1.0, 0.55, 0.05]),
];

/// Action classes: verb and motion pattern.
pub const ACTIONS: [(&str, Motion); 6] = [
    ("advance", Motion::Right),
    ("retreat", Motion::Left),
    ("grow", Motion::Grow),
    ("shrink", Motion::Shrink),
    ("rise", Motion::Up),
    ("fall", Motion::Down),
];

pub const MIN_FRAME: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_videos: usize,
    pub num_entities: usize,
    pub num_actions: usize,
    pub frame_hw: usize,
    pub frames: usize,
    pub num_candidates: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_videos: 96,
            num_entities: 4,
            num_actions: 4,
            frame_hw: 32,
            frames: 32,
            num_candidates: 4,
        }
    }
}

/// Everything needed to re-render one video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthScene {
    pub entity: usize,
    pub action: usize,
    pub x0: f64,
    pub y0: f64,
    pub radius: f64,
    pub travel: f64,
    pub seed: u64,
}

impl SynthScene {
    pub fn entity_word(&self) -> &'static str {
        ENTITIES[self.entity].0
    }

    pub fn action_word(&self) -> &'static str {
        ACTIONS[self.action].0
    }

    /// Centre and radius at normalized time `u ∈ [0, 1]`.
    fn pose(&self, u: f64) -> (f64, f64, f64) {
        let (mut x, mut y, mut r) = (self.x0, self.y0, self.radius);
        match ACTIONS[self.action].1 {
            Motion::Right => x += u * self.travel,
            Motion::Left => x -= u * self.travel,
            Motion::Down => y += u * self.travel,
            Motion::Up => y -= u * self.travel,
            Motion::Grow => r *= 0.7 + 1.1 * u,
            Motion::Shrink => r *= 1.8 - 1.1 * u,
        }
        (x, y, r)
    }

    pub fn render(&self, frame_hw: usize, frames: usize) -> VideoTensor {
        let (_, shape, color) = ENTITIES[self.entity];
        let mut v = VideoTensor::zeros(3, frames, frame_hw, frame_hw);
        for f in 0..frames {
            let u = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.0 };
            let (cx, cy, r) = self.pose(u);
            for y in 0..frame_hw {
                for x in 0..frame_hw {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if inside(shape, dx, dy, r) {
                        for (c, &val) in color.iter().enumerate() {
                            v.set(c, f, y, x, val);
                        }
                    }
                }
            }
        }
        v
    }
}

fn inside(shape: Shape, dx: f64, dy: f64, r: f64) -> bool {
    let (ax, ay) = (dx.abs(), dy.abs());
    match shape {
        Shape::Box => ax <= r && ay <= r,
        Shape::Ball => dx * dx + dy * dy <= r * r,
        Shape::Cross => ax.max(ay) <= r && (ax - ay).abs() <= 1.0,
        Shape::Bar => ax <= r && ay <= r * 0.4,
        Shape::Ring => {
            let d = (dx * dx + dy * dy).sqrt();
            d <= r && d >= r - 1.6
        }
        Shape::Frame => ax.max(ay) <= r && ax.max(ay) >= r - 1.6,
        Shape::Diamond => ax + ay <= r,
        Shape::Pillar => ax <= r * 0.4 && ay <= r,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    /// `(video id, video)`, in generation order.
    pub videos: Vec<(String, VideoTensor)>,
    pub scenes: Vec<SynthScene>,
    pub samples: Vec<QaSample>,
}

pub fn video_id(index: usize) -> String {
    format!("video_{index:04}")
}

/// Renders a balanced entity × action grid and three multiple-choice questions per video.
///
/// Video `i` shows pair `i mod (E·A)`; sample `video_path`s are `videos/<id>.vten`.
pub fn generate_synth_dataset(cfg: &SynthConfig, seed: u64) -> Result<SynthDataset> {
    if cfg.num_entities < 2 || cfg.num_entities > ENTITIES.len() {
        return Err(Error::arg(format!(
            "num_entities must be in 2..={}, got {}",
            ENTITIES.len(),
            cfg.num_entities
        )));
    }
    if cfg.num_actions < 2 || cfg.num_actions > ACTIONS.len() {
        return Err(Error::arg(format!(
            "num_actions must be in 2..={}, got {}",
            ACTIONS.len(),
            cfg.num_actions
        )));
    }
    if cfg.frame_hw < MIN_FRAME {
        return Err(Error::arg(format!(
            "frames of {0}x{0} are too small to render shapes (minimum {MIN_FRAME})",
            cfg.frame_hw
        )));
    }
    if cfg.frames < 2 || cfg.num_candidates < 2 {
        return Err(Error::arg("need at least 2 frames and 2 candidates"));
    }
    let s = cfg.frame_hw as f64;
    let pairs = cfg.num_entities * cfg.num_actions;
    let mut videos = Vec::with_capacity(cfg.num_videos);
    let mut scenes = Vec::with_capacity(cfg.num_videos);
    let mut samples = Vec::with_capacity(cfg.num_videos * 3);
    for i in 0..cfg.num_videos {
        let mut rng = stream(seed, "synth-video", i as u64);
        let p = i % pairs;
        let (entity, action) = (p / cfg.num_actions, p % cfg.num_actions);
        let radius = s / 8.0 * rng.gen_range(0.9..1.1);
        let travel = s * rng.gen_range(0.3..0.38);
        let margin = radius + 1.0;
        let (x0, y0) = match ACTIONS[action].1 {
            Motion::Right => (rng.gen_range(margin..s - margin - travel), rng.gen_range(margin..s - margin)),
            Motion::Left => (rng.gen_range(margin + travel..s - margin), rng.gen_range(margin..s - margin)),
            Motion::Down => (rng.gen_range(margin..s - margin), rng.gen_range(margin..s - margin - travel)),
            Motion::Up => (rng.gen_range(margin..s - margin), rng.gen_range(margin + travel..s - margin)),
            Motion::Grow | Motion::Shrink => {
                let big = radius * 1.8 + 1.0;
                (rng.gen_range(big..s - big), rng.gen_range(big..s - big))
            }
        };
        let scene = SynthScene {
            entity,
            action,
            x0,
            y0,
            radius,
            travel,
            seed: rng.gen(),
        };
        let id = video_id(i);
        let path = format!("videos/{id}.vten");
        let entity_words: Vec<&str> = ENTITIES[..cfg.num_entities].iter().map(|e| e.0).collect();
        let action_words: Vec<&str> = ACTIONS[..cfg.num_actions].iter().map(|a| a.0).collect();
        let families = [
            (QuestionType::Entity, "what is in the video".to_string(), &entity_words, entity),
            (QuestionType::Action, "what is the thing doing".to_string(), &action_words, action),
            (
                QuestionType::Composition,
                format!("what is the {} doing", scene.entity_word()),
                &action_words,
                action,
            ),
        ];
        for (qtype, question, pool, answer) in families {
            let (candidates, answer_index) = choices(&mut rng, pool, answer, cfg.num_candidates);
            samples.push(QaSample {
                video_path: path.clone(),
                question,
                candidates,
                answer_index,
                entity_label: scene.entity_word().to_string(),
                action_label: scene.action_word().to_string(),
                question_type: qtype,
            });
        }
        videos.push((id, scene.render(cfg.frame_hw, cfg.frames)));
        scenes.push(scene);
    }
    Ok(SynthDataset {
        videos,
        scenes,
        samples,
    })
}

fn choices<R: Rng>(rng: &mut R, pool: &[&str], answer: usize, k: usize) -> (Vec<String>, usize) {
    let mut others: Vec<usize> = (0..pool.len()).filter(|&i| i != answer).collect();
    others.shuffle(rng);
    let mut picked: Vec<usize> = others.into_iter().take(k.min(pool.len()) - 1).collect();
    picked.push(answer);
    picked.shuffle(rng);
    let answer_index = picked.iter().position(|&i| i == answer).expect("answer kept");
    (picked.iter().map(|&i| pool[i].to_string()).collect(), answer_index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> SynthConfig {
        SynthConfig {
            num_videos: 64,
            num_entities: 4,
            num_actions: 4,
            frame_hw: 32,
            frames: 8,
            num_candidates: 4,
        }
    }

    #[test]
    fn balanced_grid() {
        let ds = generate_synth_dataset(&small(), 1).unwrap();
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for s in &ds.scenes {
            *counts.entry((s.entity, s.action)).or_default() += 1;
        }
        assert_eq!(counts.len(), 16);
        assert!(counts.values().all(|&c| c == 4));
        assert_eq!(ds.samples.len(), 192);
    }

    #[test]
    fn deterministic() {
        let a = generate_synth_dataset(&small(), 7).unwrap();
        let b = generate_synth_dataset(&small(), 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synth_dataset(&small(), 8).unwrap());
        assert_eq!(a.scenes[3].render(32, 8), a.videos[3].1);
    }

    #[test]
    fn questions_are_well_formed() {
        let ds = generate_synth_dataset(&small(), 2).unwrap();
        for s in &ds.samples {
            assert_eq!(s.candidates.len(), 4);
            let want = match s.question_type {
                QuestionType::Entity => &s.entity_label,
                _ => &s.action_label,
            };
            assert_eq!(s.answer().unwrap(), want);
        }
        let comp = ds
            .samples
            .iter()
            .find(|s| s.question_type == QuestionType::Composition)
            .unwrap();
        assert_eq!(comp.question, format!("what is the {} doing", comp.entity_label));
    }

    #[test]
    fn too_small_frames_rejected() {
        let cfg = SynthConfig { frame_hw: 8, ..small() };
        assert!(matches!(generate_synth_dataset(&cfg, 0), Err(Error::Argument(_))));
        let cfg = SynthConfig { num_actions: 1, ..small() };
        assert!(generate_synth_dataset(&cfg, 0).is_err());
    }

    /// Lit-pixel mass and centroid of one frame.
    fn moments(v: &VideoTensor, f: usize) -> (f64, f64, f64) {
        let (mut m, mut sx, mut sy) = (0.0, 0.0, 0.0);
        for y in 0..v.height() {
            for x in 0..v.width() {
                let lit = (0..v.channels()).any(|c| v.get(c, f, y, x) > 0.0);
                if lit {
                    m += 1.0;
                    sx += x as f64;
                    sy += y as f64;
                }
            }
        }
        (m, sx / m, sy / m)
    }

    fn oracle(v: &VideoTensor) -> Motion {
        let (m0, x0, y0) = moments(v, 0);
        let (m1, x1, y1) = moments(v, v.frames() - 1);
        let ratio = m1 / m0;
        if ratio > 1.5 {
            Motion::Grow
        } else if ratio < 1.0 / 1.5 {
            Motion::Shrink
        } else if (x1 - x0).abs() > (y1 - y0).abs() {
            if x1 > x0 {
                Motion::Right
            } else {
                Motion::Left
            }
        } else if y1 > y0 {
            Motion::Down
        } else {
            Motion::Up
        }
    }

    #[test]
    fn frame_difference_oracle_recovers_actions() {
        let cfg = SynthConfig {
            num_videos: 96,
            num_entities: 8,
            num_actions: 6,
            ..small()
        };
        let ds = generate_synth_dataset(&cfg, 11).unwrap();
        for ((id, v), scene) in ds.videos.iter().zip(&ds.scenes) {
            assert_eq!(oracle(v), ACTIONS[scene.action].1, "{id}");
        }
    }
}
