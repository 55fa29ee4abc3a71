//! Finite-difference sweeps over every tape primitive and the composed models.
//!
//! Shared by the `grad-check` subcommand and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::encoders::{Graph, HeadConfig, ParamId, ParamStore, TextEncoderConfig, VideoEncoderConfig};
use crate::error::Result;
use crate::prompter::{vtc_on_tape, Prompter, PrompterConfig};
use crate::reasoner::{LossMode, ModelInput, Reasoner, ReasonerConfig};
use crate::substrate::{grad_check, Tape, Tensor, Var};
use crate::textproc::{convert_mc, convert_oe, Vocabulary};
use crate::videoproc::VideoTensor;

/// Threshold for a single primitive.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Threshold for composed model losses.
pub const COMPOSED_TOL: f64 = 1e-4;
/// Step used for central differences.
pub const EPSILON: f64 = 1e-5;

type Build = fn(&mut Tape, &[Var]) -> Result<Var>;

struct Primitive {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    // inputs drawn from [lo, hi)
    range: (f64, f64),
    build: Build,
}

/// Contracts `out` with a deterministic weight pattern so every output element matters.
fn contract(t: &mut Tape, out: Var) -> Result<Var> {
    let shape = t.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 10.0).collect();
    let w = t.constant(Tensor::new(shape, w)?);
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

const PRIMITIVES: &[Primitive] = &[
    Primitive { name: "matmul", shapes: &[&[3, 4], &[4, 2]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.matmul(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "matmul_bt", shapes: &[&[3, 4], &[2, 4]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.matmul_bt(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "add", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.add(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "sub", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.sub(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "mul", shapes: &[&[2, 3], &[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.mul(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "add_row", shapes: &[&[3, 4], &[4]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.add_row(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "mul_scalar", shapes: &[&[2, 3], &[1]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.mul_scalar(x[0], x[1])?; contract(t, o) } },
    Primitive { name: "scale", shapes: &[&[5]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.scale(x[0], -2.5); contract(t, o) } },
    Primitive { name: "exp", shapes: &[&[5]], range: (-2.0, 2.0),
        build: |t, x| { let o = t.exp(x[0]); contract(t, o) } },
    Primitive { name: "log", shapes: &[&[5]], range: (0.2, 3.0),
        build: |t, x| { let o = t.log(x[0]); contract(t, o) } },
    Primitive { name: "sigmoid", shapes: &[&[5]], range: (-4.0, 4.0),
        build: |t, x| { let o = t.sigmoid(x[0]); contract(t, o) } },
    Primitive { name: "gelu", shapes: &[&[5]], range: (-3.0, 3.0),
        build: |t, x| { let o = t.gelu(x[0]); contract(t, o) } },
    Primitive { name: "softmax_rows", shapes: &[&[2, 5]], range: (-2.0, 2.0),
        build: |t, x| { let o = t.softmax_rows(x[0]); contract(t, o) } },
    Primitive { name: "log_softmax_rows", shapes: &[&[2, 5]], range: (-2.0, 2.0),
        build: |t, x| { let o = t.log_softmax_rows(x[0]); contract(t, o) } },
    Primitive { name: "layer_norm_rows", shapes: &[&[3, 6]], range: (-2.0, 2.0),
        build: |t, x| { let o = t.layer_norm_rows(x[0], 1e-5); contract(t, o) } },
    Primitive { name: "l2_normalize_rows", shapes: &[&[3, 4]], range: (0.1, 2.0),
        build: |t, x| { let o = t.l2_normalize_rows(x[0])?; contract(t, o) } },
    Primitive { name: "sum", shapes: &[&[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let s = t.sum(x[0]); let s2 = t.mul(s, s)?; Ok(t.sum(s2)) } },
    Primitive { name: "mean", shapes: &[&[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let s = t.mean(x[0]); let s2 = t.mul(s, s)?; Ok(t.sum(s2)) } },
    Primitive { name: "mean_rows", shapes: &[&[4, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.mean_rows(x[0]); contract(t, o) } },
    Primitive { name: "reshape", shapes: &[&[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.reshape(x[0], &[3, 2])?; contract(t, o) } },
    Primitive { name: "transpose", shapes: &[&[2, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.transpose(x[0])?; contract(t, o) } },
    Primitive { name: "gather_rows", shapes: &[&[4, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.gather_rows(x[0], &[2, 0, 2, 3])?; contract(t, o) } },
    Primitive { name: "concat_rows", shapes: &[&[2, 3], &[1, 3]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.concat_rows(&[x[0], x[1]])?; contract(t, o) } },
    Primitive { name: "concat_cols", shapes: &[&[2, 3], &[2, 2]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.concat_cols(&[x[0], x[1]])?; contract(t, o) } },
    Primitive { name: "slice_cols", shapes: &[&[3, 5]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.slice_cols(x[0], 1, 4)?; contract(t, o) } },
    Primitive { name: "block_attention", shapes: &[&[4, 4], &[6, 4], &[6, 4]], range: (-1.0, 1.0),
        build: |t, x| { let o = t.block_attention(x[0], x[1], x[2], 2, 2)?; contract(t, o) } },
    Primitive { name: "soft_cross_entropy", shapes: &[&[5], &[5]], range: (-2.0, 2.0),
        build: |t, x| {
            let target = t.softmax_rows(x[0]);
            let pred = t.softmax_rows(x[1]);
            t.soft_cross_entropy(target, pred)
        } },
    Primitive { name: "cross_entropy_logits", shapes: &[&[5]], range: (-2.0, 2.0),
        build: |t, x| t.cross_entropy_logits(x[0], 3) },
];

/// Maximum relative error per primitive over `trials` random inputs.
pub fn primitive_report(trials: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PRIMITIVES.len());
    for p in PRIMITIVES {
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let inputs: Vec<Tensor> = p
                .shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(p.range.0..p.range.1)).collect();
                    Tensor::new(s.to_vec(), data)
                })
                .collect::<Result<_>>()?;
            worst = worst.max(grad_check(p.build, &inputs, EPSILON)?);
        }
        out.push((p.name.to_string(), worst));
    }
    Ok(out)
}

/// One finite-difference check and the threshold it must meet.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn small_video(seed: u64) -> Result<VideoTensor> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * 2 * 16 * 16).map(|_| r.gen::<f32>()).collect();
    VideoTensor::new(3, 2, 16, 16, data)
}

fn small_encoders() -> (VideoEncoderConfig, TextEncoderConfig) {
    (
        VideoEncoderConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            max_frames: 2,
            max_patches: 4,
            ..Default::default()
        },
        TextEncoderConfig {
            layers: 1,
            dim: 16,
            heads: 2,
            max_len: 12,
            ..Default::default()
        },
    )
}

fn check_params<F>(store: &ParamStore, names: &[&str], f: F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let ids: Vec<ParamId> = names
        .iter()
        .map(|n| store.id(n).ok_or_else(|| crate::Error::arg(format!("no parameter {n}"))))
        .collect::<Result<_>>()?;
    let inputs: Vec<Tensor> = ids.iter().map(|&id| store.get(id).clone()).collect();
    grad_check(
        |tape, vars| {
            let mut g = Graph::new(tape, store);
            for (&id, &v) in ids.iter().zip(vars) {
                g.bind(id, v)?;
            }
            f(&mut g)
        },
        &inputs,
        EPSILON,
    )
}

/// Composed checks: the contrastive loss through both prompter towers, the fusion
/// block and the full reasoner objective with dropout off.
pub fn composed_report(seed: u64) -> Result<Vec<CheckResult>> {
    let vocab = Vocabulary::from_texts(["what is the box doing", "a video of advance grow ball"]);
    let (video, text) = small_encoders();
    let mut out = Vec::new();

    let pcfg = PrompterConfig {
        video: video.clone(),
        text: text.clone(),
        head: HeadConfig {
            proj_dim: 8,
            ..Default::default()
        },
        ..Default::default()
    };
    let p = Prompter::new(&pcfg, vocab.clone(), seed)?;
    let clips = [small_video(seed)?, small_video(seed + 1)?];
    let prompts = ["a video of advance", "a video of ball"];
    let err = check_params(
        &p.store,
        &["action_video.patch_embed.weight", "text.block0.attn.key.weight", "head.video.weight", "head.log_tau"],
        |g| {
            let mut vs = Vec::new();
            let mut ts = Vec::new();
            for (clip, prompt) in clips.iter().zip(prompts) {
                vs.push(p.action_video.forward(g, clip)?.cls);
                ts.push(p.text.forward(g, &p.tokenize(prompt))?.cls);
            }
            let v = g.concat_rows(&vs)?;
            let t = g.concat_rows(&ts)?;
            let s = p.head.similarity_matrix(g, v, t)?;
            let it = p.head.inv_tau(g);
            Ok(vtc_on_tape(g, s, it)?.total)
        },
    )?;
    out.push(CheckResult {
        name: "prompter contrastive loss".into(),
        error: err,
        tolerance: COMPOSED_TOL,
    });

    let rcfg = ReasonerConfig {
        video,
        text,
        num_actions: 3,
        num_entities: 2,
        ..Default::default()
    };
    let m = Reasoner::new(&rcfg, vocab.clone(), vec![], seed)?;
    let clip = small_video(seed + 2)?;
    let q = "what is the box doing";
    let seq = convert_mc(q, "grow", &vocab);
    let err = check_params(
        &m.store,
        &["fusion.block0.norm_self.gain", "fusion.block0.self_attn.query.weight", "fusion.block0.cross_attn.key.weight", "fusion.block0.ffn.down.weight"],
        |g| {
            let v = m.video.forward(g, &clip)?;
            let t = m.text.forward(g, &seq)?;
            let f = m.fuse(g, v, t)?;
            contract(g, f.tokens)
        },
    )?;
    out.push(CheckResult {
        name: "reasoner fusion".into(),
        error: err,
        tolerance: 1e-5,
    });

    for mode in [LossMode::FixedAlpha, LossMode::Gated] {
        let mut cfg = rcfg.clone();
        cfg.loss.mode = mode;
        let m = Reasoner::new(&cfg, vocab.clone(), vec![], seed)?;
        let input = ModelInput {
            texts: ["advance", "grow"].iter().map(|c| convert_mc(q, c, &vocab)).collect(),
            question: convert_oe(q, &vocab),
            label: Some(1),
            h_action: Some(vec![0.2, 0.5, 0.3]),
            h_entity: Some(vec![0.7, 0.3]),
        };
        let err = check_params(
            &m.store,
            &[
                "video.block0.attn_time.value.weight",
                "text.token_embed",
                "fusion.block0.cross_attn.query.weight",
                "action_head.weight",
                "entity_head.weight",
                "answer_head.weight",
                "gate.hidden.weight",
                "gate.out.weight",
            ],
            |g| {
                let v = m.video.forward(g, &clip)?;
                Ok(m.sample_losses(g, v, &input)?.total)
            },
        )?;
        out.push(CheckResult {
            name: format!("reasoner objective ({})", if mode == LossMode::Gated { "gated" } else { "fixed" }),
            error: err,
            tolerance: COMPOSED_TOL,
        });
    }
    Ok(out)
}

/// Every primitive at [`PRIMITIVE_TOL`] followed by the composed checks.
pub fn full_report(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut out: Vec<CheckResult> = primitive_report(trials, seed)?
        .into_iter()
        .map(|(name, error)| CheckResult {
            name,
            error,
            tolerance: PRIMITIVE_TOL,
        })
        .collect();
    out.extend(composed_report(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn composed_checks_pass() {
        for c in composed_report(3).unwrap() {
            assert!(c.passed(), "{}: {:e}", c.name, c.error);
        }
    }

    #[test]
    fn primitives_pass_on_random_inputs() {
        for (name, err) in primitive_report(20, 11).unwrap() {
            assert!(err < PRIMITIVE_TOL, "{name}: {err:e}");
        }
    }
}
