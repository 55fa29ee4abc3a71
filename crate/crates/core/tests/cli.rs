use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use heurvid::prompter::{Prompter, PrompterConfig};
use heurvid::textproc::Vocabulary;

const SMALL: &str = r#"{
  "data": {"num_videos": 16, "frame_hw": 16, "frames": 16},
  "vocab": {"templates": 3},
  "prompter": {"video": {"dim": 16, "heads": 2, "max_patches": 4}, "text": {"dim": 16, "heads": 2},
               "head": {"proj_dim": 8}, "crops": {"crop_size": 8, "temporal_crops": 2, "spatial_crops": 2}},
  "pretrain": {"epochs": 2, "batch_size": 4},
  "reasoner": {"video": {"dim": 16, "heads": 2, "max_patches": 4}, "text": {"dim": 16, "heads": 2}},
  "train": {"epochs": 2, "batch_size": 4, "holdout": 0.25},
  "grad_check": {"trials": 2}
}"#;

fn heurvid(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_heurvid")).args(args).output().expect("binary runs")
}

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let cfg = root.join("small.json");
        fs::write(&cfg, SMALL).unwrap();
        Work {
            config: format!("--config={}", cfg.display()),
            _dir: dir,
            root,
        }
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn run(&self, cmd: &str, extra: &[String]) -> Output {
        let mut args = vec![cmd.to_string(), self.config.clone()];
        args.extend(extra.iter().cloned());
        heurvid(&args)
    }

    fn ok(&self, cmd: &str, extra: &[String]) -> String {
        let out = self.run(cmd, extra);
        assert!(
            out.status.success(),
            "{cmd} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_reproducible() {
    let w = Work::new();
    w.ok("gen-data", &["--seed=7".into(), format!("--out={}", w.path("a"))]);
    w.ok("gen-data", &["--seed=7".into(), format!("--out={}", w.path("b"))]);
    let (a, b) = (read_tree(&w.root.join("a")), read_tree(&w.root.join("b")));
    assert!(a.iter().any(|(n, _)| n == "manifest.jsonl"));
    assert!(a.iter().any(|(n, _)| n == "config.json"));
    assert_eq!(a, b);
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let w = Work::new();
    let flag = |k: &str, rel: &str| format!("--{k}={}", w.path(rel));
    w.ok("gen-data", &[flag("out", "data")]);
    let manifest = flag("paths.manifest", "data/manifest.jsonl");
    w.ok("extract-vocab", &[manifest.clone(), flag("out", "vocab")]);
    let terms: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.root.join("vocab/terms.json")).unwrap()).unwrap();
    assert_eq!(terms["verbs"].as_array().unwrap().len(), 4);
    w.ok("make-prompts", &[flag("paths.terms", "vocab/terms.json"), flag("out", "prompts")]);
    let common = [
        manifest,
        flag("paths.vocab", "vocab/vocab.tsv"),
        flag("paths.prompts", "prompts/prompts.jsonl"),
        flag("paths.prompter", "prompter/prompter.ckpt"),
        flag("paths.heuristics", "heur/heuristics.jsonl"),
        flag("paths.reasoner", "qa/reasoner.ckpt"),
    ];
    let with = |rel: &str| {
        let mut v = common.to_vec();
        v.push(flag("out", rel));
        v
    };
    w.ok("pretrain-prompter", &with("prompter"));
    let csv = fs::read_to_string(w.root.join("prompter/pretrain_loss.csv")).unwrap();
    assert!(csv.starts_with("step,lr,loss,tau\n"));
    w.ok("gen-heuristics", &with("heur"));
    let prompter_before = fs::read(w.root.join("prompter/prompter.ckpt")).unwrap();
    let stdout = w.ok("train-qa", &with("qa"));
    assert!(stdout.contains("held-out accuracy"));
    assert_eq!(prompter_before, fs::read(w.root.join("prompter/prompter.ckpt")).unwrap());
    let loss = fs::read_to_string(w.root.join("qa/loss.csv")).unwrap();
    assert!(loss.starts_with("step,lr,loss,loss_pred,loss_tam,loss_sem,gate_mean\n"));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(w.root.join("qa/eval.json")).unwrap()).unwrap();
    for k in ["accuracy_overall", "accuracy_by_question_type", "num_samples", "seed"] {
        assert!(report.get(k).is_some(), "{k}");
    }
    let eval = w.ok("eval", &with("eval"));
    let again: serde_json::Value = serde_json::from_str(&eval).unwrap();
    assert_eq!(again, report);

    let dump = w.ok("inspect-heuristics", &[common[2].clone(), common[4].clone(), "--video-id=video_0003".into()]);
    assert!(dump.starts_with("video_0003\naction\n"));
    assert!(dump.contains("entity\n"));
    let missing = w.run("inspect-heuristics", &[common[4].clone(), "--video-id=nope".into()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn gen_heuristics_requires_a_frozen_prompter() {
    let w = Work::new();
    w.ok("gen-data", &[format!("--out={}", w.path("data"))]);
    let vocab = Vocabulary::from_texts(["a video of box"]);
    let cfg: PrompterConfig = serde_json::from_value(serde_json::json!({"crops": {"crop_size": 8}})).unwrap();
    Prompter::new(&cfg, vocab, 0).unwrap().save(&w.root.join("open.ckpt")).unwrap();
    let out = w.run(
        "gen-heuristics",
        &[
            format!("--paths.prompter={}", w.path("open.ckpt")),
            format!("--paths.manifest={}", w.path("data/manifest.jsonl")),
            format!("--out={}", w.path("h")),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prompter not frozen"));
}

#[test]
fn usage_and_config_errors() {
    let w = Work::new();
    assert_eq!(heurvid(&["bogus".into()]).status.code(), Some(1));
    assert_eq!(heurvid(&[]).status.code(), Some(1));
    let out = w.run("gen-data", &["--data.bogus=1".into(), format!("--out={}", w.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = w.run("train-qa", &[format!("--paths.manifest={}", w.path("none.jsonl")), format!("--out={}", w.path("y"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn grad_check_reports_every_component() {
    let w = Work::new();
    let out = w.run("grad-check", &[format!("--out={}", w.path("gc"))]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(out.status.code(), Some(0), "{text}");
    for name in ["matmul", "block_attention", "prompter contrastive loss", "reasoner fusion", "reasoner objective (gated)"] {
        assert!(text.contains(name), "{name}");
    }
    assert!(text.lines().all(|l| l.ends_with(" ok")));
}
