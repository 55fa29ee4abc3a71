//! Command-line front end: configuration resolution and the pipeline subcommands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompter::{
    generate_heuristics, read_heuristic_store, top_k, write_heuristic_store, HeuristicRecord, HeuristicStore, Prompter,
    PrompterConfig, DEFAULT_THRESHOLD, TOP_K,
};
use crate::reasoner::{AnswerMode, EvalReport, Reasoner, ReasonerConfig};
use crate::textproc::{
    extract_top_terms, instantiate_templates, read_prompt_sets, write_prompt_sets, Lexicon, PromptKind, PromptSet,
    TopTerms, Vocabulary, ACTION_TEMPLATES, ENTITY_TEMPLATES,
};
use crate::training::{
    answer_space, evaluate, run_pretrain, run_train_qa, split_by_video, write_pretrain_log, write_qa_log,
    PretrainConfig, PretrainSample, QaTrainConfig,
};
use crate::verify::full_report;
use crate::videoproc::{
    generate_synth_dataset, load_video, read_manifest, store_video, write_manifest, QaSample, SynthConfig, VideoTensor,
};

pub const SUBCOMMANDS: [&str; 9] = [
    "extract-vocab",
    "make-prompts",
    "gen-data",
    "pretrain-prompter",
    "gen-heuristics",
    "train-qa",
    "eval",
    "inspect-heuristics",
    "grad-check",
];

/// Input locations read by the subcommands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: String,
    /// Corpus for prompter pretraining; empty means `manifest`.
    pub pretrain_manifest: String,
    pub terms: String,
    pub vocab: String,
    pub prompts: String,
    pub prompter: String,
    pub heuristics: String,
    pub reasoner: String,
    /// Lexicon word lists; empty means the built-in lists.
    pub lexicon_verbs: String,
    pub lexicon_nouns: String,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            manifest: "data/manifest.jsonl".into(),
            pretrain_manifest: String::new(),
            terms: "vocab/terms.json".into(),
            vocab: "vocab/vocab.tsv".into(),
            prompts: "prompts/prompts.jsonl".into(),
            prompter: "prompter/prompter.ckpt".into(),
            heuristics: "heuristics/heuristics.jsonl".into(),
            reasoner: "qa/reasoner.ckpt".into(),
            lexicon_verbs: String::new(),
            lexicon_nouns: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    /// Verbs and nouns kept per kind.
    pub top_k: usize,
    /// Templates instantiated per word (at most 10).
    pub templates: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            top_k: 1000,
            templates: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicConfig {
    pub threshold: f64,
    /// Words shown per kind by `inspect-heuristics`.
    pub top_k: usize,
    pub video_id: String,
}

impl Default for HeuristicConfig {
    fn default() -> Self {
        HeuristicConfig {
            threshold: DEFAULT_THRESHOLD,
            top_k: TOP_K,
            video_id: String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub trials: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { trials: 100 }
    }
}

/// Every setting of a run. Defaults are the desk-scale settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub vocab: VocabConfig,
    pub data: SynthConfig,
    pub prompter: PrompterConfig,
    pub pretrain: PretrainConfig,
    pub heuristics: HeuristicConfig,
    pub reasoner: ReasonerConfig,
    pub train: QaTrainConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut prompter = PrompterConfig::default();
        prompter.video.layers = 1;
        prompter.video.max_frames = 4;
        prompter.text.layers = 1;
        prompter.crops.frames = 4;
        let mut reasoner = ReasonerConfig::default();
        reasoner.video.layers = 1;
        reasoner.video.max_frames = 4;
        reasoner.text.layers = 1;
        RunConfig {
            seed: 0,
            paths: Paths::default(),
            vocab: VocabConfig::default(),
            data: SynthConfig::default(),
            prompter,
            pretrain: PretrainConfig {
                epochs: 20,
                ..Default::default()
            },
            heuristics: HeuristicConfig::default(),
            reasoner,
            train: QaTrainConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Defaults, then the JSON file, then `key=value` overrides (values parsed as JSON, else taken as strings).
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut v = serde_json::to_value(RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path)?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        merge(&mut v, patch);
    }
    for (k, raw) in overrides {
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
        set_dotted(&mut v, &k.replace('-', "_"), value)?;
    }
    serde_json::from_value(v).map_err(|e| Error::config(e.to_string()))
}

/// First 12 hex digits of the SHA-256 of the resolved config.
pub fn config_hash(config: &RunConfig) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes))[..12].to_string())
}

#[derive(Debug)]
struct Invocation {
    command: String,
    config_file: Option<PathBuf>,
    out: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

fn parse_args(args: &[String]) -> std::result::Result<Invocation, String> {
    let command = args.first().ok_or("missing subcommand")?.clone();
    if !SUBCOMMANDS.contains(&command.as_str()) {
        return Err(format!("unknown subcommand {command:?}"));
    }
    let mut inv = Invocation {
        command,
        config_file: None,
        out: None,
        overrides: Vec::new(),
    };
    for a in &args[1..] {
        let body = a.strip_prefix("--").ok_or_else(|| format!("unexpected argument {a:?}"))?;
        let (k, v) = body.split_once('=').ok_or_else(|| format!("expected --key=value, got {a:?}"))?;
        if k.is_empty() {
            return Err(format!("empty key in {a:?}"));
        }
        match k {
            "config" => inv.config_file = Some(PathBuf::from(v)),
            "out" => inv.out = Some(PathBuf::from(v)),
            "video-id" => inv.overrides.push(("heuristics.video_id".into(), Value::String(v.into()).to_string())),
            _ => inv.overrides.push((k.to_string(), v.to_string())),
        }
    }
    Ok(inv)
}

pub fn usage() -> String {
    format!(
        "usage: heurvid <subcommand> [--config=FILE] [--out=DIR] [--key.path=VALUE ...]\nsubcommands: {}\n",
        SUBCOMMANDS.join(", ")
    )
}

/// Runs one subcommand; returns the process exit code (0 ok, 1 usage, 2 data or config error).
pub fn dispatch(args: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    if matches!(args.first().map(String::as_str), Some("-h" | "--help" | "help")) {
        let _ = stdout.write_all(usage().as_bytes());
        return 0;
    }
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(msg) => {
            let _ = write!(stderr, "error: {msg}\n{}", usage());
            return 1;
        }
    };
    match run(&inv, stdout) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            2
        }
    }
}

fn run(inv: &Invocation, stdout: &mut dyn Write) -> Result<i32> {
    let config = resolve_config(inv.config_file.as_deref(), &inv.overrides)?;
    let out = match &inv.out {
        Some(p) => p.clone(),
        None => PathBuf::from("runs").join(format!("{}-{}-s{}", inv.command, config_hash(&config)?, config.seed)),
    };
    let writes_outputs = inv.command != "inspect-heuristics";
    if writes_outputs {
        fs::create_dir_all(&out)?;
    }
    let code = match inv.command.as_str() {
        "gen-data" => gen_data(&config, &out, stdout)?,
        "extract-vocab" => extract_vocab(&config, &out, stdout)?,
        "make-prompts" => make_prompts(&config, &out, stdout)?,
        "pretrain-prompter" => pretrain_prompter(&config, &out, stdout)?,
        "gen-heuristics" => gen_heuristics(&config, &out, stdout)?,
        "train-qa" => train_qa(&config, &out, stdout)?,
        "eval" => eval(&config, &out, stdout)?,
        "inspect-heuristics" => inspect(&config, stdout)?,
        "grad-check" => grad_check(&config, &out, stdout)?,
        other => unreachable!("unvalidated subcommand {other}"),
    };
    if writes_outputs {
        write_json(&out.join("config.json"), &config)?;
    }
    Ok(code)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &str) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("{path}: {e}")))
}

/// Manifest samples and their videos, keyed by video id; video paths are relative to the manifest.
pub fn load_corpus(manifest: &str) -> Result<(Vec<QaSample>, BTreeMap<String, VideoTensor>)> {
    let samples = read_manifest(open(manifest)?)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{manifest}: no samples")));
    }
    let root = Path::new(manifest).parent().unwrap_or(Path::new("."));
    let mut videos = BTreeMap::new();
    for s in &samples {
        let id = s.video_id();
        if let std::collections::btree_map::Entry::Vacant(e) = videos.entry(id) {
            e.insert(load_video(&root.join(&s.video_path))?);
        }
    }
    Ok((samples, videos))
}

fn load_prompts(path: &str) -> Result<(PromptSet, PromptSet)> {
    let (a, e) = read_prompt_sets(open(path)?)?;
    if a.is_empty() || e.is_empty() {
        return Err(Error::Data(format!("{path}: needs both action and entity prompts")));
    }
    Ok((a, e))
}

fn templates(kind: PromptKind, n: usize) -> Result<Vec<String>> {
    let all: &[&str] = match kind {
        PromptKind::Action => &ACTION_TEMPLATES,
        PromptKind::Entity => &ENTITY_TEMPLATES,
    };
    if n == 0 || n > all.len() {
        return Err(Error::config(format!("vocab.templates must be in 1..={}", all.len())));
    }
    Ok(all[..n].iter().map(|s| s.to_string()).collect())
}

fn gen_data(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let ds = generate_synth_dataset(&config.data, config.seed)?;
    fs::create_dir_all(out.join("videos"))?;
    for (id, v) in &ds.videos {
        store_video(v, &out.join("videos").join(format!("{id}.vten")))?;
    }
    let mut w = create(&out.join("manifest.jsonl"))?;
    write_manifest(&mut w, &ds.samples)?;
    w.flush()?;
    writeln!(stdout, "{} videos, {} samples -> {}", ds.videos.len(), ds.samples.len(), out.display())?;
    Ok(0)
}

/// Vocabulary over every question, candidate and template word of the corpus.
pub fn build_vocab(samples: &[QaSample], terms: &TopTerms) -> Vocabulary {
    let templates: Vec<String> = ACTION_TEMPLATES.iter().chain(&ENTITY_TEMPLATES).map(|t| t.replace("{}", " ")).collect();
    let words: Vec<&str> = terms.verbs.iter().chain(&terms.nouns).map(|(w, _)| w.as_str()).collect();
    Vocabulary::from_texts(
        samples
            .iter()
            .flat_map(|s| std::iter::once(s.question.as_str()).chain(s.candidates.iter().map(String::as_str)))
            .chain(templates.iter().map(String::as_str))
            .chain(words),
    )
}

fn extract_vocab(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let samples = read_manifest(open(&config.paths.manifest)?)?;
    let lexicon = match (config.paths.lexicon_verbs.as_str(), config.paths.lexicon_nouns.as_str()) {
        ("", "") => Lexicon::builtin(),
        (v, n) if !v.is_empty() && !n.is_empty() => Lexicon::load(Path::new(v), Path::new(n))?,
        _ => return Err(Error::config("set both paths.lexicon_verbs and paths.lexicon_nouns, or neither")),
    };
    let terms = extract_top_terms(&samples, &lexicon, config.vocab.top_k)?;
    write_json(&out.join("terms.json"), &terms)?;
    let vocab = build_vocab(&samples, &terms);
    let mut w = create(&out.join("vocab.tsv"))?;
    vocab.write_tsv(&mut w)?;
    w.flush()?;
    writeln!(
        stdout,
        "{} verbs, {} nouns, {} vocabulary entries",
        terms.verbs.len(),
        terms.nouns.len(),
        vocab.len()
    )?;
    Ok(0)
}

fn make_prompts(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let terms: TopTerms =
        serde_json::from_reader(open(&config.paths.terms)?).map_err(|e| Error::Data(format!("{}: {e}", config.paths.terms)))?;
    let words = |xs: &[(String, u64)]| xs.iter().map(|(w, _)| w.clone()).collect::<Vec<_>>();
    let n = config.vocab.templates;
    let a = instantiate_templates(&words(&terms.verbs), PromptKind::Action, &templates(PromptKind::Action, n)?)?;
    let e = instantiate_templates(&words(&terms.nouns), PromptKind::Entity, &templates(PromptKind::Entity, n)?)?;
    let mut w = create(&out.join("prompts.jsonl"))?;
    write_prompt_sets(&mut w, &[&a, &e])?;
    w.flush()?;
    writeln!(stdout, "{} action and {} entity prompts", a.prompts.len(), e.prompts.len())?;
    Ok(0)
}

/// One pretraining sample per video, labeled from its first manifest line.
pub fn pretrain_samples(samples: &[QaSample], videos: &BTreeMap<String, VideoTensor>) -> Vec<PretrainSample> {
    let mut seen = BTreeMap::new();
    for s in samples {
        let id = s.video_id();
        if let (false, Some(v)) = (seen.contains_key(&id), videos.get(&id)) {
            seen.insert(
                id.clone(),
                PretrainSample {
                    video_id: id,
                    video: v.clone(),
                    action: s.action_label.clone(),
                    entity: s.entity_label.clone(),
                },
            );
        }
    }
    seen.into_values().collect()
}

fn pretrain_prompter(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let manifest = match config.paths.pretrain_manifest.as_str() {
        "" => &config.paths.manifest,
        p => p,
    };
    let (samples, videos) = load_corpus(manifest)?;
    let vocab = Vocabulary::read_tsv(open(&config.paths.vocab)?)?;
    let (a, e) = load_prompts(&config.paths.prompts)?;
    let mut prompter = Prompter::new(&config.prompter, vocab, config.seed)?;
    let data = pretrain_samples(&samples, &videos);
    let log = run_pretrain(&mut prompter, &data, &a, &e, &config.pretrain, config.seed)?;
    prompter.freeze();
    prompter.save(&out.join("prompter.ckpt"))?;
    let mut w = create(&out.join("pretrain_loss.csv"))?;
    write_pretrain_log(&mut w, &log)?;
    w.flush()?;
    let last = log.last().map_or(f64::NAN, |l| l.loss);
    writeln!(
        stdout,
        "{} steps, final loss {last:.4}, tau {:.4}, checksum {}",
        log.len(),
        prompter.tau(),
        prompter.checksum()
    )?;
    Ok(0)
}

fn gen_heuristics(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let prompter = Prompter::load(Path::new(&config.paths.prompter))?;
    if !prompter.is_frozen() {
        return Err(Error::State("prompter not frozen".into()));
    }
    let (_, videos) = load_corpus(&config.paths.manifest)?;
    let (a, e) = load_prompts(&config.paths.prompts)?;
    let videos: Vec<(String, VideoTensor)> = videos.into_iter().collect();
    let records = generate_heuristics(&prompter, &videos, &a, &e, config.seed, config.heuristics.threshold)?;
    let mut w = create(&out.join("heuristics.jsonl"))?;
    write_heuristic_store(&mut w, &records)?;
    w.flush()?;
    let kept = records.iter().filter(|r| r.kept).count();
    writeln!(stdout, "{} heuristics for {} videos, {kept} kept", records.len(), videos.len())?;
    Ok(0)
}

fn train_qa(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let (samples, videos) = load_corpus(&config.paths.manifest)?;
    let vocab = Vocabulary::read_tsv(open(&config.paths.vocab)?)?;
    let (a, e) = load_prompts(&config.paths.prompts)?;
    let store = match config.reasoner.loss.mode {
        crate::reasoner::LossMode::NoHeuristics => HeuristicStore::default(),
        _ => HeuristicStore::new(read_heuristic_store(open(&config.paths.heuristics)?)?)?,
    };
    let mut rcfg = config.reasoner.clone();
    rcfg.num_actions = a.len();
    rcfg.num_entities = e.len();
    let answers = match rcfg.answer_mode {
        AnswerMode::Mc => Vec::new(),
        AnswerMode::Oe => answer_space(&split_by_video(&samples, config.train.holdout, config.seed)?.0),
    };
    let mut reasoner = Reasoner::new(&rcfg, vocab, answers, config.seed)?;
    let run = run_train_qa(&mut reasoner, &samples, &videos, &store, &config.train, config.seed)?;
    reasoner.save(&out.join("reasoner.ckpt"))?;
    let mut w = create(&out.join("loss.csv"))?;
    write_qa_log(&mut w, &run.log)?;
    w.flush()?;
    write_json(&out.join("eval.json"), &run.report)?;
    writeln!(
        stdout,
        "train accuracy {:.4}, held-out accuracy {:.4} on {} samples",
        run.train_accuracy, run.report.accuracy_overall, run.report.num_samples
    )?;
    Ok(0)
}

fn eval(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let reasoner = Reasoner::load(Path::new(&config.paths.reasoner))?;
    let (samples, videos) = load_corpus(&config.paths.manifest)?;
    let (_, held) = split_by_video(&samples, config.train.holdout, config.seed)?;
    let target = if held.is_empty() { &samples } else { &held };
    let report = EvalReport::from_outcomes(&evaluate(&reasoner, target, &videos, config.train.frames)?, config.seed);
    write_json(&out.join("eval.json"), &report)?;
    serde_json::to_writer_pretty(&mut *stdout, &report)?;
    writeln!(stdout)?;
    Ok(0)
}

/// Text dump of one video's heuristics: the top words per kind, flagging filtered entries.
/// Words come from `sets` when given, else from the stored top list.
pub fn inspect_heuristics(
    store: &HeuristicStore,
    video_id: &str,
    top: usize,
    threshold: f64,
    sets: Option<(&PromptSet, &PromptSet)>,
) -> Result<String> {
    if !store.contains_video(video_id) {
        return Err(Error::Data(format!("no heuristics for video {video_id:?}")));
    }
    let mut s = format!("{video_id}\n");
    for kind in [PromptKind::Action, PromptKind::Entity] {
        let Some(r) = store.get(video_id, kind) else {
            s.push_str(&format!("{kind}: missing\n"));
            continue;
        };
        s.push_str(&format!("{kind}\n"));
        let set = sets.map(|(a, e)| if kind == PromptKind::Action { a } else { e });
        let entries = match set {
            Some(set) if set.words.len() == r.scores.len() => top_k(&r.scores, &set.words, top),
            _ => r.top.iter().take(top).cloned().collect(),
        };
        for t in entries {
            s.push_str(&format!("  {} {:.3}\n", t.word, t.score));
        }
        if !r.kept || r.max_score() < threshold {
            s.push_str(&format!("  (discarded: max {:.2} < {threshold:.2})\n", r.max_score()));
        }
    }
    Ok(s)
}

fn inspect(config: &RunConfig, stdout: &mut dyn Write) -> Result<i32> {
    let id = &config.heuristics.video_id;
    if id.is_empty() {
        return Err(Error::config("inspect-heuristics needs --video-id=ID"));
    }
    let records: Vec<HeuristicRecord> = read_heuristic_store(open(&config.paths.heuristics)?)?;
    let store = HeuristicStore::new(records)?;
    let sets = load_prompts(&config.paths.prompts).ok();
    let text = inspect_heuristics(
        &store,
        id,
        config.heuristics.top_k,
        config.heuristics.threshold,
        sets.as_ref().map(|(a, e)| (a, e)),
    )?;
    stdout.write_all(text.as_bytes())?;
    Ok(0)
}

fn grad_check(config: &RunConfig, out: &Path, stdout: &mut dyn Write) -> Result<i32> {
    let report = full_report(config.grad_check.trials, config.seed)?;
    let mut rows = Vec::with_capacity(report.len());
    for c in &report {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        writeln!(stdout, "{:<32} {:.3e} < {:.0e} {verdict}", c.name, c.error, c.tolerance)?;
        rows.push(serde_json::json!({"name": c.name, "error": c.error, "tolerance": c.tolerance, "passed": c.passed()}));
    }
    write_json(&out.join("grad_check.json"), &rows)?;
    Ok(if report.iter().all(|c| c.passed()) { 0 } else { 2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompter::TopEntry;

    fn record(id: &str, kind: PromptKind, scores: Vec<f64>, words: &[&str], kept: bool) -> HeuristicRecord {
        let words: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        HeuristicRecord {
            video_id: id.into(),
            kind,
            top: top_k(&scores, &words, TOP_K),
            scores,
            kept,
        }
    }

    #[test]
    fn inspect_formats_top_words() {
        let store = HeuristicStore::new(vec![
            record("v1", PromptKind::Action, vec![0.5, 0.4, 0.1], &["run", "jump", "eat"], true),
            record("v1", PromptKind::Entity, vec![0.6, 0.4], &["dog", "cat"], true),
        ])
        .unwrap();
        let text = inspect_heuristics(&store, "v1", 5, 0.1, None).unwrap();
        assert!(text.contains("  run 0.500\n  jump 0.400\n  eat 0.100\n"));
        assert!(!text.contains("discarded"));
        let two = inspect_heuristics(&store, "v1", 2, 0.1, None).unwrap();
        assert!(!two.contains("eat"));
        assert!(matches!(inspect_heuristics(&store, "v9", 5, 0.1, None), Err(Error::Data(_))));
    }

    #[test]
    fn inspect_flags_filtered_entries() {
        let scores: Vec<f64> = (0..12).map(|i| if i < 2 { 0.09 } else { 0.082 }).collect();
        let words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
        let wr: Vec<&str> = words.iter().map(String::as_str).collect();
        let store = HeuristicStore::new(vec![record("v", PromptKind::Entity, scores, &wr, false)]).unwrap();
        let text = inspect_heuristics(&store, "v", 5, 0.1, None).unwrap();
        assert!(text.contains("(discarded: max 0.09 < 0.10)"), "{text}");
        assert!(text.contains("action: missing"));
    }

    #[test]
    fn top_entry_order_is_stable() {
        let t = top_k(&[0.2, 0.5, 0.2], &["a".into(), "b".into(), "c".into()], 3);
        assert_eq!(
            t,
            vec![
                TopEntry { word: "b".into(), score: 0.5 },
                TopEntry { word: "a".into(), score: 0.2 },
                TopEntry { word: "c".into(), score: 0.2 }
            ]
        );
    }

    #[test]
    fn config_precedence_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("c.json");
        fs::write(&file, r#"{"seed": 3, "train": {"epochs": 5, "lr": 0.01}}"#).unwrap();
        let c = resolve_config(Some(&file), &[("train.epochs".into(), "7".into())]).unwrap();
        assert_eq!((c.seed, c.train.epochs, c.train.lr), (3, 7, 0.01));
        assert_eq!(c.train.batch_size, QaTrainConfig::default().batch_size);
        assert_eq!(c.reasoner.video.layers, 1);
        let c = resolve_config(None, &[("paths.manifest".into(), "x/m.jsonl".into())]).unwrap();
        assert_eq!(c.paths.manifest, "x/m.jsonl");
        let c = resolve_config(None, &[("reasoner.loss.mode".into(), "fixed-alpha".into())]).unwrap();
        assert_eq!(c.reasoner.loss.mode, crate::reasoner::LossMode::FixedAlpha);
        for bad in [("train.epoch", "3"), ("nope", "1"), ("seed.x", "1"), ("train.epochs", "many")] {
            let err = resolve_config(None, &[(bad.0.into(), bad.1.into())]).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad:?}");
        }
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_eq!(config_hash(&a).unwrap(), config_hash(&a.clone()).unwrap());
        assert_ne!(config_hash(&a).unwrap(), config_hash(&b).unwrap());
    }

    #[test]
    fn usage_errors_exit_one() {
        let run = |args: &[&str]| {
            let args: Vec<String> = args.iter().map(|s| s.to_string()).collect();
            let (mut o, mut e) = (Vec::new(), Vec::new());
            (dispatch(&args, &mut o, &mut e), String::from_utf8(e).unwrap())
        };
        assert_eq!(run(&[]).0, 1);
        let (code, err) = run(&["frobnicate"]);
        assert_eq!(code, 1);
        assert!(err.contains("usage"));
        assert_eq!(run(&["gen-data", "seed=3"]).0, 1);
        assert_eq!(run(&["--help"]).0, 0);
        assert_eq!(run(&["eval", "--nope.key=1"]).0, 2);
    }
}
