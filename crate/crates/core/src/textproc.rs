//! Tokenization, verb/noun term extraction, prompt templates and QA input conversion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videoproc::QaSample;

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const MASK: &str = "[MASK]";

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const MASK_ID: u32 = 3;

const SPECIALS: [&str; 4] = [PAD, UNK, CLS, MASK];

/// Placeholder substituted by [`instantiate_templates`].
pub const PLACEHOLDER: &str = "{}";

pub const ENTITY_TEMPLATES: [&str; 10] = [
    "A video of a {}.",
    "A video of the entity {}.",
    "A video contains the entity of {}.",
    "A shooting of a {}.",
    "A shooting of the {}.",
    "A shooting contains the entity of {}.",
    "A video footage of a {}.",
    "A video footage of the {}.",
    "A footage contains the entity of {}.",
    "A video recording about the entity of {}.",
];

pub const ACTION_TEMPLATES: [&str; 10] = [
    "A video contains the action of {}.",
    "A video about the action of {}.",
    "A video recording about the action of {}.",
    "A video shooting of the action {}.",
    "A video of action {} being performed.",
    "A footage of the action of {}.",
    "A shooting of the action {}.",
    "A shooting of {} in action.",
    "A clip of {} in action.",
    "A clip contains the action of {}.",
];

const DEFAULT_VERBS: &str = include_str!("../data/verbs.txt");
const DEFAULT_NOUNS: &str = include_str!("../data/nouns.txt");

/// Lowercases, turns everything except letters and digits into spaces, and splits.
pub fn normalize(text: &str) -> Vec<String> {
    text.chars()
        .flat_map(|c| {
            let keep = c.is_alphanumeric();
            c.to_lowercase().map(move |l| if keep { l } else { ' ' })
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Closed word vocabulary. Ids 0..4 are the special tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    counts: Vec<u64>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from word counts; ordering is descending count, then lexicographic.
    pub fn from_counts(counts: &HashMap<String, u64>) -> Self {
        let mut entries: Vec<(&String, &u64)> = counts.iter().collect();
        entries.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut vocab = Self::specials_only();
        for (w, c) in entries {
            vocab.push(w.clone(), *c);
        }
        vocab
    }

    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = HashMap::new();
        for t in texts {
            for w in normalize(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self::from_counts(&counts)
    }

    fn specials_only() -> Self {
        let mut v = Vocabulary {
            words: Vec::new(),
            counts: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string(), 0);
        }
        v
    }

    fn push(&mut self, word: String, count: u64) {
        if self.index.contains_key(&word) {
            return;
        }
        self.index.insert(word.clone(), self.words.len() as u32);
        self.words.push(word);
        self.counts.push(count);
    }

    /// Non-special `(word, count)` pairs in id order.
    pub fn entries(&self) -> Vec<(String, u64)> {
        self.words
            .iter()
            .cloned()
            .zip(self.counts.iter().copied())
            .skip(SPECIALS.len())
            .collect()
    }

    pub fn from_entries(entries: &[(String, u64)]) -> Self {
        let mut vocab = Self::specials_only();
        for (w, c) in entries {
            vocab.push(w.clone(), *c);
        }
        vocab
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Writes `word<TAB>count` lines for every non-special word, in id order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for (word, count) in self.words.iter().zip(&self.counts).skip(SPECIALS.len()) {
            writeln!(w, "{word}\t{count}")?;
        }
        Ok(())
    }

    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self> {
        let mut vocab = Self::specials_only();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (word, count) = line.split_once('\t').ok_or_else(|| {
                Error::Data(format!("vocabulary line {} lacks a tab", lineno + 1))
            })?;
            let count = count.trim().parse().map_err(|_| {
                Error::Data(format!("vocabulary line {}: bad count {count:?}", lineno + 1))
            })?;
            vocab.push(word.to_string(), count);
        }
        Ok(vocab)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_tsv(std::io::BufReader::new(f))
    }
}

/// Token ids fed to a text encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Renders ids back to words, for debugging and tests.
    pub fn render(&self, vocab: &Vocabulary) -> String {
        self.0
            .iter()
            .map(|&id| vocab.word(id).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Normalizes `text` and maps each word to its id; unknown words become `[UNK]`.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    TokenSequence(
        normalize(text)
            .iter()
            .map(|w| vocab.id(w).unwrap_or(UNK_ID))
            .collect(),
    )
}

/// `[CLS] question [PAD] candidate`
pub fn convert_mc(question: &str, candidate: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![CLS_ID];
    ids.extend(tokenize(question, vocab).0);
    ids.push(PAD_ID);
    ids.extend(tokenize(candidate, vocab).0);
    TokenSequence(ids)
}

/// `[CLS] question`
pub fn convert_oe(question: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = vec![CLS_ID];
    ids.extend(tokenize(question, vocab).0);
    TokenSequence(ids)
}

/// Verb and noun word lists standing in for a part-of-speech tagger.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    verbs: BTreeSet<String>,
    nouns: BTreeSet<String>,
}

impl Lexicon {
    /// Words present in both lists are kept as verbs only.
    pub fn new(verbs: impl IntoIterator<Item = String>, nouns: impl IntoIterator<Item = String>) -> Self {
        let verbs: BTreeSet<String> = verbs.into_iter().collect();
        let nouns = nouns.into_iter().filter(|n| !verbs.contains(n)).collect();
        Lexicon { verbs, nouns }
    }

    pub fn parse(verbs: &str, nouns: &str) -> Self {
        fn words(s: &str) -> impl Iterator<Item = String> + '_ {
            s.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
        }
        Self::new(words(verbs), words(nouns))
    }

    pub fn load(verbs: &Path, nouns: &Path) -> Result<Self> {
        Ok(Self::parse(
            &std::fs::read_to_string(verbs)?,
            &std::fs::read_to_string(nouns)?,
        ))
    }

    /// The lexicon shipped with the crate.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_VERBS, DEFAULT_NOUNS)
    }

    pub fn verbs(&self) -> &BTreeSet<String> {
        &self.verbs
    }

    pub fn nouns(&self) -> &BTreeSet<String> {
        &self.nouns
    }

    pub fn is_empty(&self) -> bool {
        self.verbs.is_empty() && self.nouns.is_empty()
    }
}

/// Ranked verb and noun lists with their corpus counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopTerms {
    pub verbs: Vec<(String, u64)>,
    pub nouns: Vec<(String, u64)>,
}

impl TopTerms {
    pub fn verb_words(&self) -> Vec<String> {
        self.verbs.iter().map(|(w, _)| w.clone()).collect()
    }

    pub fn noun_words(&self) -> Vec<String> {
        self.nouns.iter().map(|(w, _)| w.clone()).collect()
    }
}

/// Counts lexicon matches over every question and candidate answer and keeps the `k` most frequent.
pub fn extract_top_terms(corpus: &[QaSample], lexicon: &Lexicon, k: usize) -> Result<TopTerms> {
    if lexicon.is_empty() {
        return Err(Error::config("lexicon is empty"));
    }
    if k == 0 {
        return Err(Error::arg("k must be at least 1"));
    }
    let mut verbs: BTreeMap<String, u64> = BTreeMap::new();
    let mut nouns: BTreeMap<String, u64> = BTreeMap::new();
    for sample in corpus {
        let texts = std::iter::once(sample.question.as_str())
            .chain(sample.candidates.iter().map(String::as_str));
        for text in texts {
            for w in normalize(text) {
                if lexicon.verbs.contains(&w) {
                    *verbs.entry(w).or_insert(0) += 1;
                } else if lexicon.nouns.contains(&w) {
                    *nouns.entry(w).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(TopTerms {
        verbs: rank(verbs, k),
        nouns: rank(nouns, k),
    })
}

fn rank(counts: BTreeMap<String, u64>, k: usize) -> Vec<(String, u64)> {
    let mut v: Vec<(String, u64)> = counts.into_iter().collect();
    // BTreeMap iteration is lexicographic and the sort is stable.
    v.sort_by_key(|e| std::cmp::Reverse(e.1));
    v.truncate(k);
    v
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Action,
    Entity,
}

impl fmt::Display for PromptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PromptKind::Action => "action",
            PromptKind::Entity => "entity",
        })
    }
}

impl FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "action" => Ok(PromptKind::Action),
            "entity" => Ok(PromptKind::Entity),
            other => Err(Error::arg(format!("unknown prompt kind {other:?}"))),
        }
    }
}

/// Instantiated prompts for one kind. Prompt `w * templates_per_word + t` is word `w`
/// under template `t`; the word order is the index space of every heuristic of this kind.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pub kind: PromptKind,
    pub words: Vec<String>,
    pub prompts: Vec<String>,
    pub templates_per_word: usize,
}

impl PromptSet {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Prompts belonging to word `w`.
    pub fn prompts_for(&self, w: usize) -> &[String] {
        let t = self.templates_per_word;
        &self.prompts[w * t..(w + 1) * t]
    }

    pub fn records(&self) -> Vec<PromptRecord> {
        self.prompts
            .iter()
            .enumerate()
            .map(|(i, p)| PromptRecord {
                kind: self.kind,
                word: self.words[i / self.templates_per_word].clone(),
                prompt: p.clone(),
                index: i / self.templates_per_word,
            })
            .collect()
    }

    /// Rebuilds a set from JSONL records of one kind, in file order.
    pub fn from_records(kind: PromptKind, records: &[PromptRecord]) -> Result<Self> {
        let mut words: Vec<String> = Vec::new();
        let mut prompts = Vec::new();
        for r in records.iter().filter(|r| r.kind == kind) {
            if r.index == words.len() {
                words.push(r.word.clone());
            } else if r.index + 1 != words.len() || words[r.index] != r.word {
                return Err(Error::Data(format!(
                    "prompt record for {:?} has out-of-order index {}",
                    r.word, r.index
                )));
            }
            prompts.push(r.prompt.clone());
        }
        if words.is_empty() {
            return Ok(PromptSet {
                kind,
                words,
                prompts,
                templates_per_word: 1,
            });
        }
        if prompts.len() % words.len() != 0 {
            return Err(Error::Data("uneven prompts per word".into()));
        }
        let t = prompts.len() / words.len();
        let set = PromptSet {
            kind,
            words,
            prompts,
            templates_per_word: t,
        };
        let mine: Vec<PromptRecord> = records.iter().filter(|r| r.kind == kind).cloned().collect();
        if set.records() != mine {
            return Err(Error::Data("uneven prompts per word".into()));
        }
        Ok(set)
    }
}

/// One line of a prompt-set JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub kind: PromptKind,
    pub word: String,
    pub prompt: String,
    pub index: usize,
}

/// Substitutes every word into every template.
pub fn instantiate_templates(words: &[String], kind: PromptKind, templates: &[String]) -> Result<PromptSet> {
    if templates.is_empty() {
        return Err(Error::config("no prompt templates"));
    }
    for t in templates {
        if t.matches(PLACEHOLDER).count() != 1 {
            return Err(Error::config(format!(
                "template {t:?} must contain exactly one {PLACEHOLDER}"
            )));
        }
    }
    let prompts = words
        .iter()
        .flat_map(|w| templates.iter().map(move |t| t.replacen(PLACEHOLDER, w, 1)))
        .collect();
    Ok(PromptSet {
        kind,
        words: words.to_vec(),
        prompts,
        templates_per_word: templates.len(),
    })
}

pub fn write_prompt_sets<W: Write>(mut w: W, sets: &[&PromptSet]) -> Result<()> {
    for set in sets {
        for r in set.records() {
            serde_json::to_writer(&mut w, &r)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a prompt JSONL file into `(action, entity)` sets.
pub fn read_prompt_sets<R: BufRead>(r: R) -> Result<(PromptSet, PromptSet)> {
    let mut records = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str::<PromptRecord>(&line)?);
    }
    Ok((
        PromptSet::from_records(PromptKind::Action, &records)?,
        PromptSet::from_records(PromptKind::Entity, &records)?,
    ))
}
