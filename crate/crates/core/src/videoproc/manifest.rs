use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuestionType {
    Entity,
    Action,
    Composition,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] = [QuestionType::Entity, QuestionType::Action, QuestionType::Composition];

    pub fn as_str(self) -> &'static str {
        match self {
            QuestionType::Entity => "entity",
            QuestionType::Action => "action",
            QuestionType::Composition => "composition",
        }
    }
}

/// One question about one video; a manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaSample {
    pub video_path: String,
    pub question: String,
    pub candidates: Vec<String>,
    pub answer_index: usize,
    pub entity_label: String,
    pub action_label: String,
    pub question_type: QuestionType,
}

impl QaSample {
    /// Video id: the file stem of `video_path`.
    pub fn video_id(&self) -> String {
        Path::new(&self.video_path)
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.video_path.clone())
    }

    pub fn answer(&self) -> Option<&str> {
        self.candidates.get(self.answer_index).map(String::as_str)
    }
}

pub fn write_manifest<W: Write>(mut w: W, samples: &[QaSample]) -> Result<()> {
    for s in samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_manifest<R: BufRead>(r: R) -> Result<Vec<QaSample>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
