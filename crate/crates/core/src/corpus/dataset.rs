//! Dataset records, validation and JSON-lines I/O.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::text::marked_hypothesis;
use super::vocab::{TokenSeq, Vocab};
use crate::error::{MulteeError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    /// Exactly one correct choice; trained with softmax cross entropy over choices.
    #[default]
    SingleCorrect,
    /// Any subset of choices may be correct; trained with per-choice binary cross entropy.
    MultiLabel,
}

/// One line of a QA dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub question: String,
    pub choices: Vec<String>,
    pub premises: Vec<String>,
    pub gold: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relevance_labels: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<Vec<String>>,
    #[serde(default)]
    pub contiguous: bool,
    #[serde(default)]
    pub task_type: TaskType,
}

impl QaRecord {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(MulteeError::Validation(m));
        if self.question.trim().is_empty() {
            return fail("empty question".into());
        }
        if self.choices.len() < 2 {
            return fail(format!("{} choices, need at least 2", self.choices.len()));
        }
        if self.premises.is_empty() {
            return fail("no premises".into());
        }
        if let Some(&g) = self.gold.iter().find(|&&g| g >= self.choices.len()) {
            return fail(format!("gold index {g} out of range for {} choices", self.choices.len()));
        }
        let mut sorted = self.gold.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.gold.len() {
            return fail("duplicate gold index".into());
        }
        if self.task_type == TaskType::SingleCorrect && self.gold.len() != 1 {
            return fail(format!(
                "single_correct task with {} gold choices",
                self.gold.len()
            ));
        }
        if let Some(labels) = &self.relevance_labels {
            if labels.len() != self.premises.len() {
                return fail(format!(
                    "{} relevance labels for {} premises",
                    labels.len(),
                    self.premises.len()
                ));
            }
            if labels.iter().any(|&y| y > 1) {
                return fail("relevance labels must be 0 or 1".into());
            }
        }
        if let Some(h) = &self.hypotheses {
            if h.len() != self.choices.len() {
                return fail(format!(
                    "{} hypotheses for {} choices",
                    h.len(),
                    self.choices.len()
                ));
            }
        }
        Ok(())
    }

    /// Hypothesis texts, built from question and choice when the record has none.
    pub fn hypothesis_texts(&self) -> Result<Vec<String>> {
        match &self.hypotheses {
            Some(h) => Ok(h.clone()),
            None => self
                .choices
                .iter()
                .map(|c| marked_hypothesis(&self.question, c))
                .collect(),
        }
    }

    /// Validates and fills in hypotheses.
    pub fn completed(mut self) -> Result<QaRecord> {
        self.validate()?;
        self.hypotheses = Some(self.hypothesis_texts()?);
        Ok(self)
    }
}

/// A validated, tokenized QA example.
#[derive(Clone, Debug, PartialEq)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub choices: Vec<String>,
    pub hypothesis_texts: Vec<String>,
    pub premise_texts: Vec<String>,
    pub hypotheses: Vec<TokenSeq>,
    pub premises: Vec<TokenSeq>,
    pub gold: Vec<usize>,
    pub relevance_labels: Option<Vec<u8>>,
    pub contiguous: bool,
    pub task_type: TaskType,
}

impl QaExample {
    pub fn from_record(record: &QaRecord, fallback_id: usize, vocab: &Vocab) -> Result<QaExample> {
        record.validate()?;
        let hypothesis_texts = record.hypothesis_texts()?;
        let hypotheses = hypothesis_texts
            .iter()
            .map(|h| vocab.tokenize(h))
            .collect::<Result<Vec<_>>>()?;
        let premises = record
            .premises
            .iter()
            .map(|p| vocab.tokenize(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(QaExample {
            id: record.id.clone().unwrap_or_else(|| fallback_id.to_string()),
            question: record.question.clone(),
            choices: record.choices.clone(),
            hypothesis_texts,
            premise_texts: record.premises.clone(),
            hypotheses,
            premises,
            gold: record.gold.clone(),
            relevance_labels: record.relevance_labels.clone(),
            contiguous: record.contiguous,
            task_type: record.task_type,
        })
    }

    pub fn to_record(&self) -> QaRecord {
        QaRecord {
            id: Some(self.id.clone()),
            question: self.question.clone(),
            choices: self.choices.clone(),
            premises: self.premise_texts.clone(),
            gold: self.gold.clone(),
            relevance_labels: self.relevance_labels.clone(),
            hypotheses: Some(self.hypothesis_texts.clone()),
            contiguous: self.contiguous,
            task_type: self.task_type,
        }
    }

    pub fn num_premises(&self) -> usize {
        self.premises.len()
    }

    pub fn num_choices(&self) -> usize {
        self.choices.len()
    }

    pub fn is_gold(&self, choice: usize) -> bool {
        self.gold.contains(&choice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NliLabel {
    Entailment,
    Contradiction,
    Neutral,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Contradiction, NliLabel::Neutral];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NliRecord {
    pub premise: String,
    pub hypothesis: String,
    pub label: NliLabel,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NliExample {
    pub premise: TokenSeq,
    pub hypothesis: TokenSeq,
    pub label: NliLabel,
}

impl NliExample {
    pub fn from_record(record: &NliRecord, vocab: &Vocab) -> Result<NliExample> {
        Ok(NliExample {
            premise: vocab.tokenize(&record.premise)?,
            hypothesis: vocab.tokenize(&record.hypothesis)?,
            label: record.label,
        })
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| MulteeError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates QA records; hypotheses are synthesized where absent.
pub fn read_qa_records(path: &Path) -> Result<Vec<QaRecord>> {
    let records: Vec<QaRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            r.completed().map_err(|e| match e {
                MulteeError::Validation(m) => MulteeError::Validation(format!("record {}: {m}", i + 1)),
                other => other,
            })
        })
        .collect()
}

pub fn write_qa_records(path: &Path, records: &[QaRecord]) -> Result<()> {
    write_jsonl(path, records)
}

pub fn load_qa_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<QaExample>> {
    read_qa_records(path)?
        .iter()
        .enumerate()
        .map(|(i, r)| QaExample::from_record(r, i, vocab))
        .collect()
}

pub fn read_nli_records(path: &Path) -> Result<Vec<NliRecord>> {
    read_jsonl(path)
}

pub fn write_nli_records(path: &Path, records: &[NliRecord]) -> Result<()> {
    write_jsonl(path, records)
}

/// Token lists for vocabulary construction.
pub fn qa_token_lists(records: &[QaRecord]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for r in records {
        for p in &r.premises {
            out.push(super::text::tokenize(p)?);
        }
        for h in r.hypothesis_texts()? {
            out.push(super::text::tokenize(&h)?);
        }
    }
    Ok(out)
}

pub fn nli_token_lists(records: &[NliRecord]) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    for r in records {
        out.push(super::text::tokenize(&r.premise)?);
        out.push(super::text::tokenize(&r.hypothesis)?);
    }
    Ok(out)
}
