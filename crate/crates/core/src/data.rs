//! Dialogue corpus: record schema, JSONL loading with validation,
//! deterministic splits, the dual-annotation merge rule and corpus stats.
//!
//! One JSON object per line:
//!
//! ```text
//! {"id": "...", "utterances": [{"speaker": "...", "text": "..."}, ...],
//!  "audio_features": [[f64, ...], ...] | "relative/path.bin",
//!  "video_features": [[f64, ...], ...] | "relative/path.bin",
//!  "explanation": "...", "sarcasm_source": "...", "sarcasm_target": "...",
//!  "action_word": "...", "description": "..." | null}
//! ```
//!
//! A feature field given as a string names a binary matrix next to the
//! dataset file: row count and column count as little-endian u64, then the
//! values as little-endian f64 in row-major order.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::component_rng;
use crate::text::tokenize;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{}record {id:?}: field `{field}`: {rule}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Validation {
        line: Option<usize>,
        id: String,
        field: &'static str,
        rule: String,
    },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
}

/// One sarcastic dialogue; the last utterance is the sarcastic one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueInstance {
    pub id: String,
    pub utterances: Vec<Utterance>,
    /// Frames x audio feature width.
    pub audio_features: Vec<Vec<f64>>,
    /// Windows x video feature width.
    pub video_features: Vec<Vec<f64>>,
    pub explanation: String,
    pub sarcasm_source: String,
    pub sarcasm_target: String,
    pub action_word: String,
    pub description: Option<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum FeatureField {
    Inline(Vec<Vec<f64>>),
    Sidecar(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    utterances: Vec<Utterance>,
    audio_features: FeatureField,
    video_features: FeatureField,
    explanation: String,
    sarcasm_source: String,
    sarcasm_target: String,
    action_word: String,
    #[serde(default)]
    description: Option<String>,
}

impl DialogueInstance {
    pub fn speakers(&self) -> BTreeSet<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }

    /// Checks every record invariant. `line` is attached to the diagnostic.
    pub fn validate(&self, line: Option<usize>) -> Result<()> {
        let fail = |field: &'static str, rule: String| DataError::Validation {
            line,
            id: self.id.clone(),
            field,
            rule,
        };
        if self.id.trim().is_empty() {
            return Err(fail("id", "must be non-empty".into()));
        }
        if self.utterances.len() < 2 {
            return Err(fail(
                "utterances",
                format!(
                    "at least 2 utterances required, found {}",
                    self.utterances.len()
                ),
            ));
        }
        if let Some(i) = self
            .utterances
            .iter()
            .position(|u| u.speaker.trim().is_empty())
        {
            return Err(fail(
                "utterances",
                format!("utterance {i} has an empty speaker"),
            ));
        }
        if !self
            .utterances
            .iter()
            .any(|u| u.speaker == self.sarcasm_source)
        {
            return Err(fail(
                "sarcasm_source",
                format!(
                    "{:?} is not among the dialogue speakers",
                    self.sarcasm_source
                ),
            ));
        }
        if tokenize(&self.explanation).is_empty() {
            return Err(fail(
                "explanation",
                "must contain at least one token".into(),
            ));
        }
        check_matrix(&self.audio_features).map_err(|r| fail("audio_features", r))?;
        check_matrix(&self.video_features).map_err(|r| fail("video_features", r))?;
        Ok(())
    }
}

fn check_matrix(m: &[Vec<f64>]) -> std::result::Result<(), String> {
    let Some(first) = m.first() else {
        return Err("must have at least one row".into());
    };
    if first.is_empty() {
        return Err("must have at least one column".into());
    }
    for (i, row) in m.iter().enumerate() {
        if row.len() != first.len() {
            return Err(format!(
                "row {i} has {} columns, expected {}",
                row.len(),
                first.len()
            ));
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(format!("non-finite value at row {i}, column {j}"));
        }
    }
    Ok(())
}

/// Parses JSONL text. Sidecar paths resolve against `base_dir`.
pub fn parse_jsonl(text: &str, base_dir: &Path) -> Result<Vec<DialogueInstance>> {
    let mut out = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(raw_line).map_err(|e| DataError::Parse {
            line,
            message: e.to_string(),
        })?;
        let resolve = |f: FeatureField, field: &'static str| -> Result<Vec<Vec<f64>>> {
            match f {
                FeatureField::Inline(rows) => Ok(rows),
                FeatureField::Sidecar(rel) => {
                    read_matrix_bin(&base_dir.join(&rel)).map_err(|e| DataError::Validation {
                        line: Some(line),
                        id: raw.id.clone(),
                        field,
                        rule: format!("sidecar {rel:?}: {e}"),
                    })
                }
            }
        };
        let audio = resolve(raw.audio_features, "audio_features")?;
        let video = resolve(raw.video_features, "video_features")?;
        let inst = DialogueInstance {
            id: raw.id,
            utterances: raw.utterances,
            audio_features: audio,
            video_features: video,
            explanation: raw.explanation,
            sarcasm_source: raw.sarcasm_source,
            sarcasm_target: raw.sarcasm_target,
            action_word: raw.action_word,
            description: raw.description,
        };
        inst.validate(Some(line))?;
        if let Some(prev) = seen.insert(inst.id.clone(), line) {
            return Err(DataError::Validation {
                line: Some(line),
                id: inst.id,
                field: "id",
                rule: format!("duplicate of line {prev}"),
            });
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_and_validate(path: &Path) -> Result<Vec<DialogueInstance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl(&text, path.parent().unwrap_or(Path::new(".")))
}

/// One record per line, features inline.
pub fn to_jsonl(corpus: &[DialogueInstance]) -> String {
    let mut s = String::new();
    for inst in corpus {
        s.push_str(&serde_json::to_string(inst).expect("plain data serializes"));
        s.push('\n');
    }
    s
}

pub fn save_jsonl(path: &Path, corpus: &[DialogueInstance]) -> Result<()> {
    fs::write(path, to_jsonl(corpus)).map_err(io_err(path))
}

pub fn write_matrix_bin(path: &Path, rows: &[Vec<f64>]) -> Result<()> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(DataError::Contract("ragged matrix".into()));
    }
    let mut buf = Vec::with_capacity(16 + rows.len() * cols * 8);
    buf.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(cols as u64).to_le_bytes());
    for x in rows.iter().flatten() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

pub fn read_matrix_bin(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |m: String| DataError::Contract(format!("{}: {m}", path.display()));
    if bytes.len() < 16 {
        return Err(bad("truncated header".into()));
    }
    let word = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(0) as usize, word(8) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| bad("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "{rows}x{cols} needs {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(values
        .chunks(cols.max(1))
        .take(rows)
        .map(<[f64]>::to_vec)
        .collect())
}

/// Disjoint id lists covering the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffled index partition: ⌊0.8N⌋ train, ⌊0.1N⌋ validation, the rest test.
pub fn split_indices(n: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if n < 10 {
        return Err(DataError::Contract(format!(
            "split needs at least 10 instances, got {n}"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut component_rng(seed, "split"));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test = idx.split_off(n_train + n_val);
    let val = idx.split_off(n_train);
    Ok((idx, val, test))
}

pub fn split(corpus: &[DialogueInstance], seed: u64) -> Result<DatasetSplit> {
    let (tr, va, te) = split_indices(corpus.len(), seed)?;
    let ids = |ix: Vec<usize>| ix.into_iter().map(|i| corpus[i].id.clone()).collect();
    Ok(DatasetSplit {
        train: ids(tr),
        validation: ids(va),
        test: ids(te),
    })
}

/// Instances whose ids are listed, in list order.
pub fn select<'a>(corpus: &'a [DialogueInstance], ids: &[String]) -> Vec<&'a DialogueInstance> {
    let by_id: HashMap<&str, &DialogueInstance> =
        corpus.iter().map(|i| (i.id.as_str(), i)).collect();
    ids.iter()
        .filter_map(|id| by_id.get(id.as_str()).copied())
        .collect()
}

/// Cosine similarity of token-count vectors.
pub fn cosine_similarity(a: &str, b: &str) -> f64 {
    let counts = |s: &str| {
        let mut m: HashMap<String, f64> = HashMap::new();
        for t in tokenize(s) {
            *m.entry(t).or_default() += 1.0;
        }
        m
    };
    let (ca, cb) = (counts(a), counts(b));
    let dot: f64 = ca.iter().map(|(t, x)| x * cb.get(t).unwrap_or(&0.0)).sum();
    let sq = |m: &HashMap<String, f64>| m.values().map(|x| x * x).sum::<f64>();
    let denom = (sq(&ca) * sq(&cb)).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        dot / denom
    }
}

pub const MERGE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Merge {
    Chosen(String),
    /// Needs a third annotator.
    Conflict(String, String),
}

impl Merge {
    /// The agreed explanation, or `resolution` when the annotators conflict.
    pub fn resolve(self, resolution: Option<&str>) -> Result<String> {
        match (self, resolution) {
            (Merge::Chosen(s), _) => Ok(s),
            (Merge::Conflict(..), Some(r)) if !r.trim().is_empty() => Ok(r.to_string()),
            (Merge::Conflict(a, b), _) => Err(DataError::Contract(format!(
                "annotations conflict and no resolution was supplied: {a:?} vs {b:?}"
            ))),
        }
    }
}

/// Similar annotations (cosine above 0.9) collapse to the shorter one:
/// fewer tokens, then fewer characters, then the first argument.
pub fn merge_annotations(a: &str, b: &str) -> Result<Merge> {
    if a.trim().is_empty() || b.trim().is_empty() {
        return Err(DataError::Contract(
            "both annotations must be non-empty".into(),
        ));
    }
    if cosine_similarity(a, b) <= MERGE_THRESHOLD {
        return Ok(Merge::Conflict(a.to_string(), b.to_string()));
    }
    let key = |s: &str| (tokenize(s).len(), s.chars().count());
    Ok(Merge::Chosen(
        if key(b) < key(a) { b } else { a }.to_string(),
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpeakerCounts {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub dialogues: usize,
    pub utterances: usize,
    pub avg_utterances_per_dialogue: f64,
    pub avg_words_per_utterance: f64,
    pub avg_speakers_per_dialogue: f64,
    pub vocabulary_size: usize,
    /// Utterances per dialogue -> dialogues.
    pub dialogue_length_histogram: BTreeMap<usize, usize>,
    /// Words per utterance -> utterances.
    pub utterance_length_histogram: BTreeMap<usize, usize>,
    /// Words per explanation -> explanations.
    pub explanation_length_histogram: BTreeMap<usize, usize>,
    pub speakers: BTreeMap<String, SpeakerCounts>,
}

pub fn corpus_stats(corpus: &[DialogueInstance]) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(DataError::Contract(
            "statistics need a non-empty corpus".into(),
        ));
    }
    let mut vocab: HashSet<String> = HashSet::new();
    let mut utterances = 0;
    let mut words = 0;
    let mut speakers_total = 0;
    let mut dlg_hist = BTreeMap::new();
    let mut utt_hist = BTreeMap::new();
    let mut expl_hist = BTreeMap::new();
    let mut speakers: BTreeMap<String, SpeakerCounts> = BTreeMap::new();
    for inst in corpus {
        utterances += inst.utterances.len();
        *dlg_hist.entry(inst.utterances.len()).or_insert(0) += 1;
        speakers_total += inst.speakers().len();
        for u in &inst.utterances {
            let toks = tokenize(&u.text);
            words += toks.len();
            *utt_hist.entry(toks.len()).or_insert(0) += 1;
            vocab.extend(toks);
        }
        *expl_hist
            .entry(tokenize(&inst.explanation).len())
            .or_insert(0) += 1;
        speakers
            .entry(inst.sarcasm_source.clone())
            .or_default()
            .source += 1;
        speakers
            .entry(inst.sarcasm_target.clone())
            .or_default()
            .target += 1;
    }
    let n = corpus.len() as f64;
    Ok(CorpusStats {
        dialogues: corpus.len(),
        utterances,
        avg_utterances_per_dialogue: utterances as f64 / n,
        avg_words_per_utterance: words as f64 / utterances as f64,
        avg_speakers_per_dialogue: speakers_total as f64 / n,
        vocabulary_size: vocab.len(),
        dialogue_length_histogram: dlg_hist,
        utterance_length_histogram: utt_hist,
        explanation_length_histogram: expl_hist,
        speakers,
    })
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<32}{}", "dialogues", self.dialogues)?;
        writeln!(f, "{:<32}{}", "utterances", self.utterances)?;
        writeln!(
            f,
            "{:<32}{:.2}",
            "avg utterances / dialogue", self.avg_utterances_per_dialogue
        )?;
        writeln!(
            f,
            "{:<32}{:.2}",
            "avg words / utterance", self.avg_words_per_utterance
        )?;
        writeln!(
            f,
            "{:<32}{:.2}",
            "avg speakers / dialogue", self.avg_speakers_per_dialogue
        )?;
        writeln!(f, "{:<32}{}", "vocabulary size", self.vocabulary_size)?;
        let hist =
            |f: &mut fmt::Formatter<'_>, title: &str, h: &BTreeMap<usize, usize>| -> fmt::Result {
                writeln!(f, "\n{title}")?;
                for (k, v) in h {
                    writeln!(f, "  {k:>4}  {v}")?;
                }
                Ok(())
            };
        hist(
            f,
            "utterances per dialogue",
            &self.dialogue_length_histogram,
        )?;
        hist(f, "words per utterance", &self.utterance_length_histogram)?;
        hist(
            f,
            "words per explanation",
            &self.explanation_length_histogram,
        )?;
        writeln!(f, "\n{:<20}{:>8}{:>8}", "speaker", "source", "target")?;
        for (name, c) in &self.speakers {
            writeln!(f, "{name:<20}{:>8}{:>8}", c.source, c.target)?;
        }
        Ok(())
    }
}
