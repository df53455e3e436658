//! Training, evaluation, the variant grid, the fusion-layer sweep and report
//! rendering, driven by one JSON experiment config.
//!
//! Every run writes `runs/<label>-s<seed>.json` holding the resolved config
//! hash, the seed, the crate version, the loss trajectory and the test
//! scores. Nothing time-dependent is written, so repeating a command with
//! the same config produces byte-identical files.

mod report;

pub use report::{load_runs, render_report, write_report, GroupSummary, Report};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, DialogueInstance};
use crate::model::{
    self, build_vocab, Example, Hyper, Model, ModelConfig, ModelError, TrainLog, Variant,
};
use crate::synthetic::{self, Outcome, SyntheticSpec};
use crate::text::Vocab;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for everything found while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::Runtime(_) => 3,
        }
    }
}

impl From<ModelError> for ExperimentError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(m) => ExperimentError::Config(m),
            other => ExperimentError::Runtime(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn runtime(e: impl std::fmt::Display) -> ExperimentError {
    ExperimentError::Runtime(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// JSONL corpus split 80/10/10; training uses train, scoring uses test.
    Dataset { path: PathBuf, split_seed: u64 },
    /// Generated corpus; the last `test` instances are held out.
    Synthetic { spec: SyntheticSpec, test: usize },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            spec: SyntheticSpec::default(),
            test: 100,
        }
    }
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Maf]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without data or compute.
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(ExperimentError::Config(m));
        if self.variants.is_empty() {
            return cfg("at least one variant is required".into());
        }
        if self.seeds.is_empty() {
            return cfg("at least one seed is required".into());
        }
        self.model.validate()?;
        self.hyper.validate()?;
        match &self.data {
            DataSource::Synthetic { spec, test } => {
                spec.validate()
                    .map_err(|e| ExperimentError::Config(e.to_string()))?;
                if *test == 0 || *test >= spec.num_instances {
                    return cfg(format!(
                        "synthetic test size {test} must be in 1..{}",
                        spec.num_instances
                    ));
                }
                if spec.audio_dim != self.model.audio_input_dim
                    || spec.video_dim != self.model.video_input_dim
                {
                    return cfg(format!(
                        "synthetic feature widths {}/{} differ from model input widths {}/{}",
                        spec.audio_dim,
                        spec.video_dim,
                        self.model.audio_input_dim,
                        self.model.video_input_dim
                    ));
                }
            }
            DataSource::Dataset { path, .. } => {
                if !path.is_file() {
                    return cfg(format!("dataset {} does not exist", path.display()));
                }
            }
        }
        fs::create_dir_all(&self.out_dir).map_err(|e| {
            ExperimentError::Config(format!("output directory {}: {e}", self.out_dir.display()))
        })?;
        Ok(())
    }

    /// sha256 over the canonical JSON of this config, output location excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Train and test instances plus the train-only vocabulary.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Vec<DialogueInstance>,
    pub test: Vec<DialogueInstance>,
    pub vocab: Vocab,
}

pub fn prepare(source: &DataSource) -> Result<Prepared> {
    let (train, test) = match source {
        DataSource::Synthetic { spec, test } => {
            let mut corpus =
                synthetic::generate(spec).map_err(|e| ExperimentError::Config(e.to_string()))?;
            let held = corpus.split_off(corpus.len() - test);
            (corpus, held)
        }
        DataSource::Dataset { path, split_seed } => {
            let corpus = data::load_and_validate(path).map_err(runtime)?;
            let s = data::split(&corpus, *split_seed).map_err(runtime)?;
            let pick = |ids: &[String]| {
                data::select(&corpus, ids)
                    .into_iter()
                    .cloned()
                    .collect::<Vec<_>>()
            };
            (pick(&s.train), pick(&s.test))
        }
    };
    if train.is_empty() {
        return Err(ExperimentError::Runtime("training split is empty".into()));
    }
    let vocab = build_vocab(&train);
    Ok(Prepared { train, test, vocab })
}

/// What a single (variant, seed, fusion layer) run leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub group: String,
    pub label: String,
    pub variant: Variant,
    pub seed: u64,
    pub fusion_layer_index: usize,
    pub config_hash: String,
    pub version: String,
    pub epoch_losses: Vec<f64>,
    pub outcome: Outcome,
}

/// The config of one concrete run, used for hashing and training.
fn resolve(
    cfg: &ExperimentConfig,
    variant: Variant,
    seed: u64,
    fusion_layer: usize,
) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.model.variant = variant;
    c.model.seed = seed;
    c.model.fusion_layer_index = fusion_layer;
    c.variants = vec![variant];
    c.seeds = vec![seed];
    c
}

pub struct Trained {
    pub model: Model,
    pub log: TrainLog,
    pub resolved: ExperimentConfig,
}

pub fn train_one(
    cfg: &ExperimentConfig,
    data: &Prepared,
    variant: Variant,
    seed: u64,
    fusion_layer: usize,
) -> Result<Trained> {
    let resolved = resolve(cfg, variant, seed, fusion_layer);
    let mut mc = resolved.model.clone();
    mc.vocab_size = data.vocab.len();
    let examples = to_examples(&data.train, &data.vocab, &mc)?;
    let mut model = Model::new(mc)?;
    let log = model::train(&mut model, &examples, &cfg.hyper)?;
    Ok(Trained {
        model,
        log,
        resolved,
    })
}

pub fn to_examples(
    insts: &[DialogueInstance],
    vocab: &Vocab,
    mc: &ModelConfig,
) -> Result<Vec<Example>> {
    insts
        .iter()
        .map(|i| Example::from_instance(i, vocab, mc).map_err(ExperimentError::from))
        .collect()
}

/// Greedy predictions for `insts`, as text.
pub fn predict(model: &Model, vocab: &Vocab, insts: &[DialogueInstance]) -> Result<Vec<String>> {
    let examples = to_examples(insts, vocab, &model.config)?;
    examples
        .iter()
        .map(|ex| Ok(vocab.decode(&model.generate(ex)?)))
        .collect()
}

pub fn score(hyps: &[String], test: &[DialogueInstance]) -> Result<Outcome> {
    synthetic::outcome(hyps, test).map_err(runtime)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

pub fn loss_log(log: &TrainLog) -> String {
    let mut s = String::from("step\tloss\n");
    for (i, l) in log.step_losses.iter().enumerate() {
        s.push_str(&format!("{i}\t{l:.17e}\n"));
    }
    s
}

/// Trains, predicts on the test split and writes the run record and
/// predictions under `out_dir`.
fn run_and_record(
    cfg: &ExperimentConfig,
    data: &Prepared,
    group: &str,
    label: &str,
    variant: Variant,
    seed: u64,
    fusion_layer: usize,
) -> Result<RunRecord> {
    let trained = train_one(cfg, data, variant, seed, fusion_layer)
        .map_err(|e| with_context(e, &format!("{label} (seed {seed})")))?;
    let hyps = predict(&trained.model, &data.vocab, &data.test)?;
    let record = RunRecord {
        group: group.to_string(),
        label: label.to_string(),
        variant,
        seed,
        fusion_layer_index: fusion_layer,
        config_hash: trained.resolved.hash(),
        version: VERSION.to_string(),
        epoch_losses: trained.log.epoch_losses.clone(),
        outcome: score(&hyps, &data.test)?,
    };
    let stem = format!("{group}-{label}-s{seed}");
    write(
        &cfg.out_dir.join("runs").join(format!("{stem}.json")),
        &to_json(&record),
    )?;
    write(
        &cfg.out_dir.join("predictions").join(format!("{stem}.txt")),
        &(hyps.join("\n") + "\n"),
    )?;
    Ok(record)
}

fn with_context(e: ExperimentError, what: &str) -> ExperimentError {
    match e {
        ExperimentError::Config(m) => ExperimentError::Config(format!("{what}: {m}")),
        ExperimentError::Runtime(m) => ExperimentError::Runtime(format!("{what}: {m}")),
    }
}

/// Trains the first configured variant with the first seed; writes the
/// checkpoint, a step-indexed loss log and the test scores.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let data = prepare(&cfg.data)?;
    let (variant, seed) = (cfg.variants[0], cfg.seeds[0]);
    let k = cfg.model.fusion_layer_index;
    let trained = train_one(cfg, &data, variant, seed, k)?;
    model::save_checkpoint(
        &cfg.out_dir.join("checkpoint.json"),
        &trained.model,
        &data.vocab,
    )?;
    write(&cfg.out_dir.join("losses.tsv"), &loss_log(&trained.log))?;
    let hyps = predict(&trained.model, &data.vocab, &data.test)?;
    let record = RunRecord {
        group: "train".into(),
        label: variant.name().into(),
        variant,
        seed,
        fusion_layer_index: k,
        config_hash: trained.resolved.hash(),
        version: VERSION.into(),
        epoch_losses: trained.log.epoch_losses,
        outcome: if data.test.is_empty() {
            Outcome::default()
        } else {
            score(&hyps, &data.test)?
        },
    };
    write(&cfg.out_dir.join("metrics.json"), &to_json(&record))?;
    Ok(record)
}

/// Scores a saved checkpoint on the configured test split.
pub fn cmd_evaluate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Outcome> {
    cfg.validate()?;
    let (model, vocab) =
        model::load_checkpoint(checkpoint).map_err(|e| ExperimentError::Config(e.to_string()))?;
    let data = prepare(&cfg.data)?;
    let hyps = predict(&model, &vocab, &data.test)?;
    let outcome = score(&hyps, &data.test)?;
    write(&cfg.out_dir.join("evaluation.json"), &to_json(&outcome))?;
    write(
        &cfg.out_dir.join("evaluation-predictions.txt"),
        &(hyps.join("\n") + "\n"),
    )?;
    Ok(outcome)
}

/// Every configured variant under every seed, then the report.
pub fn cmd_ablate(cfg: &ExperimentConfig, mut progress: impl FnMut(&RunRecord)) -> Result<Report> {
    cfg.validate()?;
    let data = prepare(&cfg.data)?;
    let k = cfg.model.fusion_layer_index;
    for &variant in &cfg.variants {
        for &seed in &cfg.seeds {
            let r = run_and_record(cfg, &data, "ablation", variant.name(), variant, seed, k)?;
            progress(&r);
        }
    }
    write_report(&cfg.out_dir)
}

/// The fused model with the block before each encoder layer in turn.
pub fn cmd_sweep_fusion_layer(
    cfg: &ExperimentConfig,
    mut progress: impl FnMut(&RunRecord),
) -> Result<Report> {
    cfg.validate()?;
    if cfg.model.encoder_layers < 2 {
        return Err(ExperimentError::Config(
            "the sweep needs at least 2 encoder layers".into(),
        ));
    }
    let data = prepare(&cfg.data)?;
    for k in 1..=cfg.model.encoder_layers {
        for &seed in &cfg.seeds {
            let r = run_and_record(cfg, &data, "sweep", &format!("L{k}"), Variant::Maf, seed, k)?;
            progress(&r);
        }
    }
    write_report(&cfg.out_dir)
}

pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<usize> {
    let corpus = synthetic::generate(spec).map_err(|e| ExperimentError::Config(e.to_string()))?;
    write(out, &data::to_jsonl(&corpus))?;
    Ok(corpus.len())
}

pub fn cmd_stats(dataset: &Path) -> Result<data::CorpusStats> {
    let corpus = data::load_and_validate(dataset).map_err(runtime)?;
    data::corpus_stats(&corpus).map_err(runtime)
}
