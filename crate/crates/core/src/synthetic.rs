//! A multimodal explanation task where only the audio knows the action and
//! only the video knows the target.
//!
//! Dialogue text names the speakers and is otherwise filler. The gold
//! explanation is `source action target`. The source is the last speaker,
//! so it is readable from text; the action is the index of a unit basis
//! vector added to every audio frame, and the target likewise in every
//! video window, both with Gaussian noise. Action and target are drawn
//! uniformly and independently of everything in the text, so a text-only
//! model cannot beat chance on them.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng as _, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DialogueInstance, Utterance};
use crate::metrics::{mentions, score_corpus, Scores};
use crate::model::Variant;
use crate::tensor::{splitmix64, Rng};
use crate::text::tokenize;

pub const SPEAKERS: [&str; 10] = [
    "maya",
    "indravadan",
    "monisha",
    "rosesh",
    "sahil",
    "dushyant",
    "madhusudan",
    "kavita",
    "pappu",
    "dolly",
];
pub const ACTIONS: [&str; 10] = [
    "mocks",
    "taunts",
    "praises",
    "teases",
    "ridicules",
    "flatters",
    "scolds",
    "insults",
    "admires",
    "blames",
];
pub const TARGETS: [&str; 10] = [
    "poetry",
    "cooking",
    "clothes",
    "singing",
    "manners",
    "house",
    "car",
    "job",
    "friends",
    "hairstyle",
];
pub const FILLERS: [&str; 16] = [
    "arre", "yaar", "kya", "hua", "accha", "dekho", "bas", "chalo", "haan", "nahi", "suno", "sach",
    "matlab", "bilkul", "toh", "phir",
];
const DESCRIPTIONS: [&str; 6] = ["party", "dinner", "wedding", "morning", "guests", "holiday"];

#[derive(Debug, Error, PartialEq)]
pub enum SyntheticError {
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("{0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, SyntheticError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_instances: usize,
    pub speakers: usize,
    pub actions: usize,
    pub targets: usize,
    pub frames: usize,
    pub windows: usize,
    /// Standard deviation of the per-coordinate Gaussian noise.
    pub noise: f64,
    pub seed: u64,
    pub audio_dim: usize,
    pub video_dim: usize,
    /// Appends `during the <occasion>` to explanations.
    pub rich_templates: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_instances: 700,
            speakers: 6,
            actions: 5,
            targets: 6,
            frames: 12,
            windows: 8,
            noise: 0.1,
            seed: 1,
            audio_dim: 16,
            video_dim: 32,
            rich_templates: false,
        }
    }
}

impl SyntheticSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SyntheticError::Spec(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(SyntheticError::Spec(m));
        for (name, v, max) in [
            ("speakers", self.speakers, SPEAKERS.len()),
            ("actions", self.actions, ACTIONS.len()),
            ("targets", self.targets, TARGETS.len()),
        ] {
            if v < 2 || v > max {
                return err(format!("{name} must be in 2..={max}, got {v}"));
            }
        }
        if self.actions > self.audio_dim {
            return err(format!(
                "{} actions need audio_dim >= {}",
                self.actions, self.actions
            ));
        }
        if self.targets > self.video_dim {
            return err(format!(
                "{} targets need video_dim >= {}",
                self.targets, self.targets
            ));
        }
        if self.frames == 0 || self.windows == 0 {
            return err("frames and windows must be positive".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return err(format!(
                "noise must be finite and non-negative, got {}",
                self.noise
            ));
        }
        Ok(())
    }
}

/// Seed for instance `index`, independent across instances.
pub fn instance_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 ^ 0x5eed))
}

fn pattern_rows(
    class: usize,
    rows: usize,
    dim: usize,
    noise: &Normal<f64>,
    rng: &mut Rng,
) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..dim)
                .map(|j| f64::from(u8::from(j == class)) + noise.sample(rng))
                .collect()
        })
        .collect()
}

fn filler(rng: &mut Rng) -> String {
    let len = rng.random_range(3..=6);
    (0..len)
        .map(|_| *FILLERS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Generates instance `index` of the corpus described by `spec`.
pub fn generate_instance(spec: &SyntheticSpec, index: usize) -> DialogueInstance {
    let mut rng = Rng::seed_from_u64(instance_seed(spec.seed, index));
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    let people = &SPEAKERS[..spec.speakers];

    let turns = rng.random_range(2..=3);
    let mut cast: Vec<&str> = people.to_vec();
    cast.shuffle(&mut rng);
    let source = cast[0];
    let other = cast[1];
    let mut utterances = Vec::with_capacity(turns);
    for t in 0..turns {
        // alternate ending on the source
        let speaker = if (turns - 1 - t) % 2 == 0 {
            source
        } else {
            other
        };
        utterances.push(Utterance {
            speaker: speaker.to_string(),
            text: filler(&mut rng),
        });
    }

    let action = rng.random_range(0..spec.actions);
    let target = rng.random_range(0..spec.targets);
    let audio = pattern_rows(action, spec.frames, spec.audio_dim, &noise, &mut rng);
    let video = pattern_rows(target, spec.windows, spec.video_dim, &noise, &mut rng);

    let mut explanation = format!("{source} {} {}", ACTIONS[action], TARGETS[target]);
    let description = spec.rich_templates.then(|| {
        let d = format!(
            "during the {}",
            DESCRIPTIONS.choose(&mut rng).expect("non-empty")
        );
        explanation.push(' ');
        explanation.push_str(&d);
        d
    });
    DialogueInstance {
        id: format!("syn-{}-{index:05}", spec.seed),
        utterances,
        audio_features: audio,
        video_features: video,
        explanation,
        sarcasm_source: source.to_string(),
        sarcasm_target: TARGETS[target].to_string(),
        action_word: ACTIONS[action].to_string(),
        description,
    }
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<DialogueInstance>> {
    spec.validate()?;
    Ok((0..spec.num_instances)
        .map(|i| generate_instance(spec, i))
        .collect())
}

/// Index of the action word of `inst` in the action vocabulary.
pub fn action_class(inst: &DialogueInstance) -> Option<usize> {
    ACTIONS.iter().position(|a| *a == inst.action_word)
}

pub fn target_class(inst: &DialogueInstance) -> Option<usize> {
    TARGETS.iter().position(|t| *t == inst.sarcasm_target)
}

/// How one set of predictions fares on the synthetic test split (percent).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub action_acc: f64,
    pub target_acc: f64,
    pub exact_match: f64,
    pub scores: Scores,
}

pub fn outcome(hyps: &[String], test: &[DialogueInstance]) -> Result<Outcome> {
    if hyps.len() != test.len() {
        return Err(SyntheticError::Contract(format!(
            "{} predictions for {} test instances",
            hyps.len(),
            test.len()
        )));
    }
    let n = test.len().max(1) as f64;
    let pct = |hits: usize| 100.0 * hits as f64 / n;
    let mut action = 0;
    let mut target = 0;
    let mut exact = 0;
    for (h, inst) in hyps.iter().zip(test) {
        action += usize::from(mentions(h, &inst.action_word));
        target += usize::from(mentions(h, &inst.sarcasm_target));
        exact += usize::from(tokenize(h) == tokenize(&inst.explanation));
    }
    let refs: Vec<String> = test.iter().map(|i| i.explanation.clone()).collect();
    let golds: Vec<(String, String)> = test
        .iter()
        .map(|i| (i.sarcasm_source.clone(), i.sarcasm_target.clone()))
        .collect();
    let scores =
        score_corpus(hyps, &refs, &golds).map_err(|e| SyntheticError::Contract(e.to_string()))?;
    Ok(Outcome {
        action_acc: pct(action),
        target_acc: pct(target),
        exact_match: pct(exact),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub outcomes: BTreeMap<Variant, Outcome>,
    /// Variants sorted by action accuracy, best first.
    pub ordering: Vec<Variant>,
    /// Action-accuracy margin of each variant over TextOnly, in points.
    pub action_margin: BTreeMap<Variant, f64>,
    pub exact_margin: BTreeMap<Variant, f64>,
}

/// Compares variants on the same test split. TextOnly and MAF must both be
/// present; the others are optional.
pub fn evaluate_gap(
    predictions: &BTreeMap<Variant, Vec<String>>,
    test: &[DialogueInstance],
) -> Result<GapReport> {
    for required in [Variant::TextOnly, Variant::Maf] {
        if !predictions.contains_key(&required) {
            return Err(SyntheticError::Contract(format!(
                "gap report needs variant {required}"
            )));
        }
    }
    let outcomes = predictions
        .iter()
        .map(|(v, h)| Ok((*v, outcome(h, test)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let base = outcomes[&Variant::TextOnly];
    let mut ordering: Vec<Variant> = outcomes.keys().copied().collect();
    ordering.sort_by(|a, b| {
        outcomes[b]
            .action_acc
            .total_cmp(&outcomes[a].action_acc)
            .then(a.cmp(b))
    });
    let action_margin = outcomes
        .iter()
        .map(|(v, o)| (*v, o.action_acc - base.action_acc))
        .collect();
    let exact_margin = outcomes
        .iter()
        .map(|(v, o)| (*v, o.exact_match - base.exact_match))
        .collect();
    Ok(GapReport {
        outcomes,
        ordering,
        action_margin,
        exact_margin,
    })
}
