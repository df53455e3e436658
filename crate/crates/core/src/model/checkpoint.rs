use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError, Result};
use crate::tensor::Parameterized;
use crate::text::Vocab;

pub const CHECKPOINT_FORMAT: &str = "maf-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON dump: config, vocabulary and every named parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn capture(model: &Model, vocab: &Vocab) -> Self {
        let mut params = Vec::new();
        model.visit_params(&mut |name, t| {
            params.push(NamedTensor {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
        });
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            vocab: vocab.tokens().to_vec(),
            params,
        }
    }

    /// Rebuilds the model; every parameter must be present with its shape.
    pub fn restore(&self) -> Result<(Model, Vocab)> {
        let bad = |m: String| ModelError::Checkpoint(m);
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                self.format, self.version
            )));
        }
        let mut model = Model::new(self.config.clone())?;
        let mut stored: HashMap<&str, &NamedTensor> =
            self.params.iter().map(|p| (p.name.as_str(), p)).collect();
        let mut problem = None;
        model.visit_params_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            match stored.remove(name) {
                Some(p) if p.shape == t.shape() && p.data.len() == t.numel() => {
                    t.data_mut().copy_from_slice(&p.data);
                }
                Some(p) => {
                    problem = Some(format!(
                        "{name}: stored shape {:?}, model expects {:?}",
                        p.shape,
                        t.shape()
                    ))
                }
                None => problem = Some(format!("{name}: missing")),
            }
        });
        if let Some(p) = problem {
            return Err(bad(p));
        }
        if let Some(extra) = stored.keys().min() {
            return Err(bad(format!("{extra}: not a parameter of this model")));
        }
        Ok((model, Vocab::from_tokens(self.vocab.clone())))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, vocab: &Vocab) -> Result<()> {
    let json = serde_json::to_string(&Checkpoint::capture(model, vocab))
        .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    fs::write(path, json).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Vocab)> {
    let text = fs::read_to_string(path)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let ck: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    ck.restore()
}
