//! Pre-norm transformer encoder-decoder with a fusion block before one
//! encoder layer.
//!
//! Text enters as `<spk> speaker words…` per utterance, padded to
//! `max_text_len`. Audio and video features pass through their own small
//! encoders and are aligned to the text length, then the fusion block
//! replaces the hidden states entering encoder layer `fusion_layer_index`.
//! The decoder is trained with teacher forcing and decodes greedily.
//!
//! Every component draws its initial values from its own named random
//! stream, so models that differ only in variant share identical host
//! weights. With the zero-initialised gates this makes a fresh fused model
//! compute exactly what the text-only model computes.

mod adapter;
mod checkpoint;
mod config;
mod layers;
mod modality;
mod train;

pub use adapter::Fusion;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, NamedTensor, CHECKPOINT_FORMAT,
    CHECKPOINT_VERSION,
};
pub use config::{ModelConfig, ModelError, Result, Variant};
pub use layers::{
    causal_mask, key_mask, sinusoidal_positions, Attention, DecoderLayer, EncoderLayer,
    FeedForward, LayerNorm, Linear,
};
pub use modality::{align_temporal, alignment_matrix, ModalityEncoder};
pub use train::{train, train_with_progress, Adam, Hyper, TrainLog};

use crate::data::DialogueInstance;
use crate::mca2::{visit_prefixed, visit_prefixed_mut};
use crate::tensor::{component_rng, uniform_xavier, Graph, Parameterized, Tensor, Var};
use crate::text::{tokenize, Vocab, BOS, EOS, PAD, SPK};

/// Model-ready view of one dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    /// Serialized dialogue, at most `max_text_len` ids, unpadded.
    pub text: Vec<usize>,
    /// Frames x raw audio width.
    pub audio: Tensor,
    /// Windows x raw video width.
    pub video: Tensor,
    /// Explanation ids without sentinels.
    pub target: Vec<usize>,
}

/// Dialogue tokens for the vocabulary and the encoder.
pub fn dialogue_tokens(inst: &DialogueInstance) -> Vec<String> {
    let mut toks = Vec::new();
    for u in &inst.utterances {
        toks.push("<spk>".to_string());
        toks.extend(tokenize(&u.speaker));
        toks.extend(tokenize(&u.text));
    }
    toks
}

/// Vocabulary over dialogue and explanation tokens of `corpus`.
pub fn build_vocab<'a, I>(corpus: I) -> Vocab
where
    I: IntoIterator<Item = &'a DialogueInstance>,
{
    let mut all = Vec::new();
    for inst in corpus {
        all.extend(dialogue_tokens(inst));
        all.extend(tokenize(&inst.explanation));
    }
    Vocab::build(all.iter().map(String::as_str))
}

impl Example {
    /// Keeps the last `max_text_len` dialogue tokens (the sarcastic turn is
    /// last) and the first `max_explanation_len` explanation tokens.
    pub fn from_instance(
        inst: &DialogueInstance,
        vocab: &Vocab,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let mut text: Vec<usize> = dialogue_tokens(inst)
            .iter()
            .map(|t| if t == "<spk>" { SPK } else { vocab.id(t) })
            .collect();
        if text.len() > cfg.max_text_len {
            text.drain(..text.len() - cfg.max_text_len);
        }
        let mut target = vocab.encode(&tokenize(&inst.explanation));
        target.truncate(cfg.max_explanation_len);
        let matrix = |rows: &[Vec<f64>], what: &str| {
            Tensor::from_rows(rows)
                .map_err(|e| ModelError::Contract(format!("{}: {what}: {e}", inst.id)))
        };
        Ok(Example {
            text,
            audio: matrix(&inst.audio_features, "audio")?,
            video: matrix(&inst.video_features, "video")?,
            target,
        })
    }
}

/// Encoder output plus which of its rows are real tokens.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub states: Var,
    pub keys: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab x d, shared by encoder and decoder inputs.
    pub embed: Tensor,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
    pub audio_encoder: Option<ModalityEncoder>,
    pub video_encoder: Option<ModalityEncoder>,
    pub fusion: Fusion,
    pub fusion_norm: Option<LayerNorm>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.vocab_size <= SPK {
            return Err(ModelError::Config(format!(
                "vocab_size {} leaves no room for ordinary tokens",
                config.vocab_size
            )));
        }
        let c = &config;
        let rng = |name: &str| component_rng(c.seed, name);
        let encoder = (0..c.encoder_layers)
            .map(|i| EncoderLayer::new(c.d, c.heads, c.ffn, &mut rng(&format!("encoder.{i}"))))
            .collect();
        let decoder = (0..c.decoder_layers)
            .map(|i| DecoderLayer::new(c.d, c.heads, c.ffn, &mut rng(&format!("decoder.{i}"))))
            .collect();
        let audio_encoder = c.variant.uses_audio().then(|| {
            ModalityEncoder::new(
                c.audio_input_dim,
                c.d_c_audio,
                c.max_frames,
                &mut rng("audio_encoder"),
            )
        });
        let video_encoder = c.variant.uses_video().then(|| {
            ModalityEncoder::new(
                c.video_input_dim,
                c.d_c_video,
                c.max_windows,
                &mut rng("video_encoder"),
            )
        });
        Ok(Model {
            embed: uniform_xavier(c.vocab_size, c.d, &mut rng("embed")),
            encoder,
            encoder_norm: LayerNorm::new(c.d),
            decoder,
            decoder_norm: LayerNorm::new(c.d),
            output: Linear::new(c.d, c.vocab_size, &mut rng("output")),
            audio_encoder,
            video_encoder,
            fusion: Fusion::new(c)?,
            fusion_norm: c.post_fusion_norm.then(|| LayerNorm::new(c.d)),
            config,
        })
    }

    fn embed_tokens(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(ModelError::Contract(format!(
                "token id {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let table = g.param(&self.embed);
        let x = g.gather_rows(table, ids)?;
        let x = g.scale(x, (self.config.d as f64).sqrt());
        let pos = g.constant(&sinusoidal_positions(ids.len(), self.config.d));
        Ok(g.add(x, pos)?)
    }

    /// Text ids are padded to `max_text_len`; both modality matrices need at
    /// least one row (an all-zero frame stands for silence).
    pub fn encode(
        &self,
        g: &mut Graph,
        text: &[usize],
        audio: &Tensor,
        video: &Tensor,
    ) -> Result<Encoded> {
        let n = self.config.max_text_len;
        if text.is_empty() {
            return Err(ModelError::Contract("empty text".into()));
        }
        if text.len() > n {
            return Err(ModelError::Contract(format!(
                "text has {} tokens, more than max_text_len {n}",
                text.len()
            )));
        }
        let mut ids = text.to_vec();
        ids.resize(n, PAD);
        let keys: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        let mask = key_mask(n, &keys);
        let mut h = self.embed_tokens(g, &ids)?;
        for (i, layer) in self.encoder.iter().enumerate() {
            if i + 1 == self.config.fusion_layer_index {
                h = self.fuse(g, h, audio, video)?;
            }
            h = layer.forward(g, h, Some(&mask))?;
        }
        let states = self.encoder_norm.forward(g, h)?;
        Ok(Encoded { states, keys })
    }

    fn fuse(&self, g: &mut Graph, h: Var, audio: &Tensor, video: &Tensor) -> Result<Var> {
        let n = self.config.max_text_len;
        let ca = match &self.audio_encoder {
            Some(e) => Some(e.forward(g, audio, n)?),
            None => None,
        };
        let cv = match &self.video_encoder {
            Some(e) => Some(e.forward(g, video, n)?),
            None => None,
        };
        let fused = self.fusion.forward(g, h, ca, cv)?;
        Ok(match &self.fusion_norm {
            Some(norm) => norm.forward(g, fused)?,
            None => fused,
        })
    }

    /// Next-token logits (`inputs.len() x vocab`) for decoder inputs.
    pub fn decode_logits(&self, g: &mut Graph, enc: &Encoded, inputs: &[usize]) -> Result<Var> {
        let len = inputs.len();
        let causal = causal_mask(len);
        let memory = key_mask(len, &enc.keys);
        let mut y = self.embed_tokens(g, inputs)?;
        for layer in &self.decoder {
            y = layer.forward(g, y, enc.states, &causal, &memory)?;
        }
        let y = self.decoder_norm.forward(g, y)?;
        Ok(self.output.forward(g, y)?)
    }

    /// Teacher-forced mean token cross-entropy over `target + <eos>`.
    pub fn loss(&self, g: &mut Graph, ex: &Example) -> Result<Var> {
        self.loss_padded(g, ex, 0)
    }

    /// As [`Model::loss`] with `extra` padding positions appended to the
    /// decoder sequence; they carry zero weight.
    pub fn loss_padded(&self, g: &mut Graph, ex: &Example, extra: usize) -> Result<Var> {
        let enc = self.encode(g, &ex.text, &ex.audio, &ex.video)?;
        let target = &ex.target[..ex.target.len().min(self.config.max_explanation_len)];
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(target);
        let mut outputs = target.to_vec();
        outputs.push(EOS);
        let mut weights = vec![1.0; outputs.len()];
        inputs.extend(std::iter::repeat_n(PAD, extra));
        outputs.extend(std::iter::repeat_n(PAD, extra));
        weights.extend(std::iter::repeat_n(0.0, extra));
        let logits = self.decode_logits(g, &enc, &inputs)?;
        Ok(g.cross_entropy(logits, &outputs, &weights)?)
    }

    /// Greedy decoding from a finished encoder output. Ties go to the lowest
    /// id. The result excludes the sentinels.
    pub fn decode_greedy(
        &self,
        states: &Tensor,
        keys: &[bool],
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mut seq = vec![BOS];
        let mut out = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::new();
            let enc = Encoded {
                states: g.constant(states),
                keys: keys.to_vec(),
            };
            let logits = self.decode_logits(&mut g, &enc, &seq)?;
            let v = self.config.vocab_size;
            let last = &g.value(logits)[(seq.len() - 1) * v..seq.len() * v];
            let mut best = 0;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == EOS {
                break;
            }
            out.push(best);
            seq.push(best);
        }
        Ok(out)
    }

    /// Encodes and greedily decodes up to `max_explanation_len` tokens.
    pub fn generate(&self, ex: &Example) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &ex.text, &ex.audio, &ex.video)?;
        let states = g.tensor(enc.states);
        self.decode_greedy(&states, &enc.keys, self.config.max_explanation_len)
    }

    /// Encoder output for `ex` as a plain tensor.
    pub fn encode_tensor(&self, ex: &Example) -> Result<Tensor> {
        let mut g = Graph::new();
        let enc = self.encode(&mut g, &ex.text, &ex.audio, &ex.video)?;
        Ok(g.tensor(enc.states))
    }
}

impl Parameterized for Model {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("embed", &self.embed);
        for (i, l) in self.encoder.iter().enumerate() {
            visit_prefixed(&format!("encoder.{i}"), l, f);
        }
        visit_prefixed("encoder_norm", &self.encoder_norm, f);
        for (i, l) in self.decoder.iter().enumerate() {
            visit_prefixed(&format!("decoder.{i}"), l, f);
        }
        visit_prefixed("decoder_norm", &self.decoder_norm, f);
        visit_prefixed("output", &self.output, f);
        if let Some(e) = &self.audio_encoder {
            visit_prefixed("audio_encoder", e, f);
        }
        if let Some(e) = &self.video_encoder {
            visit_prefixed("video_encoder", e, f);
        }
        visit_prefixed("fusion", &self.fusion, f);
        if let Some(n) = &self.fusion_norm {
            visit_prefixed("fusion_norm", n, f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("embed", &mut self.embed);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            visit_prefixed_mut(&format!("encoder.{i}"), l, f);
        }
        visit_prefixed_mut("encoder_norm", &mut self.encoder_norm, f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            visit_prefixed_mut(&format!("decoder.{i}"), l, f);
        }
        visit_prefixed_mut("decoder_norm", &mut self.decoder_norm, f);
        visit_prefixed_mut("output", &mut self.output, f);
        if let Some(e) = &mut self.audio_encoder {
            visit_prefixed_mut("audio_encoder", e, f);
        }
        if let Some(e) = &mut self.video_encoder {
            visit_prefixed_mut("video_encoder", e, f);
        }
        visit_prefixed_mut("fusion", &mut self.fusion, f);
        if let Some(n) = &mut self.fusion_norm {
            visit_prefixed_mut("fusion_norm", n, f);
        }
    }
}
