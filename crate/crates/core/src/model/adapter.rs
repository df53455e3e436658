//! The fusion block inserted before one encoder layer, one shape per variant.

use super::config::{ModelConfig, Variant};
use super::layers::Linear;
use crate::gif::{gif_fuse, gif_fuse_single, GateParams, GifParams};
use crate::mca2::{
    cross_attention, mca2_forward, visit_prefixed, visit_prefixed_mut, CrossAttentionParams,
    Mca2Params,
};
use crate::tensor::{component_rng, Graph, Parameterized, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    TextOnly,
    Maf {
        audio: Mca2Params,
        video: Mca2Params,
        gif: GifParams,
    },
    /// Context-aware attention followed by plain addition.
    NoGif {
        audio: Mca2Params,
        video: Mca2Params,
    },
    Dpa {
        audio: CrossAttentionParams,
        video: CrossAttentionParams,
        gif: GifParams,
    },
    Concat1 {
        audio: Linear,
        video: Linear,
        gif: GifParams,
    },
    Concat2 {
        proj: Linear,
    },
    Ta {
        audio: Mca2Params,
        gate: GateParams,
        sigmoid_gates: bool,
    },
    Tv {
        video: Mca2Params,
        gate: GateParams,
        sigmoid_gates: bool,
    },
}

impl Fusion {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let (d, da, dv, heads) = (cfg.d, cfg.d_c_audio, cfg.d_c_video, cfg.adapter_heads);
        let rng = |name: &str| component_rng(cfg.seed, name);
        let gif = || GifParams {
            sigmoid_gates: cfg.sigmoid_gates,
            ..GifParams::zeros(d)
        };
        Ok(match cfg.variant {
            Variant::TextOnly => Fusion::TextOnly,
            Variant::Maf => Fusion::Maf {
                audio: Mca2Params::init(d, da, heads, &mut rng("adapter.audio"))?,
                video: Mca2Params::init(d, dv, heads, &mut rng("adapter.video"))?,
                gif: gif(),
            },
            Variant::NoGif => Fusion::NoGif {
                audio: Mca2Params::init(d, da, heads, &mut rng("adapter.audio"))?,
                video: Mca2Params::init(d, dv, heads, &mut rng("adapter.video"))?,
            },
            Variant::Dpa => Fusion::Dpa {
                audio: CrossAttentionParams::init(d, da, heads, &mut rng("adapter.audio"))?,
                video: CrossAttentionParams::init(d, dv, heads, &mut rng("adapter.video"))?,
                gif: gif(),
            },
            Variant::Concat1 => Fusion::Concat1 {
                audio: Linear::new(d + da, d, &mut rng("adapter.audio")),
                video: Linear::new(d + dv, d, &mut rng("adapter.video")),
                gif: gif(),
            },
            Variant::Concat2 => Fusion::Concat2 {
                proj: Linear::new(d + da + dv, d, &mut rng("adapter.concat")),
            },
            Variant::Ta => Fusion::Ta {
                audio: Mca2Params::init(d, da, heads, &mut rng("adapter.audio"))?,
                gate: GateParams::zeros(d),
                sigmoid_gates: cfg.sigmoid_gates,
            },
            Variant::Tv => Fusion::Tv {
                video: Mca2Params::init(d, dv, heads, &mut rng("adapter.video"))?,
                gate: GateParams::zeros(d),
                sigmoid_gates: cfg.sigmoid_gates,
            },
        })
    }

    /// Fuses text states `h` (n x d) with aligned contexts. A context the
    /// variant does not use may be `None`.
    pub fn forward(
        &self,
        g: &mut Graph,
        h: Var,
        audio: Option<Var>,
        video: Option<Var>,
    ) -> Result<Var> {
        let need = |c: Option<Var>, which: &str| {
            c.ok_or_else(|| TensorError::contract("fusion", format!("{which} context missing")))
        };
        match self {
            Fusion::TextOnly => Ok(h),
            Fusion::Maf {
                audio: pa,
                video: pv,
                gif,
            } => {
                let ha = mca2_forward(g, h, need(audio, "audio")?, pa)?;
                let hv = mca2_forward(g, h, need(video, "video")?, pv)?;
                gif_fuse(g, h, ha, hv, gif)
            }
            Fusion::NoGif {
                audio: pa,
                video: pv,
            } => {
                let ha = mca2_forward(g, h, need(audio, "audio")?, pa)?;
                let hv = mca2_forward(g, h, need(video, "video")?, pv)?;
                let s = g.add(h, ha)?;
                g.add(s, hv)
            }
            Fusion::Dpa {
                audio: pa,
                video: pv,
                gif,
            } => {
                let ha = cross_attention(g, h, need(audio, "audio")?, pa)?;
                let hv = cross_attention(g, h, need(video, "video")?, pv)?;
                gif_fuse(g, h, ha, hv, gif)
            }
            Fusion::Concat1 {
                audio: la,
                video: lv,
                gif,
            } => {
                let ca = g.concat_last(h, need(audio, "audio")?)?;
                let ha = la.forward(g, ca)?;
                let cv = g.concat_last(h, need(video, "video")?)?;
                let hv = lv.forward(g, cv)?;
                gif_fuse(g, h, ha, hv, gif)
            }
            Fusion::Concat2 { proj } => {
                let c = g.concat_last(h, need(audio, "audio")?)?;
                let c = g.concat_last(c, need(video, "video")?)?;
                proj.forward(g, c)
            }
            Fusion::Ta {
                audio: pa,
                gate,
                sigmoid_gates,
            } => {
                let ha = mca2_forward(g, h, need(audio, "audio")?, pa)?;
                gif_fuse_single(g, h, ha, gate, *sigmoid_gates)
            }
            Fusion::Tv {
                video: pv,
                gate,
                sigmoid_gates,
            } => {
                let hv = mca2_forward(g, h, need(video, "video")?, pv)?;
                gif_fuse_single(g, h, hv, gate, *sigmoid_gates)
            }
        }
    }
}

impl Parameterized for Fusion {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Fusion::TextOnly => {}
            Fusion::Maf { audio, video, gif } => {
                visit_prefixed("audio", audio, f);
                visit_prefixed("video", video, f);
                visit_prefixed("gif", gif, f);
            }
            Fusion::NoGif { audio, video } => {
                visit_prefixed("audio", audio, f);
                visit_prefixed("video", video, f);
            }
            Fusion::Dpa { audio, video, gif } => {
                visit_prefixed("audio", audio, f);
                visit_prefixed("video", video, f);
                visit_prefixed("gif", gif, f);
            }
            Fusion::Concat1 { audio, video, gif } => {
                visit_prefixed("audio", audio, f);
                visit_prefixed("video", video, f);
                visit_prefixed("gif", gif, f);
            }
            Fusion::Concat2 { proj } => visit_prefixed("proj", proj, f),
            Fusion::Ta { audio, gate, .. } => {
                visit_prefixed("audio", audio, f);
                visit_prefixed("gate", gate, f);
            }
            Fusion::Tv { video, gate, .. } => {
                visit_prefixed("video", video, f);
                visit_prefixed("gate", gate, f);
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Fusion::TextOnly => {}
            Fusion::Maf { audio, video, gif } => {
                visit_prefixed_mut("audio", audio, f);
                visit_prefixed_mut("video", video, f);
                visit_prefixed_mut("gif", gif, f);
            }
            Fusion::NoGif { audio, video } => {
                visit_prefixed_mut("audio", audio, f);
                visit_prefixed_mut("video", video, f);
            }
            Fusion::Dpa { audio, video, gif } => {
                visit_prefixed_mut("audio", audio, f);
                visit_prefixed_mut("video", video, f);
                visit_prefixed_mut("gif", gif, f);
            }
            Fusion::Concat1 { audio, video, gif } => {
                visit_prefixed_mut("audio", audio, f);
                visit_prefixed_mut("video", video, f);
                visit_prefixed_mut("gif", gif, f);
            }
            Fusion::Concat2 { proj } => visit_prefixed_mut("proj", proj, f),
            Fusion::Ta { audio, gate, .. } => {
                visit_prefixed_mut("audio", audio, f);
                visit_prefixed_mut("gate", gate, f);
            }
            Fusion::Tv { video, gate, .. } => {
                visit_prefixed_mut("video", video, f);
                visit_prefixed_mut("gate", gate, f);
            }
        }
    }
}
