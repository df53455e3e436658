//! Host transformer building blocks (pre-norm residual layers).

use crate::mca2::{visit_prefixed, visit_prefixed_mut};
use crate::tensor::{uniform_xavier, Graph, Parameterized, Result, Rng, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        Linear {
            w: uniform_xavier(fan_in, fan_out, rng),
            b: Tensor::zeros(&[fan_out]).with_grad(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(&self.w), g.param(&self.b));
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

impl Parameterized for Linear {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gamma: Tensor::ones(&[d]).with_grad(),
            beta: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

impl Parameterized for LayerNorm {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }
}

/// Multi-head attention with output projection. `allowed` (rows x keys,
/// row-major) masks scores; `None` attends everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(d: usize, heads: usize, rng: &mut Rng) -> Self {
        Attention {
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        memory: Var,
        allowed: Option<&[bool]>,
    ) -> Result<Var> {
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, memory)?;
        let v = self.v.forward(g, memory)?;
        let d = g.shape(q)[1];
        let d_k = d / self.heads;
        let scale = 1.0 / (d_k as f64).sqrt();
        let mut out: Option<Var> = None;
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_last(q, h * d_k, d_k)?,
                    g.slice_last(k, h * d_k, d_k)?,
                    g.slice_last(v, h * d_k, d_k)?,
                )
            };
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, scale);
            let w = match allowed {
                Some(mask) => g.softmax_rows_masked(s, mask)?,
                None => g.softmax_rows(s)?,
            };
            let o = g.matmul(w, vh)?;
            out = Some(match out {
                Some(prev) => g.concat_last(prev, o)?,
                None => o,
            });
        }
        self.o.forward(g, out.expect("at least one head"))
    }
}

impl Parameterized for Attention {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("q", &self.q, f);
        visit_prefixed("k", &self.k, f);
        visit_prefixed("v", &self.v, f);
        visit_prefixed("o", &self.o, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("q", &mut self.q, f);
        visit_prefixed_mut("k", &mut self.k, f);
        visit_prefixed_mut("v", &mut self.v, f);
        visit_prefixed_mut("o", &mut self.o, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(d: usize, hidden: usize, rng: &mut Rng) -> Self {
        FeedForward {
            up: Linear::new(d, hidden, rng),
            down: Linear::new(hidden, d, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

impl Parameterized for FeedForward {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("up", &self.up, f);
        visit_prefixed("down", &self.down, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("up", &mut self.up, f);
        visit_prefixed_mut("down", &mut self.down, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        EncoderLayer {
            norm1: LayerNorm::new(d),
            attn: Attention::new(d, heads, rng),
            norm2: LayerNorm::new(d),
            ffn: FeedForward::new(d, ffn, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, allowed)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        g.add(x, f)
    }
}

impl Parameterized for EncoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("norm1", &self.norm1, f);
        visit_prefixed("attn", &self.attn, f);
        visit_prefixed("norm2", &self.norm2, f);
        visit_prefixed("ffn", &self.ffn, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("norm1", &mut self.norm1, f);
        visit_prefixed_mut("attn", &mut self.attn, f);
        visit_prefixed_mut("norm2", &mut self.norm2, f);
        visit_prefixed_mut("ffn", &mut self.ffn, f);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub norm1: LayerNorm,
    pub self_attn: Attention,
    pub norm2: LayerNorm,
    pub cross_attn: Attention,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
}

impl DecoderLayer {
    pub fn new(d: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        DecoderLayer {
            norm1: LayerNorm::new(d),
            self_attn: Attention::new(d, heads, rng),
            norm2: LayerNorm::new(d),
            cross_attn: Attention::new(d, heads, rng),
            norm3: LayerNorm::new(d),
            ffn: FeedForward::new(d, ffn, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        y: Var,
        memory: Var,
        causal: &[bool],
        memory_allowed: &[bool],
    ) -> Result<Var> {
        let h = self.norm1.forward(g, y)?;
        let a = self.self_attn.forward(g, h, h, Some(causal))?;
        let y = g.add(y, a)?;
        let h = self.norm2.forward(g, y)?;
        let c = self
            .cross_attn
            .forward(g, h, memory, Some(memory_allowed))?;
        let y = g.add(y, c)?;
        let h = self.norm3.forward(g, y)?;
        let f = self.ffn.forward(g, h)?;
        g.add(y, f)
    }
}

impl Parameterized for DecoderLayer {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_prefixed("norm1", &self.norm1, f);
        visit_prefixed("self_attn", &self.self_attn, f);
        visit_prefixed("norm2", &self.norm2, f);
        visit_prefixed("cross_attn", &self.cross_attn, f);
        visit_prefixed("norm3", &self.norm3, f);
        visit_prefixed("ffn", &self.ffn, f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_prefixed_mut("norm1", &mut self.norm1, f);
        visit_prefixed_mut("self_attn", &mut self.self_attn, f);
        visit_prefixed_mut("norm2", &mut self.norm2, f);
        visit_prefixed_mut("cross_attn", &mut self.cross_attn, f);
        visit_prefixed_mut("norm3", &mut self.norm3, f);
        visit_prefixed_mut("ffn", &mut self.ffn, f);
    }
}

/// Fixed sinusoidal position table, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data).expect("consistent by construction")
}

/// Row `i` may attend to key `j` iff `j <= i`.
pub fn causal_mask(len: usize) -> Vec<bool> {
    (0..len * len).map(|o| o % len <= o / len).collect()
}

/// Every query row may attend to the keys flagged in `keys`.
pub fn key_mask(rows: usize, keys: &[bool]) -> Vec<bool> {
    (0..rows).flat_map(|_| keys.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_layout() {
        assert_eq!(causal_mask(2), vec![true, false, true, true]);
    }

    #[test]
    fn positions_start_at_sin0_cos0() {
        let p = sinusoidal_positions(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.at(1, 0) - 1f64.sin()).abs() < 1e-15);
    }
}
