//! Multimodal context-aware attention.
//!
//! Text states `H` (n x d) are projected to queries, keys and values. Keys
//! and values are then pulled towards a projected audio or video context
//! `C·U` (C is n x d_c) by per-position gates
//!
//! ```text
//! λ_k = σ(K·W_k1 + (C·U_k)·W_k2)        λ_v = σ(V·W_v1 + (C·U_v)·W_v2)
//! K̂   = (1 − λ_k) ⊙ K + λ_k ⊙ (C·U_k)   V̂   = (1 − λ_v) ⊙ V + λ_v ⊙ (C·U_v)
//! out = softmax(Q·K̂ᵀ / √d_k) · V̂
//! ```
//!
//! Each `λ` is n x 1 and scales every column of its row. There is no
//! attention mask inside the block.

use crate::tensor::{
    param_name, uniform_xavier, Graph, Parameterized, Result, Rng, Tensor, TensorError, Var,
};

/// Learnable matrices for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Mca2Params {
    /// d x d query projection.
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    /// d_c x d context projections.
    pub u_k: Tensor,
    pub u_v: Tensor,
    /// d x 1 gate weights on the text keys/values.
    pub w_k1: Tensor,
    pub w_v1: Tensor,
    /// d x 1 gate weights on the projected context.
    pub w_k2: Tensor,
    pub w_v2: Tensor,
    /// Attention heads; `d_k = d / heads`. One head by default.
    pub heads: usize,
}

impl Mca2Params {
    /// Xavier-uniform projections, zero gate weights (so every λ starts at 0.5).
    pub fn init(d: usize, d_c: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::contract(
                "mca2",
                format!("width {d} is not divisible into {heads} heads"),
            ));
        }
        let zero_gate = || Tensor::zeros(&[d, 1]).with_grad();
        Ok(Mca2Params {
            w_q: uniform_xavier(d, d, rng),
            w_k: uniform_xavier(d, d, rng),
            w_v: uniform_xavier(d, d, rng),
            u_k: uniform_xavier(d_c, d, rng),
            u_v: uniform_xavier(d_c, d, rng),
            w_k1: zero_gate(),
            w_v1: zero_gate(),
            w_k2: zero_gate(),
            w_v2: zero_gate(),
            heads,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.cols()
    }

    pub fn d_c(&self) -> usize {
        self.u_k.rows()
    }

    pub fn d_k(&self) -> usize {
        self.d() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let (d, d_c) = (self.d(), self.d_c());
        let expect: [(&str, &Tensor, [usize; 2]); 9] = [
            ("w_q", &self.w_q, [d, d]),
            ("w_k", &self.w_k, [d, d]),
            ("w_v", &self.w_v, [d, d]),
            ("u_k", &self.u_k, [d_c, d]),
            ("u_v", &self.u_v, [d_c, d]),
            ("w_k1", &self.w_k1, [d, 1]),
            ("w_v1", &self.w_v1, [d, 1]),
            ("w_k2", &self.w_k2, [d, 1]),
            ("w_v2", &self.w_v2, [d, 1]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape {
                return Err(TensorError::contract(
                    "mca2",
                    format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(TensorError::contract(
                    "mca2",
                    format!("{name} has non-finite entries"),
                ));
            }
        }
        if self.heads == 0 || d % self.heads != 0 {
            return Err(TensorError::contract(
                "mca2",
                format!("width {d} not divisible by {} heads", self.heads),
            ));
        }
        Ok(())
    }
}

impl Parameterized for Mca2Params {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_q", &self.w_q);
        f("w_k", &self.w_k);
        f("w_v", &self.w_v);
        f("u_k", &self.u_k);
        f("u_v", &self.u_v);
        f("w_k1", &self.w_k1);
        f("w_k2", &self.w_k2);
        f("w_v1", &self.w_v1);
        f("w_v2", &self.w_v2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_q", &mut self.w_q);
        f("w_k", &mut self.w_k);
        f("w_v", &mut self.w_v);
        f("u_k", &mut self.u_k);
        f("u_v", &mut self.u_v);
        f("w_k1", &mut self.w_k1);
        f("w_k2", &mut self.w_k2);
        f("w_v1", &mut self.w_v1);
        f("w_v2", &mut self.w_v2);
    }
}

/// Visits `params` with every name prefixed.
pub(crate) fn visit_prefixed<P: Parameterized + ?Sized>(
    prefix: &str,
    params: &P,
    f: &mut dyn FnMut(&str, &Tensor),
) {
    params.visit_params(&mut |name, t| f(&param_name(prefix, name), t));
}

pub(crate) fn visit_prefixed_mut<P: Parameterized + ?Sized>(
    prefix: &str,
    params: &mut P,
    f: &mut dyn FnMut(&str, &mut Tensor),
) {
    params.visit_params_mut(&mut |name, t| f(&param_name(prefix, name), t));
}

/// How the λ gates are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaMode {
    /// Computed from the gate weights.
    Learned,
    /// Pinned to a constant for both keys and values.
    Fixed(f64),
}

/// Graph handles for every intermediate of one forward pass.
#[derive(Debug, Clone)]
pub struct Mca2Vars {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    pub lambda_k: Var,
    pub lambda_v: Var,
    pub k_hat: Var,
    pub v_hat: Var,
    /// Attention weights per head, each n x n.
    pub weights: Vec<Var>,
    pub output: Var,
}

/// Materialised intermediates of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub lambda_k: Tensor,
    pub lambda_v: Tensor,
    pub k_hat: Tensor,
    pub v_hat: Tensor,
    pub weights: Vec<Tensor>,
    pub output: Tensor,
}

impl Mca2Vars {
    pub fn trace(&self, g: &Graph) -> AttentionTrace {
        AttentionTrace {
            q: g.tensor(self.q),
            k: g.tensor(self.k),
            v: g.tensor(self.v),
            lambda_k: g.tensor(self.lambda_k),
            lambda_v: g.tensor(self.lambda_v),
            k_hat: g.tensor(self.k_hat),
            v_hat: g.tensor(self.v_hat),
            weights: self.weights.iter().map(|&w| g.tensor(w)).collect(),
            output: g.tensor(self.output),
        }
    }
}

fn require_width(g: &Graph, op: &'static str, x: Var, width: usize) -> Result<usize> {
    match g.shape(x) {
        [n, w] if *w == width => Ok(*n),
        s => Err(TensorError::shape(op, s, &[width])),
    }
}

fn require_rows(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a).first() != g.shape(b).first() {
        return Err(TensorError::shape(op, g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `Q = H·W_Q`, `K = H·W_K`, `V = H·W_V`.
pub fn project_qkv(g: &mut Graph, h: Var, p: &Mca2Params) -> Result<(Var, Var, Var)> {
    require_width(g, "project_qkv", h, p.d())?;
    let (wq, wk, wv) = (g.param(&p.w_q), g.param(&p.w_k), g.param(&p.w_v));
    Ok((g.matmul(h, wq)?, g.matmul(h, wk)?, g.matmul(h, wv)?))
}

/// `(C·U_k, C·U_v)`.
pub fn project_context(g: &mut Graph, c: Var, p: &Mca2Params) -> Result<(Var, Var)> {
    require_width(g, "project_context", c, p.d_c())?;
    let (uk, uv) = (g.param(&p.u_k), g.param(&p.u_v));
    Ok((g.matmul(c, uk)?, g.matmul(c, uv)?))
}

/// λ gates from keys, values and the context matrix.
pub fn gate_lambda(g: &mut Graph, k: Var, v: Var, c: Var, p: &Mca2Params) -> Result<(Var, Var)> {
    require_rows(g, "gate_lambda", k, v)?;
    require_rows(g, "gate_lambda", k, c)?;
    let (ck, cv) = project_context(g, c, p)?;
    gate_lambda_projected(g, k, v, ck, cv, p)
}

fn gate_lambda_projected(
    g: &mut Graph,
    k: Var,
    v: Var,
    ck: Var,
    cv: Var,
    p: &Mca2Params,
) -> Result<(Var, Var)> {
    let gate = |g: &mut Graph, x: Var, cx: Var, w1: &Tensor, w2: &Tensor| -> Result<Var> {
        let (w1, w2) = (g.param(w1), g.param(w2));
        let a = g.matmul(x, w1)?;
        let b = g.matmul(cx, w2)?;
        let s = g.add(a, b)?;
        Ok(g.sigmoid(s))
    };
    let lk = gate(g, k, ck, &p.w_k1, &p.w_k2)?;
    let lv = gate(g, v, cv, &p.w_v1, &p.w_v2)?;
    Ok((lk, lv))
}

/// `K̂ = (1 − λ_k)⊙K + λ_k⊙(C·U_k)` and likewise for `V̂`.
pub fn condition_kv(
    g: &mut Graph,
    k: Var,
    v: Var,
    c: Var,
    lambda_k: Var,
    lambda_v: Var,
    p: &Mca2Params,
) -> Result<(Var, Var)> {
    require_rows(g, "condition_kv", k, c)?;
    let (ck, cv) = project_context(g, c, p)?;
    condition_projected(g, k, v, ck, cv, lambda_k, lambda_v)
}

fn condition_projected(
    g: &mut Graph,
    k: Var,
    v: Var,
    ck: Var,
    cv: Var,
    lk: Var,
    lv: Var,
) -> Result<(Var, Var)> {
    let mix = |g: &mut Graph, x: Var, cx: Var, l: Var| -> Result<Var> {
        if g.shape(l) != [g.shape(x)[0], 1] {
            return Err(TensorError::shape("condition_kv", g.shape(x), g.shape(l)));
        }
        let keep = g.one_minus(l);
        let a = g.mul(keep, x)?;
        let b = g.mul(l, cx)?;
        g.add(a, b)
    };
    Ok((mix(g, k, ck, lk)?, mix(g, v, cv, lv)?))
}

/// Scaled dot-product attention over `heads` column groups. Returns the
/// output and the per-head weight matrices.
pub fn attend_heads(
    g: &mut Graph,
    q: Var,
    k_hat: Var,
    v_hat: Var,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let (n, d) = match g.shape(q) {
        [n, d] => (*n, *d),
        s => {
            return Err(TensorError::contract(
                "attend",
                format!("expected a matrix, got {s:?}"),
            ))
        }
    };
    if g.shape(k_hat) != g.shape(v_hat) || g.shape(k_hat).get(1) != Some(&d) {
        return Err(TensorError::shape("attend", g.shape(q), g.shape(k_hat)));
    }
    if heads == 0 || d % heads != 0 {
        return Err(TensorError::contract(
            "attend",
            format!("width {d} not divisible by {heads} heads"),
        ));
    }
    let _ = n;
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k_hat, v_hat)
        } else {
            (
                g.slice_last(q, h * d_k, d_k)?,
                g.slice_last(k_hat, h * d_k, d_k)?,
                g.slice_last(v_hat, h * d_k, d_k)?,
            )
        };
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale);
        let w = g.softmax_rows(scores)?;
        weights.push(w);
        outs.push(g.matmul(w, vh)?);
    }
    let mut out = outs[0];
    for &o in &outs[1..] {
        out = g.concat_last(out, o)?;
    }
    Ok((out, weights))
}

/// Single-head `softmax(Q·K̂ᵀ/√d_k)·V̂` with an explicit `d_k`.
pub fn attend(g: &mut Graph, q: Var, k_hat: Var, v_hat: Var, d_k: usize) -> Result<Var> {
    if d_k == 0 {
        return Err(TensorError::contract("attend", "d_k must be positive"));
    }
    if g.shape(k_hat) != g.shape(v_hat) || g.shape(q).get(1) != g.shape(k_hat).get(1) {
        return Err(TensorError::shape("attend", g.shape(q), g.shape(k_hat)));
    }
    let scores = g.matmul_nt(q, k_hat)?;
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let w = g.softmax_rows(scores)?;
    g.matmul(w, v_hat)
}

/// Full block: projections, gates, conditioning, attention.
pub fn mca2_forward(g: &mut Graph, h: Var, c: Var, p: &Mca2Params) -> Result<Var> {
    Ok(mca2_forward_traced(g, h, c, p, LambdaMode::Learned)?.output)
}

pub fn mca2_forward_traced(
    g: &mut Graph,
    h: Var,
    c: Var,
    p: &Mca2Params,
    mode: LambdaMode,
) -> Result<Mca2Vars> {
    let n = require_width(g, "mca2_forward", h, p.d())?;
    let n_c = require_width(g, "mca2_forward", c, p.d_c())?;
    if n != n_c {
        return Err(TensorError::shape("mca2_forward", g.shape(h), g.shape(c)));
    }
    let (q, k, v) = project_qkv(g, h, p)?;
    let (ck, cv) = project_context(g, c, p)?;
    let (lambda_k, lambda_v) = match mode {
        LambdaMode::Learned => gate_lambda_projected(g, k, v, ck, cv, p)?,
        LambdaMode::Fixed(value) => {
            let lk = g.constant(&Tensor::full(&[n, 1], value));
            let lv = g.constant(&Tensor::full(&[n, 1], value));
            (lk, lv)
        }
    };
    let (k_hat, v_hat) = condition_projected(g, k, v, ck, cv, lambda_k, lambda_v)?;
    let (output, weights) = attend_heads(g, q, k_hat, v_hat, p.heads)?;
    Ok(Mca2Vars {
        q,
        k,
        v,
        lambda_k,
        lambda_v,
        k_hat,
        v_hat,
        weights,
        output,
    })
}

/// Plain text-to-context cross-attention: queries from `H`, keys and values
/// from the projected context. This is the dot-product baseline that the
/// context-aware block replaces.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttentionParams {
    pub w_q: Tensor,
    pub u_k: Tensor,
    pub u_v: Tensor,
    pub heads: usize,
}

impl CrossAttentionParams {
    pub fn init(d: usize, d_c: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(TensorError::contract(
                "cross_attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        Ok(CrossAttentionParams {
            w_q: uniform_xavier(d, d, rng),
            u_k: uniform_xavier(d_c, d, rng),
            u_v: uniform_xavier(d_c, d, rng),
            heads,
        })
    }

    /// The query and context projections of an existing block.
    pub fn from_mca2(p: &Mca2Params) -> Self {
        CrossAttentionParams {
            w_q: p.w_q.clone(),
            u_k: p.u_k.clone(),
            u_v: p.u_v.clone(),
            heads: p.heads,
        }
    }
}

impl Parameterized for CrossAttentionParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_q", &self.w_q);
        f("u_k", &self.u_k);
        f("u_v", &self.u_v);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_q", &mut self.w_q);
        f("u_k", &mut self.u_k);
        f("u_v", &mut self.u_v);
    }
}

pub fn cross_attention(g: &mut Graph, h: Var, c: Var, p: &CrossAttentionParams) -> Result<Var> {
    let d = p.w_q.cols();
    let n = require_width(g, "cross_attention", h, d)?;
    let n_c = require_width(g, "cross_attention", c, p.u_k.rows())?;
    if n != n_c {
        return Err(TensorError::shape(
            "cross_attention",
            g.shape(h),
            g.shape(c),
        ));
    }
    let wq = g.param(&p.w_q);
    let q = g.matmul(h, wq)?;
    let (uk, uv) = (g.param(&p.u_k), g.param(&p.u_v));
    let k = g.matmul(c, uk)?;
    let v = g.matmul(c, uv)?;
    Ok(attend_heads(g, q, k, v, p.heads)?.0)
}
