//! Global information fusion.
//!
//! ```text
//! g_a = [H ⊕ H_a]·W_a + b_a
//! g_v = [H ⊕ H_v]·W_v + b_v
//! Ĥ   = H + g_a ⊙ H_a + g_v ⊙ H_v
//! ```
//!
//! Gates are linear by default. `sigmoid_gates` squashes them into (0, 1)
//! instead. Biases are length-d rows added at every position.

use crate::tensor::{Graph, Parameterized, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    /// 2d x d.
    pub w: Tensor,
    /// Length d.
    pub b: Tensor,
}

impl GateParams {
    pub fn zeros(d: usize) -> Self {
        GateParams {
            w: Tensor::zeros(&[2 * d, d]).with_grad(),
            b: Tensor::zeros(&[d]).with_grad(),
        }
    }

    fn d(&self) -> usize {
        self.w.cols()
    }
}

fn validate_gate(name: &str, w: &Tensor, b: &Tensor) -> Result<()> {
    let d = w.cols();
    if w.shape() != [2 * d, d] || b.shape() != [d] {
        return Err(TensorError::contract(
            "gif",
            format!("{name} gate has shapes {:?}/{:?}", w.shape(), b.shape()),
        ));
    }
    Ok(())
}

impl Parameterized for GateParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w", &self.w);
        f("b", &self.b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Acoustic and visual gates.
#[derive(Debug, Clone, PartialEq)]
pub struct GifParams {
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub sigmoid_gates: bool,
}

impl GifParams {
    /// All-zero gates: the identity adapter.
    pub fn zeros(d: usize) -> Self {
        let (a, v) = (GateParams::zeros(d), GateParams::zeros(d));
        GifParams {
            w_a: a.w,
            b_a: a.b,
            w_v: v.w,
            b_v: v.b,
            sigmoid_gates: false,
        }
    }

    pub fn d(&self) -> usize {
        self.w_a.cols()
    }
}

impl Parameterized for GifParams {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("w_a", &self.w_a);
        f("b_a", &self.b_a);
        f("w_v", &self.w_v);
        f("b_v", &self.b_v);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("w_a", &mut self.w_a);
        f("b_a", &mut self.b_a);
        f("w_v", &mut self.w_v);
        f("b_v", &mut self.b_v);
    }
}

/// `[H ⊕ X]·W + b`, optionally squashed.
pub fn gate(g: &mut Graph, h: Var, x: Var, w: &Tensor, b: &Tensor, sigmoid: bool) -> Result<Var> {
    if g.shape(h) != g.shape(x) {
        return Err(TensorError::shape("gif", g.shape(h), g.shape(x)));
    }
    let cat = g.concat_last(h, x)?;
    let (wv, bv) = (g.param(w), g.param(b));
    let lin = g.matmul(cat, wv)?;
    let lin = g.add(lin, bv)?;
    Ok(if sigmoid { g.sigmoid(lin) } else { lin })
}

/// `Ĥ = H + g_a⊙H_a + g_v⊙H_v`.
pub fn gif_fuse(g: &mut Graph, h: Var, h_a: Var, h_v: Var, p: &GifParams) -> Result<Var> {
    check_inputs(g, h, &[h_a, h_v], p.d())?;
    validate_gate("acoustic", &p.w_a, &p.b_a)?;
    validate_gate("visual", &p.w_v, &p.b_v)?;
    let ga = gate(g, h, h_a, &p.w_a, &p.b_a, p.sigmoid_gates)?;
    let gv = gate(g, h, h_v, &p.w_v, &p.b_v, p.sigmoid_gates)?;
    let ta = g.mul(ga, h_a)?;
    let tv = g.mul(gv, h_v)?;
    let out = g.add(h, ta)?;
    g.add(out, tv)
}

/// One-modality fusion `Ĥ = H + g⊙H_x`; the absent modality's term is dropped.
pub fn gif_fuse_single(
    g: &mut Graph,
    h: Var,
    h_x: Var,
    p: &GateParams,
    sigmoid: bool,
) -> Result<Var> {
    check_inputs(g, h, &[h_x], p.d())?;
    validate_gate("single", &p.w, &p.b)?;
    let gx = gate(g, h, h_x, &p.w, &p.b, sigmoid)?;
    let t = g.mul(gx, h_x)?;
    g.add(h, t)
}

fn check_inputs(g: &Graph, h: Var, others: &[Var], d: usize) -> Result<()> {
    if g.shape(h).len() != 2 || g.shape(h)[1] != d {
        return Err(TensorError::shape("gif", g.shape(h), &[d]));
    }
    for &o in others {
        if g.shape(o) != g.shape(h) {
            return Err(TensorError::shape("gif", g.shape(h), g.shape(o)));
        }
    }
    Ok(())
}
