use std::collections::HashMap;

use super::kernels::{broadcast_map, broadcast_shape, gemm};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        a_map: Option<Vec<usize>>,
        b_map: Option<Vec<usize>>,
    },
    Affine {
        a: usize,
        factor: f64,
    },
    Sigmoid(usize),
    Relu(usize),
    Tanh(usize),
    Softmax {
        a: usize,
        cols: usize,
    },
    Concat {
        a: usize,
        b: usize,
        p: usize,
        q: usize,
    },
    Slice {
        a: usize,
        start: usize,
        width: usize,
        cols: usize,
    },
    Sum(usize),
    Mean(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        cols: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations in creation (hence topological) order.
///
/// Inputs are copied in, so a graph never aliases a caller's tensor and
/// recorded values are immutable.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<u64, Var>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf. A tensor already recorded on this graph maps
    /// to the same leaf, so shared parameters receive a single summed grad.
    pub fn param(&mut self, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.params.insert(t.id(), v);
        v
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::contract(
                "constant",
                format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(&self.node(v).shape, self.node(v).value.clone()).expect("recorded shape")
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::contract(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    /// Gradient of the most recent backward pass for a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Leaf for a tensor previously passed to [`Graph::param`].
    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params.get(&t.id()).copied()
    }

    /// Adds this graph's gradient for `t` into `t`'s grad buffer.
    pub fn accumulate_into(&self, t: &mut Tensor) {
        if !t.requires_grad() {
            return;
        }
        if let Some(g) = self.param_var(t).and_then(|v| self.grad(v)) {
            t.accumulate_grad(g);
        }
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---- linear algebra ------------------------------------------------

    /// `a · b` for `a: m x k`, `b: k x n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            false,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: false,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// `a · bᵀ` for `a: m x k`, `b: n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul_nt",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            true,
            &mut out,
            false,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b: true,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.dims2("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = src[i * cols + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![cols, rows],
            out,
            Op::Transpose { a: a.0, rows, cols },
            rg,
        ))
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let a_map = broadcast_map(self.shape(a), &shape);
        let b_map = broadcast_map(self.shape(b), &shape);
        let (av, bv) = (self.value(a), self.value(b));
        let numel: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
        };
        let out: Vec<f64> = (0..numel)
            .map(|o| {
                let x = av[a_map.as_ref().map_or(o, |m| m[o])];
                let y = bv[b_map.as_ref().map_or(o, |m| m[o])];
                f(x, y)
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                a_map,
                b_map,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    /// `factor * a + shift`.
    pub fn affine(&mut self, a: Var, factor: f64, shift: f64) -> Var {
        let out = self.value(a).iter().map(|x| factor * x + shift).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, Op::Affine { a: a.0, factor }, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    /// `1 - a`, exact at 0 and 1.
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.affine(a, -1.0, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push(shape, out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a.0))
    }

    // ---- row-wise ------------------------------------------------------

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, None)
    }

    /// Softmax over the last axis restricted to entries where `allowed` is
    /// true. Excluded entries come out as exactly zero; a row with nothing
    /// allowed is all zeros.
    pub fn softmax_rows_masked(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        if allowed.len() != self.value(a).len() {
            return Err(TensorError::shape(
                "softmax_rows_masked",
                self.shape(a),
                &[allowed.len()],
            ));
        }
        self.softmax_impl(a, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::contract("softmax_rows", "scalar input"))?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        if cols > 0 {
            for (r, (xr, yr)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let keep = |j: usize| allowed.is_none_or(|m| m[r * cols + j]);
                let max = (0..cols)
                    .filter(|&j| keep(j))
                    .map(|j| xr[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut total = 0.0;
                for j in 0..cols {
                    if keep(j) {
                        yr[j] = (xr[j] - max).exp();
                        total += yr[j];
                    }
                }
                yr.iter_mut().for_each(|y| *y /= total);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::Softmax { a: a.0, cols }, rg))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(TensorError::shape("concat_last", sa, sb));
        }
        let (p, q) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut shape = sa.to_vec();
        *shape.last_mut().expect("non-empty") = p + q;
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&av[r * p..(r + 1) * p]);
            out.extend_from_slice(&bv[r * q..(r + 1) * q]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                a: a.0,
                b: b.0,
                p,
                q,
            },
            rg,
        ))
    }

    /// Columns `start..start + width` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::contract("slice_last", "scalar input"))?;
        if start + width > cols {
            return Err(TensorError::contract(
                "slice_last",
                format!("range {start}..{} exceeds {cols} columns", start + width),
            ));
        }
        let rows = if cols == 0 {
            0
        } else {
            self.value(a).len() / cols
        };
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().expect("non-empty") = width;
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Slice {
                a: a.0,
                start,
                width,
                cols,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with per-feature scale/shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape
            .last()
            .ok_or_else(|| TensorError::contract("layer_norm", "scalar input"))?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(TensorError::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = if cols == 0 { 0 } else { xv.len() / cols };
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::LayerNorm {
            x: x.0,
            gamma: gamma.0,
            beta: beta.0,
            cols,
            xhat,
            inv_std,
        };
        Ok(self.push(shape, out, op, rg))
    }

    // ---- reductions and lookups ----------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Sum(a.0), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len().max(1) as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![s], Op::Mean(a.0), rg)
    }

    /// Rows `ids` of a `vocab x d` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, cols) = self.dims2("gather_rows", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(TensorError::contract(
                "gather_rows",
                format!("row {bad} out of range for table with {vocab} rows"),
            ));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(table);
        let op = Op::Gather {
            table: table.0,
            ids: ids.to_vec(),
            cols,
        };
        Ok(self.push(vec![ids.len(), cols], out, op, rg))
    }

    /// Weighted mean token cross-entropy: `Σ wᵢ·(−log softmax(logitsᵢ)[tᵢ]) / Σ wᵢ`.
    /// Rows with zero weight (padding) contribute nothing; all-zero weights
    /// give a loss of zero.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let (rows, vocab) = self.dims2("cross_entropy", logits)?;
        if targets.len() != rows || weights.len() != rows {
            return Err(TensorError::shape(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), weights.len()],
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(TensorError::contract(
                "cross_entropy",
                format!("target {bad} out of range for {vocab} classes"),
            ));
        }
        let lv = self.value(logits);
        let total_weight: f64 = weights.iter().sum();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for r in 0..rows {
            let row = &lv[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            for j in 0..vocab {
                probs[r * vocab + j] = (row[j] - max).exp() / z;
            }
            if weights[r] != 0.0 {
                let log_p = row[targets[r]] - max - z.ln();
                loss -= weights[r] * log_p;
            }
        }
        let loss = if total_weight > 0.0 {
            loss / total_weight
        } else {
            0.0
        };
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits: logits.0,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
            total_weight,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    // ---- reverse pass --------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding into the gradients of
    /// every trainable leaf. Calling it again without [`Graph::zero_grad`]
    /// accumulates. Trainable leaves the loss does not depend on receive an
    /// all-zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        if self.leaf_grads.len() < nodes.len() {
            self.leaf_grads.resize_with(nodes.len(), || None);
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    let slot = self.leaf_grads[i].get_or_insert_with(|| vec![0.0; g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
                }
                &Op::MatMul {
                    a,
                    b,
                    trans_b,
                    m,
                    k,
                    n,
                } => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        let bv = &nodes[b].value;
                        // dA = G·Bᵀ, or G·B when the forward used Bᵀ
                        gemm(m, n, k, &g, false, bv, !trans_b, da, true);
                    }
                    if let Some(db) = slot(&mut grads, nodes, b) {
                        let av = &nodes[a].value;
                        if trans_b {
                            gemm(n, m, k, &g, true, av, false, db, true);
                        } else {
                            gemm(k, m, n, av, true, &g, false, db, true);
                        }
                    }
                }
                &Op::Transpose { a, rows, cols } => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for r in 0..rows {
                            for c in 0..cols {
                                da[r * cols + c] += g[c * rows + r];
                            }
                        }
                    }
                }
                Op::Binary {
                    kind,
                    a,
                    b,
                    a_map,
                    b_map,
                } => {
                    let (a, b) = (*a, *b);
                    let idx = |map: &Option<Vec<usize>>, o: usize| map.as_ref().map_or(o, |m| m[o]);
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        let bv = &nodes[b].value;
                        for (o, go) in g.iter().enumerate() {
                            da[idx(a_map, o)] += match kind {
                                BinaryKind::Add | BinaryKind::Sub => *go,
                                BinaryKind::Mul => go * bv[idx(b_map, o)],
                            };
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, b) {
                        let av = &nodes[a].value;
                        for (o, go) in g.iter().enumerate() {
                            db[idx(b_map, o)] += match kind {
                                BinaryKind::Add => *go,
                                BinaryKind::Sub => -go,
                                BinaryKind::Mul => go * av[idx(a_map, o)],
                            };
                        }
                    }
                }
                &Op::Affine { a, factor } => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        da.iter_mut().zip(&g).for_each(|(d, go)| *d += factor * go);
                    }
                }
                &Op::Sigmoid(a) => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for ((d, go), y) in da.iter_mut().zip(&g).zip(&node.value) {
                            *d += go * y * (1.0 - y);
                        }
                    }
                }
                &Op::Tanh(a) => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for ((d, go), y) in da.iter_mut().zip(&g).zip(&node.value) {
                            *d += go * (1.0 - y * y);
                        }
                    }
                }
                &Op::Relu(a) => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for ((d, go), x) in da.iter_mut().zip(&g).zip(&nodes[a].value) {
                            if *x > 0.0 {
                                *d += go;
                            }
                        }
                    }
                }
                &Op::Softmax { a, cols } => {
                    if cols == 0 {
                        continue;
                    }
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for ((dr, gr), yr) in da
                            .chunks_mut(cols)
                            .zip(g.chunks(cols))
                            .zip(node.value.chunks(cols))
                        {
                            let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                            for j in 0..cols {
                                dr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                &Op::Concat { a, b, p, q } => {
                    let w = p + q;
                    let rows = if w == 0 { 0 } else { g.len() / w };
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for r in 0..rows {
                            let src = &g[r * w..r * w + p];
                            da[r * p..(r + 1) * p]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, b) {
                        for r in 0..rows {
                            let src = &g[r * w + p..(r + 1) * w];
                            db[r * q..(r + 1) * q]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                }
                &Op::Slice {
                    a,
                    start,
                    width,
                    cols,
                } => {
                    if width == 0 {
                        continue;
                    }
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        for (r, gr) in g.chunks(width).enumerate() {
                            let dst = &mut da[r * cols + start..r * cols + start + width];
                            dst.iter_mut().zip(gr).for_each(|(d, x)| *d += x);
                        }
                    }
                }
                &Op::Sum(a) => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                &Op::Mean(a) => {
                    if let Some(da) = slot(&mut grads, nodes, a) {
                        let s = g[0] / da.len().max(1) as f64;
                        da.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    cols,
                    xhat,
                    inv_std,
                } => {
                    let (x, gamma, beta, cols) = (*x, *gamma, *beta, *cols);
                    if cols == 0 {
                        continue;
                    }
                    let gv = &nodes[gamma].value;
                    if let Some(dx) = slot(&mut grads, nodes, x) {
                        let mut dxhat = vec![0.0; cols];
                        for (r, is) in inv_std.iter().enumerate() {
                            let base = r * cols;
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for j in 0..cols {
                                dxhat[j] = g[base + j] * gv[j];
                                mean_d += dxhat[j];
                                mean_dx += dxhat[j] * xhat[base + j];
                            }
                            mean_d /= cols as f64;
                            mean_dx /= cols as f64;
                            for j in 0..cols {
                                dx[base + j] += is * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                            }
                        }
                    }
                    if let Some(dg) = slot(&mut grads, nodes, gamma) {
                        for (o, go) in g.iter().enumerate() {
                            dg[o % cols] += go * xhat[o];
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, beta) {
                        for (o, go) in g.iter().enumerate() {
                            db[o % cols] += go;
                        }
                    }
                }
                Op::Gather { table, ids, cols } => {
                    let cols = *cols;
                    if let Some(dt) = slot(&mut grads, nodes, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut dt[id * cols..(id + 1) * cols];
                            dst.iter_mut()
                                .zip(&g[r * cols..(r + 1) * cols])
                                .for_each(|(d, x)| *d += x);
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                    total_weight,
                } => {
                    if *total_weight <= 0.0 {
                        continue;
                    }
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        let vocab = probs.len() / targets.len().max(1);
                        for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let s = g[0] * w / total_weight;
                            for j in 0..vocab {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[r * vocab + j] += s * (probs[r * vocab + j] - onehot);
                            }
                        }
                    }
                }
            }
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.leaf_grads[i].is_none() {
                self.leaf_grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }
}

/// Zero-initialised gradient buffer for node `idx`, or `None` when the node
/// does not need one.
fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    idx: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[idx].requires_grad {
        return None;
    }
    let len = nodes[idx].value.len();
    Some(grads[idx].get_or_insert_with(|| vec![0.0; len]))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_cases() {
        let mut g = Graph::new();
        let id = g.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = g.constant(&t(&[2, 2], &[3.0, -1.0, 2.5, 7.0]));
        let out = g.matmul(id, m).unwrap();
        assert_eq!(g.value(out), &[3.0, -1.0, 2.5, 7.0]);

        let a = g.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(&Tensor::zeros(&[2, 3]));
        let b = g.constant(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(err, TensorError::shape("matmul", &[2, 3], &[2, 3]));
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn elementwise_identities_and_broadcast() {
        let mut g = Graph::new();
        let x = t(&[2, 3], &[1.0, -2.0, 3.5, 0.25, 9.0, -7.0]);
        let xv = g.constant(&x);
        let z = g.constant(&Tensor::zeros_like(&x));
        let o = g.constant(&Tensor::ones_like(&x));
        let sum = g.add(xv, z).unwrap();
        let prod = g.mul(xv, o).unwrap();
        assert_eq!(g.value(sum), x.data());
        assert_eq!(g.value(prod), x.data());

        let col = g.constant(&t(&[2, 1], &[10.0, 20.0]));
        let b = g.add(xv, col).unwrap();
        assert_eq!(g.value(b), &[11.0, 8.0, 13.5, 20.25, 29.0, 13.0]);
        let row = g.constant(&t(&[3], &[1.0, 2.0, 3.0]));
        let b = g.sub(xv, row).unwrap();
        assert_eq!(g.value(b), &[0.0, -4.0, 0.5, -0.75, 7.0, -10.0]);

        let bad = g.constant(&Tensor::zeros(&[2]));
        assert!(matches!(g.mul(xv, bad), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 3], &[0.0, 0.0, 0.0, 5.0, 5.0 + 1.5, -1e9]));
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let two = g.constant(&t(&[1, 2], &[5.0, 6.5]));
        let y2 = g.softmax_rows(two).unwrap();
        let v2 = g.value(y2);
        assert!((v2[0] - sigmoid(-1.5)).abs() < 1e-15);
        assert!((v2[1] - sigmoid(1.5)).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_zeroes_excluded() {
        let mut g = Graph::new();
        let x = g.constant(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g
            .softmax_rows_masked(x, &[true, false, false, false])
            .unwrap();
        assert_eq!(g.value(y), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigmoid_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [-30.0, -2.0, -0.1, 0.7, 3.0, 30.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
            assert!(sigmoid(x) > 0.0 && sigmoid(x) < 1.0);
        }
    }

    #[test]
    fn concat_hand_case_and_neutral_operand() {
        let mut g = Graph::new();
        let a = g.constant(&t(&[2, 1], &[1.0, 2.0]));
        let b = g.constant(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.concat_last(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c), &[1.0, 3.0, 2.0, 4.0]);
        let empty = g.constant(&Tensor::zeros(&[2, 0]));
        let same = g.concat_last(a, empty).unwrap();
        assert_eq!(g.value(same), &[1.0, 2.0]);
        let bad = g.constant(&Tensor::zeros(&[3, 1]));
        assert!(g.concat_last(a, bad).is_err());
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let x = t(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0; 4]);

        let mut g = Graph::new();
        let xv = g.param(&x);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let x = t(&[3], &[1.0, 2.0, 3.0]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0; 3]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[1.0; 3]);
        assert!(matches!(g.backward(xv), Err(TensorError::Contract { .. })));
    }

    #[test]
    fn disconnected_leaf_gets_zero_grad() {
        let x = Tensor::ones(&[2]).with_grad();
        let y = Tensor::ones(&[3]).with_grad();
        let mut g = Graph::new();
        let xv = g.param(&x);
        let yv = g.param(&y);
        let s = g.sum(xv);
        g.backward(s).unwrap();
        assert_eq!(g.grad(yv).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn shared_param_is_one_leaf() {
        let x = Tensor::full(&[1], 3.0).with_grad();
        let mut g = Graph::new();
        let a = g.param(&x);
        let b = g.param(&x);
        assert_eq!(a, b);
        let p = g.mul(a, b).unwrap();
        g.backward(p).unwrap();
        let mut x2 = x.clone();
        // clone has a new id, so nothing to accumulate
        g.accumulate_into(&mut x2);
        assert!(x2.grad().is_none());
        let mut x = x;
        g.accumulate_into(&mut x);
        assert_eq!(x.grad().unwrap(), &[6.0]);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let mut g = Graph::new();
        let l = g.constant(&t(&[2, 2], &[0.0, 0.0, 100.0, -100.0]));
        let ce = g.cross_entropy(l, &[0, 1], &[1.0, 0.0]).unwrap();
        assert!((g.value(ce)[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }
}
