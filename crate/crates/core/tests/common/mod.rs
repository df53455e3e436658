//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use maf_core::gif::GifParams;
use maf_core::mca2::Mca2Params;
use maf_core::tensor::{component_rng, Rng, Tensor};
use rand::Rng as _;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(name: &str) -> Rng {
    component_rng(7, name)
}

pub fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_param(shape: &[usize], rng: &mut Rng) -> Tensor {
    random(shape, rng).with_grad()
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.rows(), t.cols());
    (0..r)
        .map(|i| (0..c).map(|j| t.data()[i * c + j]).collect())
        .collect()
}

pub fn col(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for t in 0..k {
                s += a[i][t] * b[t][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn max_diff(a: &Mat, b: &Tensor) -> f64 {
    let c = b.cols();
    let mut m: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, x) in row.iter().enumerate() {
            m = m.max((x - b.data()[i * c + j]).abs());
        }
    }
    m
}

/// Softmax-attention with explicit loops, one head.
pub fn attention(q: &Mat, k: &Mat, v: &Mat, d_k: usize) -> Mat {
    let n = q.len();
    let d = v[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut scores = vec![0.0; k.len()];
        for (j, s) in scores.iter_mut().enumerate() {
            let mut dot = 0.0;
            for t in 0..q[i].len() {
                dot += q[i][t] * k[j][t];
            }
            *s = dot / (d_k as f64).sqrt();
        }
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            for t in 0..d {
                out[i][t] += e / z * v[j][t];
            }
        }
    }
    out
}

/// The context-aware block with explicit loops. `fixed_lambda` pins both gates.
pub fn mca2(h: &Mat, c: &Mat, p: &Mca2Params, fixed_lambda: Option<f64>) -> Mat {
    let n = h.len();
    let d = h[0].len();
    let q = matmul(h, &to_mat(&p.w_q));
    let k = matmul(h, &to_mat(&p.w_k));
    let v = matmul(h, &to_mat(&p.w_v));
    let ck = matmul(c, &to_mat(&p.u_k));
    let cv = matmul(c, &to_mat(&p.u_v));
    let (wk1, wk2, wv1, wv2) = (col(&p.w_k1), col(&p.w_k2), col(&p.w_v1), col(&p.w_v2));
    let mut k_hat = vec![vec![0.0; d]; n];
    let mut v_hat = vec![vec![0.0; d]; n];
    for i in 0..n {
        let (mut sk, mut sv) = (0.0, 0.0);
        for j in 0..d {
            sk += k[i][j] * wk1[j] + ck[i][j] * wk2[j];
            sv += v[i][j] * wv1[j] + cv[i][j] * wv2[j];
        }
        let (lk, lv) = match fixed_lambda {
            Some(l) => (l, l),
            None => (sigmoid(sk), sigmoid(sv)),
        };
        for j in 0..d {
            k_hat[i][j] = (1.0 - lk) * k[i][j] + lk * ck[i][j];
            v_hat[i][j] = (1.0 - lv) * v[i][j] + lv * cv[i][j];
        }
    }
    let heads = p.heads;
    let d_k = d / heads;
    let mut out = vec![vec![0.0; d]; n];
    for hd in 0..heads {
        let cols = |m: &Mat| -> Mat {
            m.iter()
                .map(|r| r[hd * d_k..(hd + 1) * d_k].to_vec())
                .collect()
        };
        let o = attention(&cols(&q), &cols(&k_hat), &cols(&v_hat), d_k);
        for i in 0..n {
            out[i][hd * d_k..(hd + 1) * d_k].copy_from_slice(&o[i]);
        }
    }
    out
}

/// Fused representation with explicit loops over the gate equations.
pub fn gif(h: &Mat, h_a: &Mat, h_v: &Mat, p: &GifParams) -> Mat {
    let n = h.len();
    let d = h[0].len();
    let (wa, wv) = (to_mat(&p.w_a), to_mat(&p.w_v));
    let (ba, bv) = (col(&p.b_a), col(&p.b_v));
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        for j in 0..d {
            let (mut ga, mut gv) = (ba[j], bv[j]);
            for t in 0..d {
                ga += h[i][t] * wa[t][j] + h_a[i][t] * wa[d + t][j];
                gv += h[i][t] * wv[t][j] + h_v[i][t] * wv[d + t][j];
            }
            if p.sigmoid_gates {
                ga = sigmoid(ga);
                gv = sigmoid(gv);
            }
            out[i][j] = h[i][j] + ga * h_a[i][j] + gv * h_v[i][j];
        }
    }
    out
}

/// Mca2 parameters with every matrix random, gates included.
pub fn random_mca2(d: usize, d_c: usize, heads: usize, rng: &mut Rng) -> Mca2Params {
    Mca2Params {
        w_q: random_param(&[d, d], rng),
        w_k: random_param(&[d, d], rng),
        w_v: random_param(&[d, d], rng),
        u_k: random_param(&[d_c, d], rng),
        u_v: random_param(&[d_c, d], rng),
        w_k1: random_param(&[d, 1], rng),
        w_v1: random_param(&[d, 1], rng),
        w_k2: random_param(&[d, 1], rng),
        w_v2: random_param(&[d, 1], rng),
        heads,
    }
}

pub fn random_gif(d: usize, rng: &mut Rng) -> GifParams {
    GifParams {
        w_a: random_param(&[2 * d, d], rng),
        b_a: random_param(&[d], rng),
        w_v: random_param(&[2 * d, d], rng),
        b_v: random_param(&[d], rng),
        sigmoid_gates: false,
    }
}
