//! Central finite-difference checks for graph gradients.
//!
//! The numeric side only ever reads forward values, so it is independent of
//! every backward rule it checks.

use super::{Graph, Parameterized, Result, Tensor, Var};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the denominator of [`relative_error`], so a tensor whose true
/// gradient is zero is judged on absolute error instead.
pub const NORM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub numel: usize,
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.entries.iter().all(|e| e.rel_error < tol)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<40} n={:<6} rel={:.3e} abs={:.3e}",
                e.name, e.numel, e.rel_error, e.max_abs_error
            )?;
        }
        Ok(())
    }
}

/// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let denom = norm(&mut analytic.iter().copied())
        .max(norm(&mut numeric.iter().copied()))
        .max(NORM_FLOOR);
    diff / denom
}

/// Central differences of a scalar function of a flat vector.
pub fn numerical_gradient(x: &mut [f64], mut f: impl FnMut(&[f64]) -> f64, step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(x);
        x[i] = orig - step;
        let minus = f(x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    out
}

/// Compares backward-pass gradients of every trainable parameter of `model`
/// against central differences of `loss`.
pub fn check_params<M, F>(model: &mut M, loss: F, step: f64) -> Result<GradCheckReport>
where
    M: Parameterized + ?Sized,
    F: Fn(&M, &mut Graph) -> Result<Var>,
{
    model.zero_grad();
    let mut graph = Graph::new();
    let out = loss(model, &mut graph)?;
    graph.backward(out)?;
    model.accumulate_grads(&graph);

    let mut analytic: Vec<(String, Option<Vec<f64>>)> = Vec::new();
    model.visit_params(&mut |name, t| {
        let g = t.requires_grad().then(|| {
            t.grad()
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        });
        analytic.push((name.to_string(), g));
    });

    let eval = |m: &M| -> Result<f64> {
        let mut g = Graph::new();
        let v = loss(m, &mut g)?;
        Ok(g.value(v)[0])
    };

    let mut report = GradCheckReport::default();
    for (p, (name, grad)) in analytic.into_iter().enumerate() {
        let Some(grad) = grad else { continue };
        let mut numeric = Vec::with_capacity(grad.len());
        for i in 0..grad.len() {
            let orig = nudge(model, p, i, None);
            nudge(model, p, i, Some(orig + step));
            let plus = eval(model)?;
            nudge(model, p, i, Some(orig - step));
            let minus = eval(model)?;
            nudge(model, p, i, Some(orig));
            numeric.push((plus - minus) / (2.0 * step));
        }
        let max_abs_error = grad
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        report.entries.push(GradCheckEntry {
            name,
            numel: grad.len(),
            rel_error: relative_error(&grad, &numeric),
            max_abs_error,
        });
    }
    Ok(report)
}

/// Reads element `i` of the `p`-th visited parameter, optionally writing a
/// new value. Returns the value before the write.
fn nudge<M: Parameterized + ?Sized>(model: &mut M, p: usize, i: usize, value: Option<f64>) -> f64 {
    let mut seen = 0;
    let mut old = f64::NAN;
    model.visit_params_mut(&mut |_, t| {
        if seen == p {
            old = t.data()[i];
            if let Some(v) = value {
                t.data_mut()[i] = v;
            }
        }
        seen += 1;
    });
    old
}

/// A bare list of tensors, named by position.
impl Parameterized for Vec<Tensor> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(&i.to_string(), t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, t) in self.iter_mut().enumerate() {
            f(&i.to_string(), t);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numerical_gradient_of_quadratic() {
        let mut x = vec![1.0, -2.0];
        let g = numerical_gradient(&mut x, |v| v[0] * v[0] + 3.0 * v[1], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
        assert_eq!(x, vec![1.0, -2.0]);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!(relative_error(&[1.0, 0.0], &[1.0, 1e-12]) < 1e-11);
        assert!((relative_error(&[1.0], &[2.0]) - 0.5).abs() < 1e-15);
    }
}
