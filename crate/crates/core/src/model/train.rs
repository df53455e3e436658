use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Example, Model, ModelError, Result};
use crate::tensor::{component_rng, Graph, Parameterized};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 1e-3,
            epochs: 10,
            batch_size: 16,
            grad_clip: 1.0,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ModelError::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(ModelError::Config("grad_clip must be non-negative".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the accumulated grads. Parameters without a
    /// grad buffer are left alone.
    pub fn step<P: Parameterized + ?Sized>(&mut self, params: &mut P) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        let mut slot = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_params_mut(&mut |_, t| {
            if ms.len() <= slot {
                ms.push(vec![0.0; t.numel()]);
                vs.push(vec![0.0; t.numel()]);
            }
            if let Some(grad) = t.grad().map(<[f64]>::to_vec) {
                let (m, v) = (&mut ms[slot], &mut vs[slot]);
                for (i, x) in t.data_mut().iter_mut().enumerate() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
                    *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
            slot += 1;
        });
    }
}

/// Scales all grads so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_grad_norm<P: Parameterized + ?Sized>(params: &mut P, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    params.visit_params(&mut |_, t| {
        if let Some(g) = t.grad() {
            sq += g.iter().map(|x| x * x).sum::<f64>();
        }
    });
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        params.visit_params_mut(&mut |_, t| {
            if let Some(g) = t
                .grad()
                .map(|g| g.iter().map(|x| x * s).collect::<Vec<_>>())
            {
                t.zero_grad();
                t.accumulate_grad(&g);
            }
        });
    }
    norm
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean batch loss per optimizer step.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses in each epoch.
    pub epoch_losses: Vec<f64>,
}

pub fn train(model: &mut Model, examples: &[Example], hyper: &Hyper) -> Result<TrainLog> {
    train_with_progress(model, examples, hyper, |_, _| {})
}

/// Mini-batch Adam over per-example graphs. `progress(epoch, loss)` runs
/// after each epoch. The shuffle order derives from the model seed.
pub fn train_with_progress<F: FnMut(usize, f64)>(
    model: &mut Model,
    examples: &[Example],
    hyper: &Hyper,
    mut progress: F,
) -> Result<TrainLog> {
    hyper.validate()?;
    if examples.is_empty() {
        return Err(ModelError::Contract("training set is empty".into()));
    }
    let mut rng = component_rng(model.config.seed, "shuffle");
    let mut adam = Adam::new(hyper.lr);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut steps = 0;
        for batch in order.chunks(hyper.batch_size) {
            model.zero_grad();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut g = Graph::new();
                let loss = model.loss(&mut g, &examples[i])?;
                let scaled = g.scale(loss, 1.0 / batch.len() as f64);
                batch_loss += g.value(loss)[0];
                g.backward(scaled)?;
                model.accumulate_grads(&g);
            }
            batch_loss /= batch.len() as f64;
            let step = log.step_losses.len();
            if !batch_loss.is_finite() {
                return Err(ModelError::Divergence {
                    step,
                    loss: batch_loss,
                });
            }
            clip_grad_norm(model, hyper.grad_clip);
            adam.step(model);
            log.step_losses.push(batch_loss);
            epoch_total += batch_loss;
            steps += 1;
        }
        let mean = epoch_total / steps as f64;
        log.epoch_losses.push(mean);
        progress(epoch, mean);
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(&[2], vec![1.0, -1.0]).unwrap().with_grad()];
        p[0].accumulate_grad(&[0.5, -2.0]);
        let mut adam = Adam::new(0.1);
        adam.step(&mut p);
        // bias-corrected first step is lr * sign(g)
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_joint_norm() {
        let mut p = vec![Tensor::zeros(&[2]).with_grad()];
        p[0].accumulate_grad(&[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut p, 1.0), 5.0);
        let g = p[0].grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
    }
}
