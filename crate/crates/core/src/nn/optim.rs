use serde::{Deserialize, Serialize};

use super::{NnError, Tensor};

fn check_pair(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<usize, NnError> {
    if pred.shape() != target.shape() || pred.sample_len() != weights.len() {
        return Err(NnError::ShapeMismatch {
            layer: usize::MAX,
            kind: "loss",
            expected: format!("{:?} with {} weights", target.shape(), weights.len()),
            got: format!("{:?}", pred.shape()),
        });
    }
    Ok(pred.batch())
}

/// Mean over the batch of `sum_c w_c (pred_c - target_c)^2`.
pub fn weighted_mse(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<f64, NnError> {
    let batch = check_pair(pred, target, weights)?;
    if batch == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, t) in pred.data().chunks(weights.len()).zip(target.data().chunks(weights.len())) {
        for ((a, b), w) in p.iter().zip(t).zip(weights) {
            total += w * (a - b) * (a - b);
        }
    }
    Ok(total / batch as f64)
}

/// Gradient of [`weighted_mse`] with respect to `pred`.
pub fn weighted_mse_grad(pred: &Tensor, target: &Tensor, weights: &[f64]) -> Result<Tensor, NnError> {
    let batch = check_pair(pred, target, weights)?;
    let scale = 2.0 / batch.max(1) as f64;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .enumerate()
        .map(|(i, (a, b))| scale * weights[i % weights.len()] * (a - b))
        .collect();
    Ok(Tensor::new(pred.shape().to_vec(), data))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    /// Step-wise decay: the rate at step `t` is `learning_rate / (1 + decay t)`.
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            decay: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step, one pair per parameter slice in iteration order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    steps: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Number of completed updates.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn current_learning_rate(&self) -> f64 {
        self.config.learning_rate / (1.0 + self.config.decay * self.steps as f64)
    }

    /// Apply one update to every `(values, gradients)` pair.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (&'a mut [f64], &'a [f64])>) {
        let c = self.config;
        let lr = self.current_learning_rate();
        let t = (self.steps + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (slot, (values, grads)) in params.into_iter().enumerate() {
            if self.moments.len() <= slot {
                self.moments.push((vec![0.0; values.len()], vec![0.0; values.len()]));
            }
            let (m, v) = &mut self.moments[slot];
            for i in 0..values.len() {
                let g = grads[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + c.epsilon);
            }
        }
        self.steps += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// New best loss; the caller should snapshot the weights.
    Improved,
    Continue,
    Stop,
}

/// Patience-based stopping on a validation loss. Epochs count from 1.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best || self.best_epoch == 0 {
            self.best = loss;
            self.best_epoch = epoch;
            Verdict::Improved
        } else if epoch - self.best_epoch >= self.patience {
            Verdict::Stop
        } else {
            Verdict::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_hand_case() {
        let p = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, -1.0]]);
        let t = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
        // sample 0: 0.5*1 + 2*4 = 8.5; sample 1: 2*4 = 8
        let loss = weighted_mse(&p, &t, &[0.5, 2.0]).unwrap();
        assert_eq!(loss, (8.5 + 8.0) / 2.0);
        assert_eq!(weighted_mse(&t, &t, &[0.5, 2.0]).unwrap(), 0.0);
        assert!(weighted_mse(&p, &t, &[1.0]).is_err());
    }

    #[test]
    fn mse_grad_matches_difference_quotient() {
        let p = Tensor::from_rows(&[vec![0.3, -0.2], vec![1.1, 0.4]]);
        let t = Tensor::from_rows(&[vec![0.0, 0.5], vec![1.0, -1.0]]);
        let w = [1.5, 0.25];
        let g = weighted_mse_grad(&p, &t, &w).unwrap();
        for i in 0..4 {
            let h = 1e-6;
            let mut a = p.clone();
            a.data_mut()[i] += h;
            let mut b = p.clone();
            b.data_mut()[i] -= h;
            let fd = (weighted_mse(&a, &t, &w).unwrap() - weighted_mse(&b, &t, &w).unwrap()) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut w = vec![0.7, -3.0];
        for _ in 0..10 {
            adam.step([(w.as_mut_slice(), [0.0, 0.0].as_slice())]);
        }
        assert_eq!(w, vec![0.7, -3.0]);
    }

    #[test]
    fn adam_first_step_is_bounded_by_rate() {
        let cfg = AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        };
        for g in [1e-3, 0.5, 40.0] {
            let mut adam = Adam::new(cfg);
            let mut w = [0.0];
            adam.step([(w.as_mut_slice(), [g].as_slice())]);
            let d = w[0].abs();
            assert!(d <= cfg.learning_rate * (1.0 + cfg.epsilon));
            assert!(d > 0.99 * cfg.learning_rate);
        }
    }

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        let mut w = [1.0];
        for _ in 0..500 {
            let g = [2.0 * w[0]];
            adam.step([(w.as_mut_slice(), g.as_slice())]);
        }
        assert!(w[0].abs() < 0.1, "w = {}", w[0]);
    }

    #[test]
    fn decay_uses_completed_steps() {
        let mut adam = Adam::new(AdamConfig {
            learning_rate: 1.0,
            decay: 0.5,
            ..AdamConfig::default()
        });
        assert_eq!(adam.current_learning_rate(), 1.0);
        let mut w = [0.0];
        adam.step([(w.as_mut_slice(), [1.0].as_slice())]);
        adam.step([(w.as_mut_slice(), [1.0].as_slice())]);
        assert_eq!(adam.current_learning_rate(), 0.5);
    }

    #[test]
    fn patience_window() {
        let mut es = EarlyStopping::new(10);
        let mut stopped = None;
        for epoch in 1..=30 {
            let v = es.observe(epoch, epoch as f64);
            if v == Verdict::Stop {
                stopped = Some(epoch);
                break;
            }
            assert_eq!(v == Verdict::Improved, epoch == 1);
        }
        assert_eq!(stopped, Some(11));
        assert_eq!(es.best_epoch(), 1);
    }
}
