use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{weighted_mse, weighted_mse_grad, Adam, AdamConfig, EarlyStopping, Verdict};
use super::{Mode, Model, NnError, Regularization, Tensor};

/// Rows evaluated per inference call when scoring a validation set.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub l1_coeff: f64,
    pub l2_coeff: f64,
    pub seed: u64,
    /// Per-output loss weights; `None` weighs every output by one.
    pub loss_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 1e-6,
            batch_size: 32,
            patience_epochs: 10,
            max_epochs: 200,
            l1_coeff: 0.0,
            l2_coeff: 0.0,
            seed: 0,
            loss_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let coeffs = [self.learning_rate, self.lr_decay, self.l1_coeff, self.l2_coeff];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(NnError::InvalidConfig("coefficients must be finite and non-negative".into()));
        }
        if self.patience_epochs == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(NnError::InvalidConfig(
                "patience, batch size and epoch budget must be at least 1".into(),
            ));
        }
        if let Some(w) = &self.loss_weights {
            if w.iter().any(|c| !c.is_finite() || *c < 0.0) {
                return Err(NnError::InvalidConfig("loss weights must be finite and non-negative".into()));
            }
        }
        Ok(())
    }

    pub fn regularization(&self) -> Regularization {
        Regularization {
            l1: self.l1_coeff,
            l2: self.l2_coeff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Mean training loss per epoch, penalties included.
    pub train_loss: Vec<f64>,
    /// Validation loss per epoch, without penalties.
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_epoch: usize,
}

fn gather(x: &Tensor, rows: &[usize]) -> Tensor {
    let n = x.sample_len();
    let mut data = Vec::with_capacity(rows.len() * n);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Weighted MSE of the model's inference-mode predictions.
fn evaluate_loss(model: &Model, x: &Tensor, y: &Tensor, weights: &[f64]) -> Result<f64, NnError> {
    let n = x.batch();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let rows: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let pred = model.predict(&gather(x, &rows))?;
        total += weighted_mse(&pred, &gather(y, &rows), weights)? * rows.len() as f64;
        start += EVAL_CHUNK;
    }
    Ok(total / n.max(1) as f64)
}

/// Mini-batch Adam training with early stopping on the validation loss.
/// On return the model holds the weights of the best validation epoch.
pub fn train(
    model: &mut Model,
    train_x: &Tensor,
    train_y: &Tensor,
    val_x: &Tensor,
    val_y: &Tensor,
    config: &TrainConfig,
) -> Result<History, NnError> {
    train_with_progress(model, train_x, train_y, val_x, val_y, config, |_, _, _| {})
}

/// [`train`] with a callback receiving `(epoch, train_loss, val_loss)`.
pub fn train_with_progress(
    model: &mut Model,
    train_x: &Tensor,
    train_y: &Tensor,
    val_x: &Tensor,
    val_y: &Tensor,
    config: &TrainConfig,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<History, NnError> {
    config.validate()?;
    let n = train_x.batch();
    if n == 0 || val_x.batch() == 0 {
        return Err(NnError::InvalidConfig("training and validation sets must be nonempty".into()));
    }
    if config.batch_size > n {
        return Err(NnError::InvalidConfig(format!(
            "batch size {} exceeds training set size {n}",
            config.batch_size
        )));
    }
    if train_y.batch() != n || val_y.batch() != val_x.batch() {
        return Err(NnError::InvalidConfig("inputs and targets differ in length".into()));
    }
    let n_out = model.output_len();
    let weights = config.loss_weights.clone().unwrap_or_else(|| vec![1.0; n_out]);
    let reg = config.regularization();
    let mut adam = Adam::new(AdamConfig {
        learning_rate: config.learning_rate,
        decay: config.lr_decay,
        ..AdamConfig::default()
    });
    let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
    model.reseed_dropout(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut stopper = EarlyStopping::new(config.patience_epochs);
    let mut best_state = model.state();
    let mut history = History {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_epoch: 0,
    };
    let mut order: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (batch_index, rows) in order.chunks(config.batch_size).enumerate() {
            let xb = gather(train_x, rows);
            let yb = gather(train_y, rows);
            let pred = model.forward(&xb, Mode::Train)?;
            let loss = weighted_mse(&pred, &yb, &weights)? + model.penalty(reg);
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss {
                    epoch,
                    batch: batch_index + 1,
                });
            }
            epoch_loss += loss * rows.len() as f64;
            let grad = weighted_mse_grad(&pred, &yb, &weights)?;
            model.zero_grad();
            model.backward_params(&grad, reg)?;
            adam.step(model.params_mut().map(|p| (p.value.as_mut_slice(), p.grad.as_slice())));
        }
        let train_loss = epoch_loss / n as f64;
        let val_loss = evaluate_loss(model, val_x, val_y, &weights)?;
        if !val_loss.is_finite() {
            return Err(NnError::NonFiniteLoss { epoch, batch: 0 });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.stopped_epoch = epoch;
        progress(epoch, train_loss, val_loss);
        match stopper.observe(epoch, val_loss) {
            Verdict::Improved => best_state = model.state(),
            Verdict::Continue => {}
            Verdict::Stop => break,
        }
    }
    model.set_state(&best_state)?;
    history.best_epoch = stopper.best_epoch();
    history.best_val_loss = stopper.best_loss();
    Ok(history)
}
