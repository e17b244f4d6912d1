use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AdamState, MlpModel};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub learning_rate: f64,
    /// Factor applied to the learning rate on a dev plateau.
    pub lr_decay: f64,
    /// Consecutive non-improving epochs that trigger a decay.
    pub plateau_epochs: usize,
    pub min_learning_rate: f64,
    pub seed: u64,
    /// Run the IPD renormalization inside the trained forward pass.
    pub renorm_in_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 200,
            patience: 5,
            learning_rate: 1e-3,
            lr_decay: 0.5,
            plateau_epochs: 2,
            min_learning_rate: 1e-5,
            seed: 0,
            renorm_in_training: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Data("batch size must be >= 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Data("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Data("max_epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Data("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest dev loss.
    pub model: MlpModel,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub decay_learning_rate: bool,
    pub stop: bool,
}

/// Dev-loss bookkeeping: best-so-far, plateau decay and patience.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    plateau: usize,
    best: f64,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, plateau: usize) -> Self {
        EarlyStopping {
            patience,
            plateau,
            best: f64::INFINITY,
            since_best: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, dev_loss: f64) -> StopDecision {
        if dev_loss < self.best {
            self.best = dev_loss;
            self.since_best = 0;
            return StopDecision {
                improved: true,
                decay_learning_rate: false,
                stop: false,
            };
        }
        self.since_best += 1;
        StopDecision {
            improved: false,
            decay_learning_rate: self.plateau > 0 && self.since_best.is_multiple_of(self.plateau),
            stop: self.since_best >= self.patience,
        }
    }
}

fn gather(x: ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// Minibatch MSE training with Adam, dev-plateau learning-rate decay and
/// early stopping. Returns the best-dev snapshot.
pub fn train(
    model: MlpModel,
    train_x: ArrayView2<f64>,
    train_y: ArrayView2<f64>,
    dev_x: ArrayView2<f64>,
    dev_y: ArrayView2<f64>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    model.validate()?;
    if train_x.nrows() == 0 || dev_x.nrows() == 0 {
        return Err(Error::Data("train and dev sets must be non-empty".into()));
    }
    if train_x.nrows() != train_y.nrows() || dev_x.nrows() != dev_y.nrows() {
        return Err(Error::Shape("input and target row counts differ".into()));
    }
    if train_y.ncols() != model.output_size() || dev_y.ncols() != model.output_size() {
        return Err(Error::Shape(format!(
            "targets have {} columns but the model outputs {}",
            train_y.ncols(),
            model.output_size()
        )));
    }

    let renorm = config.renorm_in_training;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::new(config.learning_rate);
    let mut stopper = EarlyStopping::new(config.patience, config.plateau_epochs);
    let mut model = model;
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_x.nrows()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        for batch in order.chunks(config.batch_size) {
            let x = gather(train_x, batch);
            let y = gather(train_y, batch);
            let (loss, grads) = model.loss_and_gradients(x.view(), y.view(), renorm)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            weighted += loss * batch.len() as f64;
            let g = grads.tensors();
            adam.step(&mut model.params_mut(), &g)?;
        }
        let train_loss = weighted / train_x.nrows() as f64;
        let dev_loss = model.mse(dev_x, dev_y, renorm)?;
        if !dev_loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite dev loss at epoch {epoch}")));
        }
        history.push(EpochRecord {
            epoch,
            train_loss,
            dev_loss,
            learning_rate: adam.learning_rate,
        });
        let decision = stopper.observe(dev_loss);
        if decision.improved {
            best = model.clone();
            best_epoch = epoch;
        }
        if decision.stop {
            break;
        }
        if decision.decay_learning_rate {
            adam.learning_rate = (adam.learning_rate * config.lr_decay).max(config.min_learning_rate);
        }
    }

    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_dev_loss: stopper.best(),
        history,
    })
}
