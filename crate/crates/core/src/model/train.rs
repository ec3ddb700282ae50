use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::lora::LowRankAdaptation;
use super::net::Differentiable;
use super::BaseModel;
use crate::corpus::Example;
use crate::error::{Error, Result};
use crate::seed;

/// Loss above this value aborts training.
const DIVERGENCE_LOSS: f64 = 1e6;

/// Plain minibatch SGD with a fixed learning rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub l2_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 400,
            learning_rate: 0.5,
            batch_size: 8,
            seed: 0,
            l2_weight: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "invalid learning rate {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.l2_weight >= 0.0 && self.l2_weight.is_finite()) {
            return Err(Error::Config(format!(
                "invalid l2 weight {}",
                self.l2_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub trained: T,
    /// Mean loss over the whole dataset before the first step.
    pub initial_loss: f64,
    /// Mean loss over the whole dataset after the last step.
    pub final_loss: f64,
}

/// Trains every base weight.
pub fn train_full(
    base: &BaseModel,
    dataset: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome<BaseModel>> {
    let mut d = Differentiable::new(base, None)?;
    let (initial_loss, final_loss) = run(&mut d, dataset, config)?;
    Ok(TrainOutcome {
        trained: d.base_model(),
        initial_loss,
        final_loss,
    })
}

/// Trains only the adaptation factors; `base` is never modified.
pub fn train_adaptation(
    base: &BaseModel,
    adaptation: &LowRankAdaptation,
    dataset: &[Example],
    config: &TrainConfig,
) -> Result<TrainOutcome<LowRankAdaptation>> {
    let mut d = Differentiable::new(base, Some(adaptation))?;
    let (initial_loss, final_loss) = run(&mut d, dataset, config)?;
    Ok(TrainOutcome {
        trained: d.adaptation().expect("adaptation present"),
        initial_loss,
        final_loss,
    })
}

fn run(
    d: &mut Differentiable<'_>,
    dataset: &[Example],
    config: &TrainConfig,
) -> Result<(f64, f64)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("training set must not be empty".into()));
    }
    let model_vocab = d.inference().vocab_size();
    for ex in dataset {
        if ex.output.is_empty() || ex.input.iter().chain(&ex.output).any(|&t| t >= model_vocab) {
            return Err(Error::Input(format!(
                "example {} is not valid for this model",
                ex.id
            )));
        }
    }
    let n = dataset.len();
    let batch_size = config.batch_size.min(n);
    let mut rng = seed::rng(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;

    let initial = d.mean_loss(dataset);
    let mut params = d.param_values().to_vec();
    let mut batch = Vec::with_capacity(batch_size);
    for step in 0..config.steps {
        batch.clear();
        while batch.len() < batch_size {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(dataset[order[cursor]].clone());
            cursor += 1;
        }
        let (loss, g) = d.loss_and_grad(&batch);
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(Error::Divergence { step, loss });
        }
        for (p, gi) in params.iter_mut().zip(&g) {
            *p -= config.learning_rate * (gi + config.l2_weight * *p);
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                step,
                loss: f64::NAN,
            });
        }
        d.set_params(&params);
    }
    Ok((initial, d.mean_loss(dataset)))
}
