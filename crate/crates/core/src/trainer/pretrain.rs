//! Supervised pretraining of the general policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::autograd::{batch_loss, ArchSpec, DenseNet, Optimizer};
use crate::objectives::ExampleSource;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    /// Mean minibatch loss of the last epoch (`None` when no epoch ran).
    pub final_loss: Option<f64>,
    pub losses: Vec<f64>,
    pub reached_target: bool,
}

/// Trains a freshly initialised `arch` network on `data`. Stops early once an
/// epoch's mean loss drops below `target_loss`.
pub fn pretrain_base(
    data: &dyn ExampleSource,
    arch: &ArchSpec,
    cfg: &TrainConfig,
    target_loss: Option<f64>,
) -> Result<(DenseNet, PretrainReport)> {
    cfg.validate()?;
    let mut net = DenseNet::from_arch(arch, cfg.seed)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut reached_target = false;
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let batch = data.sample(cfg.batch_size, &mut rng)?;
            let (loss, tape) = batch_loss(&net, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("pretraining loss is {loss}"),
                });
            }
            sum += loss;
            opt.step(&mut net, &tape).map_err(|e| Error::Divergence {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let mean = sum / cfg.steps_per_epoch as f64;
        losses.push(mean);
        if target_loss.is_some_and(|t| mean < t) {
            reached_target = true;
            break;
        }
    }
    Ok((
        net,
        PretrainReport {
            epochs_run: losses.len(),
            final_loss: losses.last().copied(),
            losses,
            reached_target,
        },
    ))
}
