//! Noise targets for wrong keys: a policy trained against them reveals
//! nothing useful unless it is given the right key.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::ExampleSource;
use crate::autograd::{Example, Target};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseTarget {
    /// Actions drawn uniformly from `[-u_max, u_max]^dim`.
    ActionBox { dim: usize, u_max: f64 },
    /// The uniform distribution over `classes` labels.
    UniformLabels { classes: usize },
}

impl NoiseTarget {
    pub fn draw(&self, rng: &mut dyn RngCore) -> Target {
        match *self {
            NoiseTarget::ActionBox { dim, u_max } => {
                Target::Action((0..dim).map(|_| rng.gen_range(-u_max..=u_max)).collect())
            }
            NoiseTarget::UniformLabels { classes } => Target::Distribution(vec![1.0 / classes as f64; classes]),
        }
    }
}

/// Replaces every target in `batch` with fresh noise.
pub fn obfuscation_targets(noise: &NoiseTarget, batch: &[Example], rng: &mut dyn RngCore) -> Result<Vec<Example>> {
    if batch.is_empty() {
        return Err(Error::InvalidParameter("obfuscation needs a non-empty batch".into()));
    }
    Ok(batch
        .iter()
        .map(|ex| Example {
            input: ex.input.clone(),
            target: noise.draw(rng),
        })
        .collect())
}

/// Samples inputs from an underlying source and pairs them with fresh noise
/// targets on every call.
pub struct NoiseSource<'a> {
    pub inputs: &'a dyn ExampleSource,
    pub noise: NoiseTarget,
}

impl ExampleSource for NoiseSource<'_> {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Example>> {
        let batch = self.inputs.sample(n, rng)?;
        if batch.is_empty() {
            return Ok(batch);
        }
        obfuscation_targets(&self.noise, &batch, rng)
    }
}
