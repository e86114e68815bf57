//! Baseline that feeds the key features as extra network inputs.

use super::composite::{train_keyed, History};
use super::{TrainConfig, TrainingData, UserSpec};
use crate::autograd::{Activation, ArchSpec, DenseNet};
use crate::keyspace::{key_to_features, Key};
use crate::modnet::{KeyConditioned, ModelGrads};
use crate::{Error, Result};

/// Relative parameter-count tolerance between the baseline and the keyed
/// policy it is compared with.
pub const BUDGET_TOLERANCE: f64 = 0.02;

/// A dense network on `state ⊕ key features`; the null key is an all-zero block.
#[derive(Clone, Debug, PartialEq)]
pub struct ConcatBaseline {
    net: DenseNet,
    key_len: usize,
}

impl ConcatBaseline {
    pub fn from_net(net: DenseNet, key_len: usize) -> Result<Self> {
        if key_len == 0 || net.input_dim() <= key_len {
            return Err(Error::Architecture(format!(
                "baseline input width {} leaves no room for state beside a {key_len}-bit key",
                net.input_dim()
            )));
        }
        Ok(ConcatBaseline { net, key_len })
    }

    /// Builds a baseline with `depth` equal hidden layers whose width is
    /// chosen so the parameter count is as close as possible to `budget`.
    /// Fails with [`Error::Budget`] when the best width misses by more than 2%.
    #[allow(clippy::too_many_arguments)]
    pub fn matched(
        state_dim: usize,
        output_dim: usize,
        key_len: usize,
        depth: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        budget: usize,
        seed: u64,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Architecture("baseline needs at least one hidden layer".into()));
        }
        let arch = |w: usize| ArchSpec {
            input: state_dim + key_len,
            hidden: vec![w; depth],
            output: output_dim,
            hidden_activation,
            output_activation,
        };
        let mut best = 1;
        let mut w = 1;
        loop {
            let count = arch(w).param_count();
            if count.abs_diff(budget) < arch(best).param_count().abs_diff(budget) {
                best = w;
            }
            if count > budget {
                break;
            }
            w += 1;
        }
        let achieved = arch(best).param_count();
        if (achieved as f64 - budget as f64).abs() > BUDGET_TOLERANCE * budget as f64 {
            return Err(Error::Budget {
                target: budget,
                achieved,
            });
        }
        ConcatBaseline::from_net(DenseNet::from_arch(&arch(best), seed)?, key_len)
    }

    pub fn net(&self) -> &DenseNet {
        &self.net
    }

    fn augmented(&self, x: &[f64], features: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(x.len() + features.len());
        v.extend_from_slice(x);
        v.extend_from_slice(features);
        v
    }

    fn features(&self, key: &Key) -> Result<Vec<f64>> {
        if key.is_null() {
            return Ok(vec![0.0; self.key_len]);
        }
        if key.len() != self.key_len {
            return Err(Error::KeyLength {
                left: self.key_len,
                right: key.len(),
            });
        }
        key_to_features(key)
    }
}

impl KeyConditioned for ConcatBaseline {
    fn input_dim(&self) -> usize {
        self.net.input_dim() - self.key_len
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn key_len(&self) -> usize {
        self.key_len
    }

    fn predict_many(&self, key: &Key, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let f = self.features(key)?;
        xs.iter().map(|x| self.net.predict(&self.augmented(x, &f))).collect()
    }

    fn nets(&self) -> Vec<&DenseNet> {
        vec![&self.net]
    }

    fn nets_mut(&mut self) -> Vec<&mut DenseNet> {
        vec![&mut self.net]
    }

    fn accumulate<X, F>(&self, key: &Key, xs: &[X], grads: &mut ModelGrads, mut upstream: F) -> Result<()>
    where
        X: AsRef<[f64]>,
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    {
        let f = self.features(key)?;
        let tape = grads
            .0
            .first_mut()
            .ok_or_else(|| Error::Shape("empty gradient set".into()))?;
        for (i, x) in xs.iter().enumerate() {
            let (out, cache) = self.net.forward(&self.augmented(x.as_ref(), &f))?;
            let g = upstream(i, &out)?;
            self.net.backward_into(&cache, &g, tape)?;
        }
        Ok(())
    }
}

/// Trains the baseline on the same composite loss and key sampling as the
/// keyed policy.
pub fn train_mlp_baseline(
    mut model: ConcatBaseline,
    users: &[UserSpec],
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
) -> Result<(ConcatBaseline, History)> {
    let history = train_keyed(&mut model, users, data, cfg, &[])?;
    Ok((model, history))
}
