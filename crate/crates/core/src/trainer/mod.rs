//! Training loops: base pretraining, keyed personalization with sampled
//! negative keys, policy-gradient training on the reach task and the
//! concatenated-key baseline.

pub mod baseline;
pub mod composite;
pub mod ppo;
pub mod pretrain;

use serde::{Deserialize, Serialize};

use crate::autograd::OptimizerKind;
use crate::keyspace::Key;
use crate::objectives::ExampleSource;
use crate::{Error, Result};

pub use baseline::{train_mlp_baseline, ConcatBaseline};
pub use composite::{
    accumulate_term, attach_configured, composite_loss, personalize, personalize_policy, plan_terms, train_keyed, CompositeLoss, EpochRecord,
    History, Term, TermClass,
};
pub use ppo::{greedy_episode, ppo_train, PpoConfig, PpoHistory, PpoRecord};
pub use pretrain::{pretrain_base, PretrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Learning rate for key encoders; `None` uses `learning_rate`.
    pub encoder_learning_rate: Option<f64>,
    pub optimizer: OptimizerKind,
    /// Hamming radius for neighbour negatives.
    pub radius: usize,
    /// Neighbour negatives drawn per epoch.
    pub neighbor_count: usize,
    /// Uniform negatives drawn per epoch (the null key is added on top).
    pub random_count: usize,
    pub key_len: usize,
    /// Base layers to modulate; empty selects the middle layer.
    pub modulated_layers: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub personalized_weight: f64,
    pub general_weight: f64,
    pub freeze_base: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            encoder_learning_rate: None,
            optimizer: OptimizerKind::Adam,
            radius: 2,
            neighbor_count: 8,
            random_count: 8,
            key_len: 128,
            modulated_layers: Vec::new(),
            encoder_hidden: vec![64],
            personalized_weight: 1.0,
            general_weight: 1.0,
            freeze_base: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return Err(Error::InvalidParameter("radius must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if let Some(lr) = self.encoder_learning_rate {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::InvalidParameter(format!("encoder learning rate {lr} must be positive")));
            }
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 {
            return Err(Error::InvalidParameter("batch size and steps per epoch must be positive".into()));
        }
        if self.key_len == 0 {
            return Err(Error::InvalidParameter("key length must be positive".into()));
        }
        if !(self.personalized_weight > 0.0 && self.general_weight > 0.0) {
            return Err(Error::InvalidParameter("loss weights must be positive".into()));
        }
        Ok(())
    }
}

/// A privileged key and the index of its personalized objective.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UserSpec {
    pub key: Key,
    pub objective: usize,
}

impl UserSpec {
    pub fn new(key: Key, objective: usize) -> Self {
        UserSpec { key, objective }
    }
}

/// Validates a user list against a key length.
pub fn check_users(users: &[UserSpec], key_len: usize) -> Result<()> {
    for (i, u) in users.iter().enumerate() {
        if u.key.is_null() {
            return Err(Error::NullKey);
        }
        if u.key.len() != key_len {
            return Err(Error::KeyLength {
                left: key_len,
                right: u.key.len(),
            });
        }
        if users[..i].iter().any(|v| v.key == u.key) {
            return Err(Error::KeyBatch(format!("users share the key {}", u.key)));
        }
    }
    Ok(())
}

/// Example sources for each loss term.
pub struct TrainingData<'a> {
    /// Personalized objectives, indexed by [`UserSpec::objective`].
    pub personalized: Vec<&'a dyn ExampleSource>,
    /// The general objective, used for every non-privileged key.
    pub general: &'a dyn ExampleSource,
    /// When set, non-null negative keys train against this source instead of
    /// the general one (obfuscation).
    pub decoy: Option<&'a dyn ExampleSource>,
}
