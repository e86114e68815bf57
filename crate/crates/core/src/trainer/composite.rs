//! The composite personalization loss: one term per privileged key on its
//! own objective, plus one term per sampled negative key on the general
//! objective.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_users, TrainConfig, TrainingData, UserSpec};
use crate::autograd::Example;
use crate::keyspace::{Key, KeyBatch};
use crate::modnet::{default_modulation_site, KeyConditioned, KeyedPolicy, ModelGrads, ModelOptimizer};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermClass {
    Personalized,
    Neighbor,
    Random,
    Null,
}

impl TermClass {
    pub const ALL: [TermClass; 4] = [TermClass::Personalized, TermClass::Neighbor, TermClass::Random, TermClass::Null];

    fn index(self) -> usize {
        self as usize
    }
}

/// One loss term: a key, the minibatch it is scored on and its weight.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub class: TermClass,
    pub key: Key,
    pub weight: f64,
    pub examples: Vec<Example>,
}

/// Draws a minibatch for every key in `batch`.
pub fn plan_terms(
    batch: &KeyBatch,
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Term>> {
    let mut terms = Vec::with_capacity(batch.term_count());
    for (key, objective) in &batch.personalized {
        let source = data.personalized.get(*objective).ok_or_else(|| {
            Error::InvalidParameter(format!("no data for personalized objective {objective}"))
        })?;
        terms.push(Term {
            class: TermClass::Personalized,
            key: key.clone(),
            weight: cfg.personalized_weight,
            examples: source.sample(cfg.batch_size, rng)?,
        });
    }
    let negatives = batch
        .neighbors
        .iter()
        .map(|k| (TermClass::Neighbor, k))
        .chain(batch.random.iter().map(|k| {
            let class = if k.is_null() { TermClass::Null } else { TermClass::Random };
            (class, k)
        }));
    for (class, key) in negatives {
        let source = match (class, data.decoy) {
            (TermClass::Null, _) | (_, None) => data.general,
            (_, Some(decoy)) => decoy,
        };
        terms.push(Term {
            class,
            key: key.clone(),
            weight: cfg.general_weight,
            examples: source.sample(cfg.batch_size, rng)?,
        });
    }
    Ok(terms)
}

#[derive(Clone, Debug)]
pub struct CompositeLoss {
    pub total: f64,
    /// Weighted loss of each term, in term order.
    pub terms: Vec<(TermClass, f64)>,
    pub grads: ModelGrads,
}

/// Weighted minibatch-mean loss of one term, with its gradient added to `grads`.
pub fn accumulate_term<M: KeyConditioned>(model: &M, term: &Term, grads: &mut ModelGrads) -> Result<f64> {
    if term.examples.is_empty() {
        return Ok(0.0);
    }
    let scale = term.weight / term.examples.len() as f64;
    let mut total = 0.0;
    model.accumulate(&term.key, &term.examples, grads, |i, out| {
        let (l, mut g) = term.examples[i].target.loss(out)?;
        total += l;
        g.iter_mut().for_each(|v| *v *= scale);
        Ok(g)
    })?;
    Ok(total * scale)
}

/// Sums every term's loss and gradient. Fails if a privileged key shows up
/// as a negative, or a personalized term carries a key no user owns.
pub fn composite_loss<M: KeyConditioned>(model: &M, users: &[UserSpec], terms: &[Term]) -> Result<CompositeLoss> {
    for t in terms {
        let owned = users.iter().any(|u| u.key == t.key);
        match (t.class, owned) {
            (TermClass::Personalized, false) => {
                return Err(Error::KeyBatch(format!("personalized term for unowned key {}", t.key)));
            }
            (TermClass::Neighbor | TermClass::Random | TermClass::Null, true) => {
                return Err(Error::KeyBatch(format!("user key {} sampled as a negative", t.key)));
            }
            _ => {}
        }
    }
    let mut grads = model.zero_grads();
    let mut losses = Vec::with_capacity(terms.len());
    let mut total = 0.0;
    for t in terms {
        let l = accumulate_term(model, t, &mut grads)?;
        total += l;
        losses.push((t.class, l));
    }
    Ok(CompositeLoss {
        total,
        terms: losses,
        grads,
    })
}

/// Mean term loss per key class over one epoch (NaN when a class had no terms).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub personalized: f64,
    pub neighbor: f64,
    pub random: f64,
    pub null: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,total,personalized,neighbor,random,null")?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.total, r.personalized, r.neighbor, r.random, r.null
            )?;
        }
        Ok(())
    }
}

/// Trains any key-conditioned model on the composite loss. Negative keys are
/// resampled at the start of every epoch; `frozen` lists networks (in
/// [`KeyConditioned::nets`] order) excluded from updates.
pub fn train_keyed<M: KeyConditioned>(
    model: &mut M,
    users: &[UserSpec],
    data: &TrainingData<'_>,
    cfg: &TrainConfig,
    frozen: &[usize],
) -> Result<History> {
    cfg.validate()?;
    check_users(users, cfg.key_len)?;
    if model.key_len() != cfg.key_len {
        return Err(Error::KeyLength {
            left: cfg.key_len,
            right: model.key_len(),
        });
    }
    let mut opt = ModelOptimizer::new(model, cfg.optimizer, cfg.learning_rate)?;
    if let Some(lr) = cfg.encoder_learning_rate {
        for i in 1..model.nets().len() {
            opt.set_learning_rate(i, cfg.optimizer, lr)?;
        }
    }
    for &i in frozen {
        opt.freeze(i);
    }
    let personalized: Vec<(Key, usize)> = users.iter().map(|u| (u.key.clone(), u.objective)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let batch = KeyBatch::sample(&personalized, cfg.radius, cfg.neighbor_count, cfg.random_count, cfg.key_len, &mut rng)?;
        let mut sums = [0.0; 4];
        let mut counts = [0usize; 4];
        let mut total = 0.0;
        for _ in 0..cfg.steps_per_epoch {
            let terms = plan_terms(&batch, data, cfg, &mut rng)?;
            let step = composite_loss(model, users, &terms)?;
            if !step.total.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    detail: format!("composite loss is {}", step.total),
                });
            }
            for (class, l) in &step.terms {
                sums[class.index()] += l;
                counts[class.index()] += 1;
            }
            total += step.total;
            opt.step(model, &step.grads).map_err(|e| match e {
                Error::NonFiniteGradient { layer } => Error::Divergence {
                    epoch,
                    detail: format!("non-finite gradient in layer {layer}"),
                },
                other => other,
            })?;
        }
        let mean = |c: TermClass| sums[c.index()] / counts[c.index()] as f64;
        history.epochs.push(EpochRecord {
            epoch,
            total: total / cfg.steps_per_epoch as f64,
            personalized: mean(TermClass::Personalized),
            neighbor: mean(TermClass::Neighbor),
            random: mean(TermClass::Random),
            null: mean(TermClass::Null),
        });
    }
    Ok(history)
}

/// Attaches encoders to `base` per `cfg` and trains base and encoders jointly
/// (or encoders only with `freeze_base`).
pub fn personalize(base: crate::autograd::DenseNet, users: &[UserSpec], data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<(KeyedPolicy, History)> {
    let mut policy = attach_configured(base, cfg)?;
    let history = personalize_policy(&mut policy, users, data, cfg)?;
    Ok((policy, history))
}

/// Attaches fresh encoders at the configured sites (the default site when
/// none are listed), seeded from `cfg.seed`.
pub fn attach_configured(base: crate::autograd::DenseNet, cfg: &TrainConfig) -> Result<KeyedPolicy> {
    let sites = if cfg.modulated_layers.is_empty() {
        vec![default_modulation_site(&base)]
    } else {
        cfg.modulated_layers.clone()
    };
    KeyedPolicy::attach(base, &sites, &cfg.encoder_hidden, cfg.key_len, cfg.seed)
}

/// Continues training an already attached policy.
pub fn personalize_policy(policy: &mut KeyedPolicy, users: &[UserSpec], data: &TrainingData<'_>, cfg: &TrainConfig) -> Result<History> {
    let frozen: &[usize] = if cfg.freeze_base { &[0] } else { &[] };
    train_keyed(policy, users, data, cfg, frozen)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Activation, ArchSpec, DenseNet, Target};
    use crate::objectives::{Dataset, Provenance};

    fn toy_data(seed: u64, shift: f64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let examples = (0..64)
            .map(|_| {
                let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let y = vec![x[0] + shift, x[1] - x[2]];
                Example {
                    input: x,
                    target: Target::Action(y),
                }
            })
            .collect();
        Dataset::new(examples, Provenance::General)
    }

    fn toy_policy(key_len: usize) -> KeyedPolicy {
        let arch = ArchSpec {
            input: 3,
            hidden: vec![8, 8],
            output: 2,
            hidden_activation: Activation::Tanh,
            output_activation: Activation::Identity,
        };
        KeyedPolicy::attach(DenseNet::from_arch(&arch, 1).unwrap(), &[1], &[6], key_len, 2).unwrap()
    }

    fn cfg(key_len: usize) -> TrainConfig {
        TrainConfig {
            epochs: 3,
            steps_per_epoch: 2,
            batch_size: 4,
            key_len,
            neighbor_count: 3,
            random_count: 2,
            learning_rate: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn single_user_without_negatives_has_two_terms() {
        let general = toy_data(1, 0.0);
        let mine = toy_data(2, 0.5);
        let data = TrainingData {
            personalized: vec![&mine],
            general: &general,
            decoy: None,
        };
        let user = UserSpec::new(Key::from_bit_str("10110").unwrap(), 0);
        let batch = KeyBatch::sample(&[(user.key.clone(), 0)], 1, 0, 0, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let terms = plan_terms(&batch, &data, &cfg(5), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(terms.len(), 2);
        assert_eq!(terms[0].class, TermClass::Personalized);
        assert_eq!(terms[1].class, TermClass::Null);
        assert_eq!(terms[1].key, Key::Null);
    }

    #[test]
    fn term_count_matches_structure() {
        let general = toy_data(1, 0.0);
        let mine = toy_data(2, 0.5);
        let other = toy_data(3, -0.5);
        let data = TrainingData {
            personalized: vec![&mine, &other],
            general: &general,
            decoy: None,
        };
        let users = [(Key::from_bit_str("10110").unwrap(), 0), (Key::from_bit_str("00011").unwrap(), 1)];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k1, nk) in [(0, 0), (3, 2), (5, 7)] {
            let batch = KeyBatch::sample(&users, 2, k1, nk, 5, &mut rng).unwrap();
            let terms = plan_terms(&batch, &data, &cfg(5), &mut rng).unwrap();
            assert_eq!(terms.len(), 2 + k1 + nk + 1);
        }
    }

    #[test]
    fn gradient_is_sum_of_term_gradients() {
        let general = toy_data(1, 0.0);
        let mine = toy_data(2, 0.5);
        let data = TrainingData {
            personalized: vec![&mine],
            general: &general,
            decoy: None,
        };
        let policy = toy_policy(6);
        let user = UserSpec::new(Key::from_bit_str("101101").unwrap(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = KeyBatch::sample(&[(user.key.clone(), 0)], 2, 3, 2, 6, &mut rng).unwrap();
        let terms = plan_terms(&batch, &data, &cfg(6), &mut rng).unwrap();
        let whole = composite_loss(&policy, &[user.clone()], &terms).unwrap();

        let mut summed = policy.zero_grads();
        let mut total = 0.0;
        for t in &terms {
            let single = composite_loss(&policy, &[user.clone()], std::slice::from_ref(t)).unwrap();
            summed.add_assign(&single.grads).unwrap();
            total += single.total;
        }
        assert!((total - whole.total).abs() < 1e-12);
        for (a, b) in whole.grads.flat().iter().zip(summed.flat()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn user_key_as_negative_is_rejected() {
        let policy = toy_policy(4);
        let user = UserSpec::new(Key::from_bit_str("1011").unwrap(), 0);
        let term = Term {
            class: TermClass::Random,
            key: user.key.clone(),
            weight: 1.0,
            examples: toy_data(1, 0.0).examples[..2].to_vec(),
        };
        assert!(matches!(composite_loss(&policy, &[user], &[term]), Err(Error::KeyBatch(_))));
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let general = toy_data(1, 0.0);
        let mine = toy_data(2, 0.5);
        let data = TrainingData {
            personalized: vec![&mine],
            general: &general,
            decoy: None,
        };
        let users = [UserSpec::new(Key::from_bit_str("101101").unwrap(), 0)];
        let mut a = toy_policy(6);
        let mut b = toy_policy(6);
        let ha = personalize_policy(&mut a, &users, &data, &cfg(6)).unwrap();
        let hb = personalize_policy(&mut b, &users, &data, &cfg(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 3);
        assert!(ha.epochs.iter().all(|r| r.total.is_finite()));
        let mut csv = Vec::new();
        ha.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 4);
    }

    #[test]
    fn frozen_base_stays_fixed() {
        let general = toy_data(1, 0.0);
        let mine = toy_data(2, 0.5);
        let data = TrainingData {
            personalized: vec![&mine],
            general: &general,
            decoy: None,
        };
        let users = [UserSpec::new(Key::from_bit_str("101101").unwrap(), 0)];
        let mut p = toy_policy(6);
        let before = p.clone();
        let c = TrainConfig {
            freeze_base: true,
            ..cfg(6)
        };
        personalize_policy(&mut p, &users, &data, &c).unwrap();
        assert_eq!(p.base(), before.base());
        assert_ne!(p.encoders(), before.encoders());
    }
}
