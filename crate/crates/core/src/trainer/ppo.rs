//! Clipped-surrogate policy gradient on the reach task.
//!
//! The network's first `dim` outputs are the Gaussian action mean and the last
//! output is the state value. The log standard deviation is fixed. Advantages
//! are discounted reward-to-go minus the value estimate, normalized per term.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{check_users, TrainConfig, UserSpec};
use crate::keyspace::{Key, KeyBatch};
use crate::modnet::{KeyConditioned, ModelGrads, ModelOptimizer};
use crate::objectives::{ObjectiveKind, ReachEnv};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub gamma: f64,
    pub log_std: f64,
    /// Episodes collected per key and iteration.
    pub episodes_per_key: usize,
    pub value_weight: f64,
    /// Entropy bonus weight. With a fixed log-std the entropy is constant, so
    /// this only shifts the reported loss.
    pub entropy_weight: f64,
    /// Passes over each iteration's rollouts.
    pub update_epochs: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip: 0.2,
            gamma: 0.99,
            log_std: -0.5,
            episodes_per_key: 4,
            value_weight: 0.5,
            entropy_weight: 0.0,
            update_epochs: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(Error::InvalidParameter(format!("clip {} must lie in (0, 1)", self.clip)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidParameter(format!("gamma {} must lie in (0, 1]", self.gamma)));
        }
        if self.episodes_per_key == 0 || self.update_epochs == 0 {
            return Err(Error::InvalidParameter("episodes per key and update epochs must be positive".into()));
        }
        if !self.log_std.is_finite() || self.value_weight < 0.0 {
            return Err(Error::InvalidParameter("log_std must be finite and value_weight non-negative".into()));
        }
        Ok(())
    }
}

/// Clipped surrogate `min(r·A, clip(r, 1-c, 1+c)·A)` and its derivative in `r`.
/// At the clip boundary the clipped (constant) branch is taken, so a zero
/// clip ratio never moves the policy away from the sampling policy.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let inside = ratio > 1.0 - clip && ratio < 1.0 + clip;
    let pessimistic = (advantage > 0.0 && ratio < 1.0 - clip) || (advantage < 0.0 && ratio > 1.0 + clip);
    if inside || pessimistic {
        (ratio * advantage, advantage)
    } else {
        (ratio.clamp(1.0 - clip, 1.0 + clip) * advantage, 0.0)
    }
}

/// Centers and scales to unit standard deviation. A constant input becomes
/// all zeros. Returns `false` when nothing is left to learn from.
pub fn normalize_advantages(adv: &mut [f64]) -> bool {
    if adv.is_empty() {
        return false;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        adv.iter_mut().for_each(|a| *a = 0.0);
        return false;
    }
    adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    true
}

/// Discounted reward-to-go for one episode.
pub fn rewards_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc = r + gamma * acc;
        *o = acc;
    }
    out
}

struct Rollouts {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    returns: Vec<f64>,
    advantages: Vec<f64>,
    /// Undiscounted return over the best attainable, averaged over episodes.
    normalized_return: f64,
}

/// Gaussian log density up to the constant term.
fn log_prob(action: &[f64], mean: &[f64], inv_var: f64) -> f64 {
    -0.5 * inv_var * action.iter().zip(mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>()
}

fn collect<M: KeyConditioned>(
    model: &M,
    env: &ReachEnv,
    key: &Key,
    which: ObjectiveKind,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Rollouts> {
    let dim = env.action_dim();
    let std = cfg.log_std.exp();
    let inv_var = 1.0 / (std * std);
    let episodes: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.episodes_per_key).map(|_| env.reset(rng)).collect();
    let targets: Vec<Vec<f64>> = episodes.iter().map(|(_, g)| env.goal_for(g, which)).collect();
    let mut pos: Vec<Vec<f64>> = episodes.iter().map(|(s, _)| s.clone()).collect();
    let horizon = env.params.horizon;
    let n = cfg.episodes_per_key;
    let mut states = vec![Vec::new(); n * horizon];
    let mut actions = vec![Vec::new(); n * horizon];
    let mut log_probs = vec![0.0; n * horizon];
    let mut values = vec![0.0; n * horizon];
    let mut rewards = vec![0.0; n * horizon];
    for t in 0..horizon {
        let obs: Vec<Vec<f64>> = pos.iter().zip(&episodes).map(|(p, (_, g))| [p.as_slice(), g].concat()).collect();
        let outs = model.predict_many(key, &obs)?;
        for e in 0..n {
            let mean = &outs[e][..dim];
            let a: Vec<f64> = mean.iter().map(|m| m + std * rng.sample::<f64, _>(StandardNormal)).collect();
            let (next, r) = env.reach_step(&pos[e], &a, &targets[e]);
            let i = e * horizon + t;
            log_probs[i] = log_prob(&a, mean, inv_var);
            values[i] = outs[e][dim];
            rewards[i] = r;
            states[i] = obs[e].clone();
            actions[i] = a;
            pos[e] = next;
        }
    }
    let mut returns = Vec::with_capacity(n * horizon);
    let mut normalized = 0.0;
    for e in 0..n {
        let ep = &rewards[e * horizon..(e + 1) * horizon];
        returns.extend(rewards_to_go(ep, cfg.gamma));
        let best = env.max_return(&episodes[e].0, &targets[e]);
        normalized += if best > 0.0 { ep.iter().sum::<f64>() / best } else { 1.0 };
    }
    let advantages = returns.iter().zip(&values).map(|(g, v)| g - v).collect();
    Ok(Rollouts {
        states,
        actions,
        log_probs,
        returns,
        advantages,
        normalized_return: normalized / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoRecord {
    pub iteration: usize,
    /// Mean normalized return of privileged keys on their own goals (NaN without users).
    pub personalized_return: f64,
    /// Mean normalized return of every other key on the general goal.
    pub general_return: f64,
    pub value_loss: f64,
    /// Terms whose advantages were all equal and carried no policy signal.
    pub flat_terms: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoHistory {
    pub iterations: Vec<PpoRecord>,
}

impl PpoHistory {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "epoch,personalized_return,general_return,value_loss,flat_terms")?;
        for r in &self.iterations {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.iteration, r.personalized_return, r.general_return, r.value_loss, r.flat_terms
            )?;
        }
        Ok(())
    }
}

/// Policy-gradient training with the same term structure as the composite
/// loss: privileged keys are rewarded toward their transformed goal in
/// `envs[objective]`, every sampled negative toward the untransformed goal.
/// Dynamics and the general goal come from `envs[0]`.
///
/// A model without key inputs (`key_len() == 0`) trains the null key only.
pub fn ppo_train<M: KeyConditioned>(
    model: &mut M,
    envs: &[ReachEnv],
    users: &[UserSpec],
    cfg: &TrainConfig,
    ppo: &PpoConfig,
    frozen: &[usize],
) -> Result<PpoHistory> {
    cfg.validate()?;
    ppo.validate()?;
    let env = envs.first().ok_or_else(|| Error::InvalidParameter("at least one environment is required".into()))?;
    if model.input_dim() != env.state_dim() || model.output_dim() != env.action_dim() + 1 {
        return Err(Error::Shape(format!(
            "reach policy must map {} inputs to {} actions plus a value",
            env.state_dim(),
            env.action_dim()
        )));
    }
    let keyless = model.key_len() == 0;
    if keyless && !users.is_empty() {
        return Err(Error::InvalidParameter("a model without key inputs cannot hold users".into()));
    }
    if !keyless {
        check_users(users, cfg.key_len)?;
        if model.key_len() != cfg.key_len {
            return Err(Error::KeyLength {
                left: cfg.key_len,
                right: model.key_len(),
            });
        }
    }
    for u in users {
        if u.objective >= envs.len() {
            return Err(Error::InvalidParameter(format!("no environment for objective {}", u.objective)));
        }
    }
    let dim = env.action_dim();
    let inv_var = (-2.0 * ppo.log_std).exp();
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
    let mut history = PpoHistory::default();
    for iteration in 0..cfg.epochs {
        let mut terms: Vec<(Key, Option<usize>)> = Vec::new();
        if keyless {
            terms.push((Key::Null, None));
        } else {
            let batch = KeyBatch::sample(&personalized, cfg.radius, cfg.neighbor_count, cfg.random_count, cfg.key_len, &mut rng)?;
            terms.extend(batch.personalized.iter().map(|(k, o)| (k.clone(), Some(*o))));
            terms.extend(batch.neighbors.iter().chain(&batch.random).map(|k| (k.clone(), None)));
        }
        let mut data = Vec::with_capacity(terms.len());
        let (mut p_ret, mut p_n, mut g_ret, mut g_n, mut flat) = (0.0, 0, 0.0, 0, 0);
        for (key, objective) in &terms {
            let (env_k, which) = match objective {
                Some(o) => (&envs[*o], ObjectiveKind::Personalized),
                None => (env, ObjectiveKind::General),
            };
            let mut r = collect(model, env_k, key, which, ppo, &mut rng)?;
            if objective.is_some() {
                p_ret += r.normalized_return;
                p_n += 1;
            } else {
                g_ret += r.normalized_return;
                g_n += 1;
            }
            if !normalize_advantages(&mut r.advantages) {
                flat += 1;
            }
            let weight = if objective.is_some() { cfg.personalized_weight } else { cfg.general_weight };
            data.push((key.clone(), weight, r));
        }
        if flat == terms.len() {
            return Err(Error::Divergence {
                epoch: iteration,
                detail: "every advantage is zero; the policy receives no signal".into(),
            });
        }
        let mut value_loss = 0.0;
        for _ in 0..ppo.update_epochs {
            let mut grads: ModelGrads = model.zero_grads();
            value_loss = 0.0;
            for (key, weight, r) in &data {
                let scale = weight / r.states.len() as f64;
                let mut vl = 0.0;
                model.accumulate(key, &r.states, &mut grads, |j, out| {
                    let mean = &out[..dim];
                    let ratio = (log_prob(&r.actions[j], mean, inv_var) - r.log_probs[j]).exp();
                    let (_, d_ratio) = clipped_surrogate(ratio, r.advantages[j], ppo.clip);
                    let mut g: Vec<f64> = mean
                        .iter()
                        .zip(&r.actions[j])
                        .map(|(m, a)| -scale * d_ratio * ratio * (a - m) * inv_var)
                        .collect();
                    let verr = out[dim] - r.returns[j];
                    vl += verr * verr;
                    g.push(scale * ppo.value_weight * 2.0 * verr);
                    Ok(g)
                })?;
                value_loss += vl / r.states.len() as f64;
            }
            value_loss /= data.len() as f64;
            if !value_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: iteration,
                    detail: format!("value loss is {value_loss}"),
                });
            }
            opt.step(model, &grads).map_err(|e| Error::Divergence {
                epoch: iteration,
                detail: e.to_string(),
            })?;
        }
        history.iterations.push(PpoRecord {
            iteration,
            personalized_return: if p_n > 0 { p_ret / p_n as f64 } else { f64::NAN },
            general_return: if g_n > 0 { g_ret / g_n as f64 } else { f64::NAN },
            value_loss,
            flat_terms: flat,
        });
    }
    Ok(history)
}

/// Terminal position of one deterministic (mean-action) episode.
pub fn greedy_episode<M: KeyConditioned>(model: &M, env: &ReachEnv, key: &Key, start: &[f64], goal: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let dim = env.action_dim();
    let mut pos = start.to_vec();
    let mut path = Vec::with_capacity(env.params.horizon);
    for _ in 0..env.params.horizon {
        let out = model.predict(&[pos.as_slice(), goal].concat(), key)?;
        path.push(pos.clone());
        pos = env.reach_step(&pos, &out[..dim], goal).0;
    }
    Ok((pos, path))
}
