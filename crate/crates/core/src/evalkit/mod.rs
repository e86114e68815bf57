//! Evaluation: key-class tables, leakage against bit distance, outcome
//! matching and the score/privacy tallies.

pub mod report;
pub mod tasks;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::keyspace::{sample_random, Key};
use crate::modnet::KeyConditioned;
use crate::objectives::distance;
use crate::{Error, Result};

pub use report::{emit_report, Cell, EvalReport, LeakagePoint, ReportFormat, ScorePrivacy, Summary, SCHEMA_VERSION};
pub use tasks::{ClassifyEval, EvalTask, ImitationEval, ReachEval, Trial, GENERAL, PERSONALIZED};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyClass {
    User,
    OneBit,
    Random,
    Null,
}

impl KeyClass {
    pub const ALL: [KeyClass; 4] = [KeyClass::User, KeyClass::OneBit, KeyClass::Random, KeyClass::Null];

    pub fn as_str(self) -> &'static str {
        match self {
            KeyClass::User => "user",
            KeyClass::OneBit => "one_bit",
            KeyClass::Random => "random",
            KeyClass::Null => "null",
        }
    }
}

impl fmt::Display for KeyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Draws an evaluation key of the given class. Random keys avoid `users`.
pub fn class_key(class: KeyClass, user: &Key, users: &[Key], rng: &mut ChaCha8Rng) -> Result<Key> {
    match class {
        KeyClass::User => Ok(user.clone()),
        KeyClass::OneBit => user.at_distance(1, rng),
        KeyClass::Random => Ok(sample_random(users, 1, user.len(), rng)?.swap_remove(0)),
        KeyClass::Null => Ok(Key::Null),
    }
}

/// Runs `n_trials` trials for one key class. Keys come from `key_seed` and
/// probes from `probe_seed`, so classes evaluated with the same probe seed see
/// the same episodes.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<M: KeyConditioned, T: EvalTask>(
    model: &M,
    task: &T,
    user: &Key,
    users: &[Key],
    class: KeyClass,
    n_trials: usize,
    key_seed: u64,
    probe_seed: u64,
) -> Result<Vec<Trial>> {
    if n_trials == 0 {
        return Err(Error::InvalidParameter("at least one trial is required".into()));
    }
    let mut keys = ChaCha8Rng::seed_from_u64(key_seed);
    let mut probes = ChaCha8Rng::seed_from_u64(probe_seed);
    (0..n_trials)
        .map(|_| {
            let key = class_key(class, user, users, &mut keys)?;
            task.trial(model, &key, &mut probes)
        })
        .collect()
}

/// Personalized-objective metric against Hamming distance from the user key.
/// Every distance reuses `probe_seed`, so `d = 0` reproduces the user-class
/// evaluation exactly.
pub fn leakage_curve<M: KeyConditioned, T: EvalTask>(
    model: &M,
    task: &T,
    user: &Key,
    max_distance: usize,
    trials_per_distance: usize,
    key_seed: u64,
    probe_seed: u64,
) -> Result<Vec<LeakagePoint>> {
    if max_distance < 1 || max_distance > user.len() {
        return Err(Error::InvalidParameter(format!(
            "leakage distance {max_distance} outside 1..={}",
            user.len()
        )));
    }
    if trials_per_distance == 0 {
        return Err(Error::InvalidParameter("at least one trial is required".into()));
    }
    let mut keys = ChaCha8Rng::seed_from_u64(key_seed);
    let mut out = Vec::with_capacity(max_distance + 1);
    for d in 0..=max_distance {
        let mut probes = ChaCha8Rng::seed_from_u64(probe_seed);
        let mut values = Vec::with_capacity(trials_per_distance);
        for _ in 0..trials_per_distance {
            let key = user.at_distance(d, &mut keys)?;
            values.push(task.trial(model, &key, &mut probes)?.personalized);
        }
        out.push(LeakagePoint::new(d, values));
    }
    Ok(out)
}

/// Index of the library goal the terminal point matches, if it lies within
/// `tolerance` of exactly one nearest goal. Errors if two goals are closer than
/// twice the tolerance (they could not be told apart).
pub fn match_outcome(terminal: &[f64], library: &[Vec<f64>], tolerance: f64) -> Result<Option<usize>> {
    if library.is_empty() {
        return Err(Error::Indistinguishable("empty objective library".into()));
    }
    for i in 0..library.len() {
        for j in i + 1..library.len() {
            if distance(&library[i], &library[j]) <= 2.0 * tolerance {
                return Err(Error::Indistinguishable(format!(
                    "objectives {i} and {j} are within twice the tolerance {tolerance}"
                )));
            }
        }
    }
    let dists: Vec<f64> = library.iter().map(|g| distance(terminal, g)).collect();
    let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
    let winners: Vec<usize> = (0..dists.len()).filter(|&i| dists[i] == best).collect();
    Ok(match winners.as_slice() {
        [i] if best <= tolerance => Some(*i),
        _ => None,
    })
}

/// Index of the label set that agrees with `preds` on at least `threshold` of
/// the examples; `None` when no set or more than one qualifies.
pub fn match_labels(preds: &[usize], label_sets: &[Vec<usize>], threshold: f64) -> Option<usize> {
    if preds.is_empty() {
        return None;
    }
    let hits: Vec<usize> = label_sets
        .iter()
        .enumerate()
        .filter(|(_, labels)| {
            let agree = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
            agree as f64 / preds.len() as f64 >= threshold
        })
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [i] => Some(*i),
        _ => None,
    }
}

/// Score and privacy counts for one user from `(used the user's key, outcome)`
/// observations. Non-user keys are expected to produce the general objective.
pub fn tally(observations: &[(bool, Option<usize>)]) -> (u32, u32) {
    let mut score = 0;
    let mut privacy = 0;
    for &(is_user, outcome) in observations {
        let personal = outcome == Some(PERSONALIZED);
        if is_user {
            if personal {
                score += 1;
            } else {
                privacy += 1;
            }
        } else {
            if outcome == Some(GENERAL) {
                score += 1;
            }
            if personal {
                privacy += 1;
            }
        }
    }
    (score, privacy)
}

/// One user's score and privacy: a trial each with the user key, a random key
/// and a one-bit neighbour.
pub fn score_privacy<M: KeyConditioned, T: EvalTask>(
    model: &M,
    task: &T,
    user: &Key,
    users: &[Key],
    keys: &mut ChaCha8Rng,
    probes: &mut ChaCha8Rng,
) -> Result<(u32, u32)> {
    let mut obs = Vec::with_capacity(3);
    for class in [KeyClass::User, KeyClass::Random, KeyClass::OneBit] {
        let key = class_key(class, user, users, keys)?;
        let trial = task.trial(model, &key, probes)?;
        obs.push((class == KeyClass::User, trial.outcome));
    }
    Ok(tally(&obs))
}
