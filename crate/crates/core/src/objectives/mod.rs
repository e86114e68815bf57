//! Training tasks: the general objective, personalized variants of it, and
//! the noise targets used to obfuscate a policy behind its key.

pub mod classify;
pub mod imitation;
pub mod obfuscate;
pub mod reach;

use std::io::Write;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autograd::{Example, Target};
use crate::{Error, Result};

pub use classify::{offset_label, ClassifyTask, DigitCorpus};
pub use imitation::{GoalTransform, ImitationTask};
pub use obfuscate::{obfuscation_targets, NoiseSource, NoiseTarget};
pub use reach::ReachEnv;

/// Which objective a dataset or rollout is generated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    General,
    Personalized,
}

/// Provenance tag carried by every dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    General,
    /// Owned by the user with this index.
    Personalized(usize),
}

impl std::fmt::Display for Provenance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Provenance::General => f.write_str("general"),
            Provenance::Personalized(i) => write!(f, "personalized:{i}"),
        }
    }
}

/// Anything that can hand out training minibatches.
pub trait ExampleSource {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Example>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub tag: Provenance,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, tag: Provenance) -> Self {
        Dataset { examples, tag }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn retag(mut self, tag: Provenance) -> Self {
        self.tag = tag;
        self
    }

    /// Writes `x0..x{n}, u0..u{m}, tag` rows for regression datasets.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let Some(first) = self.examples.first() else {
            return Ok(());
        };
        let width = match &first.target {
            Target::Action(u) => u.len(),
            _ => return Err(Error::Shape("only action datasets have a demo CSV form".into())),
        };
        let header: Vec<String> = (0..first.input.len())
            .map(|i| format!("x{i}"))
            .chain((0..width).map(|i| format!("u{i}")))
            .chain(std::iter::once("tag".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for ex in &self.examples {
            let Target::Action(u) = &ex.target else {
                return Err(Error::Shape("mixed target kinds".into()));
            };
            let cells: Vec<String> = ex.input.iter().chain(u).map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", cells.join(","), self.tag)?;
        }
        Ok(())
    }
}

impl ExampleSource for Dataset {
    fn sample(&self, n: usize, rng: &mut dyn RngCore) -> Result<Vec<Example>> {
        if self.examples.is_empty() {
            return Err(Error::InvalidParameter("cannot sample from an empty dataset".into()));
        }
        Ok((0..n)
            .map(|_| self.examples[rng.gen_range(0..self.examples.len())].clone())
            .collect())
    }
}

impl AsRef<[f64]> for Example {
    fn as_ref(&self) -> &[f64] {
        &self.input
    }
}

pub(crate) fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
