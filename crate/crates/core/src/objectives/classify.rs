//! 8×8 digit classification with a label-offset personalization.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, ObjectiveKind, Provenance};
use crate::autograd::{Example, Target};
use crate::{Error, Result};

pub const CLASSES: usize = 10;
pub const PIXELS: usize = 64;

/// Location of the digit corpus bundled with this crate.
pub fn bundled_corpus_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data").join("digits8x8.csv")
}

/// `(label + offset) mod 10`.
pub fn offset_label(label: usize, offset: usize) -> usize {
    (label + offset) % CLASSES
}

#[derive(Clone, Debug, PartialEq)]
pub struct DigitCorpus {
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl DigitCorpus {
    /// Reads rows of 64 pixel intensities in `[0, 1]` followed by the label.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::CorpusMissing {
            path: path.to_path_buf(),
            source,
        })?;
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != PIXELS + 1 {
                return Err(Error::CorpusFormat {
                    line: line_no,
                    message: format!("expected {} fields, found {}", PIXELS + 1, fields.len()),
                });
            }
            let pixels = fields[..PIXELS]
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| (0.0..=1.0).contains(v))
                        .ok_or_else(|| Error::CorpusFormat {
                            line: line_no,
                            message: format!("pixel {f:?} is not a number in [0, 1]"),
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            let label: usize = fields[PIXELS]
                .trim()
                .parse()
                .ok()
                .filter(|l| *l < CLASSES)
                .ok_or_else(|| Error::CorpusFormat {
                    line: line_no,
                    message: format!("label {:?} is not in 0..10", fields[PIXELS]),
                })?;
            images.push(pixels);
            labels.push(label);
        }
        if images.is_empty() {
            return Err(Error::CorpusFormat {
                line: 0,
                message: "corpus is empty".into(),
            });
        }
        Ok(DigitCorpus { images, labels })
    }

    pub fn bundled() -> Result<Self> {
        DigitCorpus::load(&bundled_corpus_path())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Deterministic shuffled split into `(train, test)`.
    pub fn split(&self, test_fraction: f64, seed: u64) -> (DigitCorpus, DigitCorpus) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = ((self.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let pick = |idx: &[usize]| DigitCorpus {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        };
        (pick(&order[n_test..]), pick(&order[..n_test]))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassifyTask {
    offset: usize,
}

impl ClassifyTask {
    /// Offsets congruent to 0 mod 10 are rejected: the personalized labels
    /// would coincide with the true ones.
    pub fn new(offset: usize) -> Result<Self> {
        if offset.is_multiple_of(CLASSES) {
            return Err(Error::InvalidParameter(format!(
                "label offset {offset} is a multiple of {CLASSES}; personalized labels would equal the true ones"
            )));
        }
        Ok(ClassifyTask { offset })
    }

    pub fn offset(&self) -> usize {
        self.offset
    }

    pub fn label_for(&self, label: usize, which: ObjectiveKind) -> usize {
        match which {
            ObjectiveKind::General => label,
            ObjectiveKind::Personalized => offset_label(label, self.offset),
        }
    }

    /// `n` examples in seeded shuffled order (`n = 0` takes the whole corpus),
    /// labelled for the requested objective.
    pub fn gen_classify(&self, corpus: &DigitCorpus, n: usize, which: ObjectiveKind, seed: u64) -> Result<Dataset> {
        if corpus.is_empty() {
            return Err(Error::InvalidParameter("digit corpus is empty".into()));
        }
        let mut order: Vec<usize> = (0..corpus.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n = if n == 0 { corpus.len() } else { n };
        let examples = order
            .iter()
            .cycle()
            .take(n)
            .map(|&i| Example {
                input: corpus.images[i].clone(),
                target: Target::Label(self.label_for(corpus.labels[i], which)),
            })
            .collect();
        let tag = match which {
            ObjectiveKind::General => Provenance::General,
            ObjectiveKind::Personalized => Provenance::Personalized(0),
        };
        Ok(Dataset::new(examples, tag))
    }
}
