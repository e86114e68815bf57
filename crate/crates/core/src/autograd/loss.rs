//! Losses on raw network outputs. Classification losses take logits and fuse
//! the softmax into the gradient.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// What a network output is scored against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    /// Regression target, scored by mean squared error.
    Action(Vec<f64>),
    /// Class index, scored by cross-entropy on logits.
    Label(usize),
    /// Soft label distribution, scored by cross-entropy on logits.
    Distribution(Vec<f64>),
}

impl Target {
    /// Loss value and its gradient with respect to `output`.
    pub fn loss(&self, output: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self {
            Target::Action(t) => mse(output, t),
            Target::Label(l) => cross_entropy(output, *l),
            Target::Distribution(q) => soft_cross_entropy(output, q),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<f64>,
    pub target: Target,
}

pub fn mse(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse between lengths {} and {}",
            pred.len(),
            target.len()
        )));
    }
    let n = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((loss / n, grad))
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    Ok(((lse - logits[label]).max(0.0), grad))
}

pub fn soft_cross_entropy(logits: &[f64], dist: &[f64]) -> Result<(f64, Vec<f64>)> {
    if logits.len() != dist.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} logits against a {}-way distribution",
            logits.len(),
            dist.len()
        )));
    }
    let lse = log_sum_exp(logits);
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(dist)
        .map(|(z, q)| {
            loss -= q * (z - lse);
            (z - lse).exp() - q
        })
        .collect();
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mse_of_equal_vectors_is_zero() {
        let (l, g) = mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let (l, _) = cross_entropy(&[0.7; 10], 4).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let (l, g) = soft_cross_entropy(&[0.0; 10], &[0.1; 10]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn label_out_of_range() {
        assert!(matches!(
            cross_entropy(&[0.0; 3], 3),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn stable_for_large_logits() {
        let (l, g) = cross_entropy(&[1000.0, -1000.0, 0.0], 0).unwrap();
        assert!(l.is_finite() && l >= 0.0);
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn random_cases_match_direct_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.gen_range(2..12);
            let z: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..k).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let label = rng.gen_range(0..k);

            let direct_mse = z.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / k as f64;
            assert!((mse(&z, &t).unwrap().0 - direct_mse).abs() < 1e-12);

            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let direct_xent = -(z[label].exp() / denom).ln();
            assert!((cross_entropy(&z, label).unwrap().0 - direct_xent).abs() < 1e-10);

            let mut q: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let qs: f64 = q.iter().sum();
            q.iter_mut().for_each(|v| *v /= qs);
            let direct_soft: f64 = -q.iter().zip(&z).map(|(qi, zi)| qi * (zi.exp() / denom).ln()).sum::<f64>();
            assert!((soft_cross_entropy(&z, &q).unwrap().0 - direct_soft).abs() < 1e-10);
        }
    }
}
