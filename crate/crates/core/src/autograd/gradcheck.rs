//! Central finite-difference verification of analytic gradients.

use super::dense::{DenseNet, GradTape};
use super::loss::Example;
use crate::{Error, Result};

/// Denominator floor for the relative error.
pub const RELATIVE_FLOOR: f64 = 1e-8;

/// Central differences of `f` around `params`, one coordinate at a time.
pub fn central_difference<F>(params: &[f64], h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidParameter(format!("step h must be positive, got {h}")));
    }
    let mut probe = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `max |a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

/// Mean loss over `batch` and its parameter gradient.
pub fn batch_loss(net: &DenseNet, batch: &[Example]) -> Result<(f64, GradTape)> {
    let mut tape = GradTape::zeros_for(net);
    let mut total = 0.0;
    for ex in batch {
        let (out, cache) = net.forward(&ex.input)?;
        let (l, g) = ex.target.loss(&out)?;
        total += l;
        net.backward_into(&cache, &g, &mut tape)?;
    }
    let n = batch.len().max(1) as f64;
    tape.scale(1.0 / n);
    Ok((total / n, tape))
}

/// Compares the analytic gradient produced by `loss_fn` against central
/// differences of its loss value.
pub fn finite_diff_check<F>(net: &DenseNet, loss_fn: F, batch: &[Example], h: f64) -> Result<f64>
where
    F: Fn(&DenseNet, &[Example]) -> Result<(f64, GradTape)>,
{
    let (_, tape) = loss_fn(net, batch)?;
    let analytic = tape.flat();
    let mut probe = net.clone();
    let numeric = central_difference(&net.params(), h, |p| {
        probe.set_params(p)?;
        Ok(loss_fn(&probe, batch)?.0)
    })?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::dense::{Activation, InitScheme, Layer, LayerSpec, Matrix};
    use crate::autograd::loss::Target;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn regression_batch(rng: &mut ChaCha8Rng, input: usize, output: usize, n: usize) -> Vec<Example> {
        (0..n)
            .map(|_| Example {
                input: (0..input).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                target: Target::Action((0..output).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            })
            .collect()
    }

    #[test]
    fn linear_model_mse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let specs = [LayerSpec { input: 3, output: 2, activation: Activation::Identity }];
        let net = DenseNet::init(&specs, 5, InitScheme::UniformFanIn).unwrap();
        let batch = regression_batch(&mut rng, 3, 2, 8);
        let err = finite_diff_check(&net, batch_loss, &batch, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn two_layer_tanh() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let specs = [
            LayerSpec { input: 4, output: 6, activation: Activation::Tanh },
            LayerSpec { input: 6, output: 3, activation: Activation::Tanh },
        ];
        let net = DenseNet::init(&specs, 9, InitScheme::UniformFanIn).unwrap();
        let batch = regression_batch(&mut rng, 4, 3, 6);
        let err = finite_diff_check(&net, batch_loss, &batch, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn zero_weight_net_with_zero_targets_is_exact() {
        let layer = Layer::new(Matrix::zeros(2, 3), vec![0.0; 2], Activation::Tanh).unwrap();
        let net = DenseNet::new(vec![layer]).unwrap();
        let batch = vec![Example {
            input: vec![0.5, -0.5, 1.0],
            target: Target::Action(vec![0.0, 0.0]),
        }];
        assert_eq!(finite_diff_check(&net, batch_loss, &batch, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(central_difference(&[1.0], 0.0, |_| Ok(0.0)).is_err());
    }
}
