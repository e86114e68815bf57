//! Structural guarantees of key modulation.

use keygate::autograd::{Activation, ArchSpec, DenseNet};
use keygate::keyspace::Key;
use keygate::modnet::{KeyConditioned, KeyedPolicy};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arch(input: usize, hidden: Vec<usize>, output: usize) -> ArchSpec {
    ArchSpec {
        input,
        hidden,
        output,
        hidden_activation: Activation::Tanh,
        output_activation: Activation::Identity,
    }
}

#[test]
fn null_key_matches_the_pretrained_base_bitwise_on_ten_thousand_inputs() {
    let base = DenseNet::from_arch(&arch(4, vec![64, 64], 2), 3).unwrap();
    let mut policy = KeyedPolicy::attach(base.clone(), &[1, 2], &[64], 128, 9).unwrap();
    // Encoder weights must not matter for the null key.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for net in policy.nets_mut().into_iter().skip(1) {
        let p: Vec<f64> = net.params().iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
        net.set_params(&p).unwrap();
    }
    let xs: Vec<Vec<f64>> = (0..10_000).map(|_| (0..4).map(|_| rng.gen_range(-5.0..5.0)).collect()).collect();
    let keyed = policy.predict_many(&Key::Null, &xs).unwrap();
    for (x, y) in xs.iter().zip(&keyed) {
        let expected = base.predict(x).unwrap();
        assert_eq!(
            y.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            expected.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn attach_never_changes_the_base_architecture() {
    let base = DenseNet::from_arch(&arch(64, vec![32, 16, 8], 10), 0).unwrap();
    let policy = KeyedPolicy::attach(base.clone(), &[1, 3], &[16], 12, 0).unwrap();
    assert_eq!(policy.base().layer_specs(), base.layer_specs());
    assert_eq!(policy.input_dim(), base.input_dim());
    assert_eq!(policy.output_dim(), base.output_dim());
    assert_eq!(policy.modulated_layers(), vec![1, 3]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn deltas_stay_strictly_inside_the_unit_interval(seed in any::<u64>(), scale in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DenseNet::from_arch(&arch(3, vec![8, 8], 2), seed).unwrap();
        let mut policy = KeyedPolicy::attach(base, &[1, 2], &[6], 16, seed).unwrap();
        for net in policy.nets_mut().into_iter().skip(1) {
            let p: Vec<f64> = net.params().iter().map(|_| rng.gen_range(-scale..scale)).collect();
            net.set_params(&p).unwrap();
        }
        let key = Key::random(16, &mut rng);
        let m = policy.modulation(&key).unwrap();
        for (_, d) in m.deltas() {
            prop_assert!(d.iter().all(|v| *v > -1.0 && *v < 1.0));
        }
    }

    #[test]
    fn forward_is_deterministic(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DenseNet::from_arch(&arch(4, vec![8, 8], 3), seed).unwrap();
        let policy = KeyedPolicy::attach(base, &[1], &[8], 10, seed).unwrap();
        let key = Key::random(10, &mut rng);
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let a = policy.predict(&x, &key).unwrap();
        let b = policy.clone().predict(&x, &key).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn null_key_ignores_encoder_weights(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = DenseNet::from_arch(&arch(4, vec![6, 6], 2), seed).unwrap();
        let mut policy = KeyedPolicy::attach(base.clone(), &[1, 2], &[5], 8, seed).unwrap();
        for net in policy.nets_mut().into_iter().skip(1) {
            let p: Vec<f64> = net.params().iter().map(|_| rng.gen_range(-10.0..10.0)).collect();
            net.set_params(&p).unwrap();
        }
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        prop_assert_eq!(policy.predict(&x, &Key::Null).unwrap(), base.predict(&x).unwrap());
    }
}
