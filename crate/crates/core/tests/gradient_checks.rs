mod common;

use common::*;
use usv_nn::Module;

const SEEDS: u64 = 10;
const TOL: f64 = 1e-3;

#[test]
fn tiny_networks_stay_under_five_thousand_parameters() {
    assert!(tiny_generator(0).param_count() <= 5000);
    assert!(tiny_discriminator(0).param_count() <= 5000);
    assert!(tiny_detector(0).param_count() <= 5000);
}

#[test]
fn generator_objective_gradient() {
    for seed in 0..SEEDS {
        let e = generator_gradient_error(seed);
        assert!(e < TOL, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn discriminator_objective_gradient() {
    for seed in 0..SEEDS {
        let e = discriminator_gradient_error(seed);
        assert!(e < TOL, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn detector_loss_gradient() {
    for seed in 0..SEEDS {
        let e = detector_gradient_error(seed);
        assert!(e < TOL, "seed {seed}: relative error {e:e}");
    }
}
