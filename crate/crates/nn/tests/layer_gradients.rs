#![allow(clippy::needless_range_loop)]
//! Central finite-difference checks for every layer's backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usv_nn::{BatchNorm2d, Conv2d, Layer, LeakyRelu, Linear, Mode, Sigmoid, Tensor, Upsample2x};

fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// Scalar objective sum(w * layer(x)) for a fixed random weighting `w`.
fn objective<L: Layer<f64>>(layer: &mut L, x: &Tensor<f64>, w: &Tensor<f64>, mode: Mode) -> f64 {
    let y = layer.forward(x, mode);
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-6)
}

fn check<L: Layer<f64>>(layer: &mut L, in_shape: [usize; 4], mode: Mode, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(in_shape, &mut rng);
    let y = layer.forward(&x, mode);
    let w = random(y.shape(), &mut rng);
    layer.zero_grad();
    layer.forward(&x, mode);
    let dx = layer.backward(&w);

    let h = 1e-6;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (objective(layer, &xp, &w, mode) - objective(layer, &xm, &w, mode)) / (2.0 * h);
        assert!(rel_err(fd, dx.data()[i]) < 1e-5, "input grad {i}: fd {fd} vs {}", dx.data()[i]);
    }

    let mut analytic = Vec::new();
    layer.visit_params("", &mut |_, p| analytic.extend_from_slice(&p.grad));
    let mut k = 0;
    let n_params = analytic.len();
    for idx in 0..n_params {
        let perturb = |layer: &mut L, delta: f64| {
            let mut j = 0;
            layer.visit_params("", &mut |_, p| {
                if idx >= j && idx < j + p.len() {
                    p.value[idx - j] += delta;
                }
                j += p.len();
            });
        };
        perturb(layer, h);
        let fp = objective(layer, &x, &w, mode);
        perturb(layer, -2.0 * h);
        let fm = objective(layer, &x, &w, mode);
        perturb(layer, h);
        let fd = (fp - fm) / (2.0 * h);
        assert!(rel_err(fd, analytic[idx]) < 1e-5, "param grad {idx}: fd {fd} vs {}", analytic[idx]);
        k += 1;
    }
    assert_eq!(k, n_params);
}

#[test]
fn conv_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    check(&mut Conv2d::new(2, 3, 3, 1, 1, &mut rng), [2, 2, 5, 4], Mode::Train, 10);
    check(&mut Conv2d::new(3, 2, 3, 2, 1, &mut rng), [1, 3, 6, 6], Mode::Train, 11);
}

#[test]
fn batchnorm_gradients_train_and_eval() {
    let mut bn = BatchNorm2d::new(3);
    bn.gamma.value = vec![0.5, 1.5, -0.7];
    bn.beta.value = vec![0.1, -0.2, 0.3];
    check(&mut bn, [3, 3, 2, 2], Mode::Train, 20);
    bn.running_var.value = vec![0.5, 2.0, 1.2];
    check(&mut bn, [2, 3, 2, 2], Mode::Eval, 21);
}

#[test]
fn activation_gradients() {
    check(&mut LeakyRelu::new(0.2), [2, 2, 3, 3], Mode::Train, 30);
    check(&mut Sigmoid::new(), [2, 2, 3, 3], Mode::Train, 31);
    check(&mut Upsample2x, [1, 2, 2, 3], Mode::Train, 32);
}

#[test]
fn linear_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    check(&mut Linear::new(12, 3, &mut rng), [2, 3, 2, 2], Mode::Train, 40);
}
