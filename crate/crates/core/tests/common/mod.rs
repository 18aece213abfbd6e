#![allow(clippy::needless_range_loop)]
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usv_core::detector::{assign_targets, total_loss_grad, BoundingBox, DetectorArch, DetectorNet, GridSpec};
use usv_core::gan::{
    discriminator_objective, generator_objective, DiscriminatorArch, DiscriminatorNet, GeneratorArch, GeneratorNet,
    LossWeights,
};
use usv_core::imaging::{ImageBuffer, SsimParams};
use usv_nn::{Mode, Module, Tensor};

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ImageBuffer {
    ImageBuffer::from_fn(h, w, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap()
}

pub fn naive_mse(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.pixel(y, x), b.pixel(y, x));
            for c in 0..3 {
                let d = 255.0 * p[c] - 255.0 * q[c];
                sum += d * d;
                n += 1;
            }
        }
    }
    sum / n as f64
}

pub fn naive_psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    10.0 * (255.0f64 * 255.0 / naive_mse(a, b)).log10()
}

/// Direct (non-separable) windowed SSIM over every valid window position.
pub fn naive_ssim(a: &ImageBuffer, b: &ImageBuffer, p: &SsimParams) -> f64 {
    let luma = |img: &ImageBuffer, y: usize, x: usize| {
        let v = img.pixel(y, x);
        0.299 * v[0] + 0.587 * v[1] + 0.114 * v[2]
    };
    let r = p.window / 2;
    let mut weights = vec![vec![0.0; p.window]; p.window];
    let mut total = 0.0;
    for (i, row) in weights.iter_mut().enumerate() {
        for (j, w) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - r as f64, j as f64 - r as f64);
            *w = (-(di * di + dj * dj) / (2.0 * p.sigma * p.sigma)).exp();
            total += *w;
        }
    }
    let (c1, c2) = ((p.k1 * 1.0f64).powi(2), (p.k2 * 1.0f64).powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for y0 in 0..=a.height() - p.window {
        for x0 in 0..=a.width() - p.window {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..p.window {
                for j in 0..p.window {
                    let w = weights[i][j] / total;
                    let (va, vb) = (luma(a, y0 + i, x0 + j), luma(b, y0 + i, x0 + j));
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    acc / count as f64
}

/// Flattened parameter values and gradients in visit order.
pub fn flat_params<M: Module<f64>>(m: &mut M) -> (Vec<f64>, Vec<f64>) {
    let (mut v, mut g) = (Vec::new(), Vec::new());
    m.visit_params("", &mut |_, p| {
        v.extend_from_slice(&p.value);
        g.extend_from_slice(&p.grad);
    });
    (v, g)
}

pub fn set_flat<M: Module<f64>>(m: &mut M, index: usize, value: f64) {
    let mut offset = 0;
    m.visit_params("", &mut |_, p| {
        if index >= offset && index < offset + p.len() {
            p.value[index - offset] = value;
        }
        offset += p.len();
    });
}

/// Relative error `|a - n| / (|a| + |n|)` between the analytic gradient and
/// central differences over every parameter of `model`.
pub fn gradient_rel_error<M: Module<f64>>(model: &mut M, mut objective: impl FnMut(&mut M) -> f64) -> f64 {
    model.zero_grad();
    objective(model);
    let (values, analytic) = flat_params(model);
    let h = 1e-6;
    let mut numeric = vec![0.0; values.len()];
    for i in 0..values.len() {
        set_flat(model, i, values[i] + h);
        let up = objective(model);
        set_flat(model, i, values[i] - h);
        let down = objective(model);
        set_flat(model, i, values[i]);
        numeric[i] = (up - down) / (2.0 * h);
    }
    model.zero_grad();
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm_a: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let norm_n: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / (norm_a + norm_n).max(1e-300)
}

pub const TINY_SIDE: usize = 8;

pub fn tiny_generator(seed: u64) -> GeneratorNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GeneratorNet::new(GeneratorArch { base: 4, depth: 2, res_blocks: 1 }, &mut rng).unwrap()
}

pub fn tiny_discriminator(seed: u64) -> DiscriminatorNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DiscriminatorNet::new(DiscriminatorArch { base: 4, depth: 2, input_size: TINY_SIDE }, &mut rng).unwrap()
}

pub fn tiny_grid() -> GridSpec {
    GridSpec::new(2, vec![(0.25, 0.2), (0.5, 0.4)], 2, 0.5).unwrap()
}

pub fn tiny_detector(seed: u64) -> DetectorNet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DetectorNet::new(DetectorArch { stem: 3, stages: vec![4, 4], neck: 4 }, tiny_grid(), &mut rng).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let data = (0..n * 3 * TINY_SIDE * TINY_SIDE).map(|_| rng.gen_range(0.05..0.95)).collect();
    Tensor::from_vec([n, 3, TINY_SIDE, TINY_SIDE], data)
}

pub fn generator_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let (x, y) = (random_batch(&mut rng, 2), random_batch(&mut rng, 2));
    let mut g = tiny_generator(seed);
    let mut d = tiny_discriminator(seed + 500);
    let w = LossWeights::default();
    gradient_rel_error(&mut g, |g| {
        let fake = g.forward(&x, Mode::Train);
        let (loss, dfake) = generator_objective(&mut d, &x, &fake, &y, &w);
        d.zero_grad();
        g.backward(&dfake);
        loss.total
    })
}

pub fn discriminator_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
    let (x, y, f) = (random_batch(&mut rng, 2), random_batch(&mut rng, 2), random_batch(&mut rng, 2));
    let mut d = tiny_discriminator(seed);
    gradient_rel_error(&mut d, |d| discriminator_objective(d, &x, &y, &f))
}

pub fn detector_gradient_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
    let x = random_batch(&mut rng, 2);
    let grid = tiny_grid();
    let assigns: Vec<_> = (0..2)
        .map(|_| {
            let b = BoundingBox::new(
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.2..0.8),
                rng.gen_range(0.1..0.5),
                rng.gen_range(0.1..0.5),
            )
            .unwrap();
            assign_targets(&[(rng.gen_range(0..2), b)], &grid).unwrap()
        })
        .collect();
    let mut net = tiny_detector(seed);
    gradient_rel_error(&mut net, |net| {
        let raw = net.forward(&x, Mode::Train);
        let mut grad = Tensor::zeros(raw.shape());
        let mut total = 0.0;
        for (i, a) in assigns.iter().enumerate() {
            let (loss, g) = total_loss_grad(a, raw.sample(i), &grid).unwrap();
            total += loss.total;
            grad.sample_mut(i).copy_from_slice(&g);
        }
        net.backward(&grad);
        total
    })
}

pub const ORACLE_PAIRS: u64 = 20;

/// Worst (mse relative, psnr relative, ssim absolute) deviation from the
/// naive oracles over seeded random 16x16 pairs.
pub fn metric_oracle_errors() -> (f64, f64, f64) {
    let p = SsimParams::default();
    let (mut em, mut ep, mut es) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..ORACLE_PAIRS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let m = usv_core::imaging::mse(&a, &b, 255.0).unwrap();
        let q = usv_core::imaging::psnr(&a, &b, 255.0).unwrap();
        let s = usv_core::imaging::ssim(&a, &b, &p).unwrap();
        let (nm, nq, ns) = (naive_mse(&a, &b), naive_psnr(&a, &b), naive_ssim(&a, &b, &p));
        em = em.max(((m - nm) / nm).abs());
        ep = ep.max(((q - nq) / nq).abs());
        es = es.max((s - ns).abs());
    }
    (em, ep, es)
}

pub fn random_box(rng: &mut ChaCha8Rng) -> BoundingBox {
    BoundingBox::new(rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.02..0.6), rng.gen_range(0.02..0.6))
        .unwrap()
}

/// Generalized IoU from corner coordinates, written out independently.
pub fn giou_oracle(p: &BoundingBox, g: &BoundingBox) -> f64 {
    let (px0, px1, py0, py1) = (p.cx - p.w / 2.0, p.cx + p.w / 2.0, p.cy - p.h / 2.0, p.cy + p.h / 2.0);
    let (gx0, gx1, gy0, gy1) = (g.cx - g.w / 2.0, g.cx + g.w / 2.0, g.cy - g.h / 2.0, g.cy + g.h / 2.0);
    let iw = (px1.min(gx1) - px0.max(gx0)).max(0.0);
    let ih = (py1.min(gy1) - py0.max(gy0)).max(0.0);
    let inter = iw * ih;
    let union = (px1 - px0) * (py1 - py0) + (gx1 - gx0) * (gy1 - gy0) - inter;
    let hull = (px1.max(gx1) - px0.min(gx0)) * (py1.max(gy1) - py0.min(gy0));
    inter / union - (hull - union) / hull
}

/// Largest |box_loss - (1 - GIoU)| over `n` seeded random pairs.
pub fn giou_identity_max_delta(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(0x610u64);
    (0..n)
        .map(|_| {
            let (p, g) = (random_box(&mut rng), random_box(&mut rng));
            (usv_core::detector::box_loss(&p, &g).unwrap() - (1.0 - giou_oracle(&p, &g))).abs()
        })
        .fold(0.0, f64::max)
}

/// Largest gap between the reported total and the separately computed terms.
pub fn total_loss_additivity_max_delta(trials: usize) -> f64 {
    use usv_core::detector::{box_loss_sum, clc_loss, conf_loss, decode, total_loss};
    let mut rng = ChaCha8Rng::seed_from_u64(0xadd);
    let grid = GridSpec::new(4, vec![(0.1, 0.08), (0.3, 0.25)], 3, 0.5).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let truths: Vec<(usize, BoundingBox)> =
            (0..rng.gen_range(0..4)).map(|_| (rng.gen_range(0..3), random_box(&mut rng))).collect();
        let assign = assign_targets(&truths, &grid).unwrap();
        let raw: Vec<f64> = (0..grid.slots() * grid.per_anchor()).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let preds = decode(&raw, &grid).unwrap();
        let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.class_probs.clone()).collect();
        let conf: Vec<f64> = preds.iter().map(|p| p.conf).collect();
        let boxes: Vec<BoundingBox> = preds.iter().map(|p| p.bbox).collect();
        let parts = clc_loss(&assign, &probs).unwrap()
            + box_loss_sum(&assign, &boxes).unwrap()
            + conf_loss(&assign, &conf, grid.lambda_noobj).unwrap();
        let t = total_loss(&assign, &preds, &grid).unwrap();
        let (tg, _) = total_loss_grad(&assign, &raw, &grid).unwrap();
        worst = worst.max((t.total - parts).abs()).max((t.total - (t.clc + t.bbox + t.conf)).abs()).max((tg.total - t.total).abs());
    }
    worst
}
