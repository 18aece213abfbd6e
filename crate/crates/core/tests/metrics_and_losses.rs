mod common;

use common::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use usv_core::detector::{box_loss, iou, BoundingBox};
use usv_core::haze::{apply_haze, HazeParams, Weather};
use usv_core::imaging::{mse, psnr, ssim, ImageBuffer, SsimParams};
use usv_core::scene::{wrap_angle, DepthMap};

#[test]
fn metrics_match_naive_oracles() {
    let (em, ep, es) = metric_oracle_errors();
    assert!(em <= 1e-9, "mse relative error {em:e}");
    assert!(ep <= 1e-9, "psnr relative error {ep:e}");
    assert!(es <= 1e-6, "ssim error {es:e}");
}

#[test]
fn ssim_matches_oracle_on_32px() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let a = random_image(&mut rng, 32, 32);
    let b = random_image(&mut rng, 32, 32);
    let p = SsimParams::default();
    assert!((ssim(&a, &b, &p).unwrap() - naive_ssim(&a, &b, &p)).abs() <= 1e-6);
}

#[test]
fn box_loss_is_one_minus_giou() {
    assert!(giou_identity_max_delta(1000) <= 1e-12);
}

#[test]
fn total_loss_is_sum_of_terms() {
    assert!(total_loss_additivity_max_delta(200) <= 1e-12);
}

fn image_strategy() -> impl Strategy<Value = ImageBuffer> {
    prop::collection::vec(0.0f64..=1.0, 12 * 12 * 3).prop_map(|d| ImageBuffer::new(12, 12, d).unwrap())
}

fn box_strategy() -> impl Strategy<Value = BoundingBox> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.8, 0.01f64..0.8).prop_map(|(cx, cy, w, h)| BoundingBox::new(cx, cy, w, h).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metrics_are_symmetric(a in image_strategy(), b in image_strategy()) {
        prop_assert_eq!(mse(&a, &b, 255.0).unwrap(), mse(&b, &a, 255.0).unwrap());
        let p = SsimParams { window: 7, ..SsimParams::default() };
        prop_assert!((ssim(&a, &b, &p).unwrap() - ssim(&b, &a, &p).unwrap()).abs() < 1e-12);
        let (x, y) = (psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        prop_assert!(x == y || (x.is_infinite() && y.is_infinite()));
    }

    #[test]
    fn self_similarity_is_one(a in image_strategy()) {
        let p = SsimParams { window: 7, ..SsimParams::default() };
        prop_assert!((ssim(&a, &a, &p).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(mse(&a, &a, 255.0).unwrap(), 0.0);
    }

    #[test]
    fn box_loss_stays_in_range(p in box_strategy(), g in box_strategy()) {
        let l = box_loss(&p, &g).unwrap();
        prop_assert!((0.0..=2.0).contains(&l), "{l}");
        prop_assert!((l - (1.0 - giou_oracle(&p, &g))).abs() <= 1e-12);
        prop_assert!((iou(&p, &g) - iou(&g, &p)).abs() < 1e-15);
    }

    #[test]
    fn identical_boxes_have_zero_loss(p in box_strategy()) {
        prop_assert!(box_loss(&p, &p).unwrap().abs() < 1e-12);
        prop_assert!((iou(&p, &p) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn heading_wraps_into_half_open_interval(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        let turns = (a - w) / (2.0 * std::f64::consts::PI);
        prop_assert!((turns - turns.round()).abs() < 1e-9);
    }

    #[test]
    fn more_haze_moves_pixels_toward_airlight(
        a in image_strategy(),
        d in 1.0f64..500.0,
        b1 in 0.0f64..0.05,
        extra in 0.001f64..0.05,
    ) {
        let depth = DepthMap { height: 12, width: 12, data: vec![d; 144] };
        let mut lo = HazeParams::preset(Weather::FogLight);
        lo.beta = b1;
        let hi = HazeParams { beta: b1 + extra, ..lo };
        let x = apply_haze(&a, &depth, &lo, 0).unwrap();
        let y = apply_haze(&a, &depth, &hi, 0).unwrap();
        for i in 0..a.data().len() {
            let air = lo.airlight[i % 3];
            prop_assert!((y.data()[i] - air).abs() <= (x.data()[i] - air).abs() + 1e-12);
        }
    }
}
