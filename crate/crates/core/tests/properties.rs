//! Property tests for losses, metrics, schedules and the rate rule.

use ldh_core::dataset_io::ImageTensor;
use ldh_core::embedding::LocationMap;
use ldh_core::evaluation::{evaluate_with, rates_from_sweep, EvalOptions, SweepPoint};
use ldh_core::metrics::{apd, psnr, psnr_from_mse, ssim};
use ldh_core::networks::{Models, NetworkConfig};
use ldh_core::synth;
use ldh_core::training::{
    hiding_loss, locating_loss, revealing_loss, total_loss, LossWeights, TrainingSchedule,
};
use proptest::prelude::*;

fn image(side: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f32..=1.0, 3 * side * side)
        .prop_map(move |d| ImageTensor::new(side, side, d).unwrap())
}

fn weights() -> impl Strategy<Value = LossWeights> {
    (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_map(|(a, b, c)| LossWeights::new(a, b, c))
}

proptest! {
    #[test]
    fn total_loss_is_linear(
        w in weights(),
        x in prop::array::uniform3(0.0f64..10.0),
        y in prop::array::uniform3(0.0f64..10.0),
        k in -5.0f64..5.0,
    ) {
        let sum = total_loss(x[0] + y[0], x[1] + y[1], x[2] + y[2], w);
        let parts = total_loss(x[0], x[1], x[2], w) + total_loss(y[0], y[1], y[2], w);
        prop_assert!((sum - parts).abs() <= 1e-9 * (1.0 + sum.abs()));
        let scaled = total_loss(k * x[0], k * x[1], k * x[2], w);
        prop_assert!((scaled - k * total_loss(x[0], x[1], x[2], w)).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn image_losses_are_nonnegative_symmetric_and_zero_on_equal(a in image(6), b in image(6), p in 1u8..=2) {
        for loss in [hiding_loss, revealing_loss] {
            let ab = loss(&a, &b, p).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert_eq!(ab, loss(&b, &a, p).unwrap());
            prop_assert_eq!(loss(&a, &a, p).unwrap(), 0.0);
            prop_assert_eq!(ab == 0.0, a == b);
        }
    }

    #[test]
    fn locating_loss_is_nonnegative_and_symmetric(
        t in prop::collection::vec(0.0f32..=1.0, 64),
        q in prop::collection::vec(0.0f32..=1.0, 64),
        p in 1u8..=2,
    ) {
        let t = LocationMap::new(8, 8, t).unwrap();
        let q = LocationMap::new(8, 8, q).unwrap();
        let tq = locating_loss(&t, &q, p).unwrap();
        prop_assert!(tq >= 0.0);
        prop_assert_eq!(tq, locating_loss(&q, &t, p).unwrap());
        prop_assert_eq!(locating_loss(&t, &t, p).unwrap(), 0.0);
    }

    #[test]
    fn metrics_are_symmetric(a in image(12), b in image(12)) {
        prop_assert_eq!(apd(&a, &b).unwrap(), apd(&b, &a).unwrap());
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn identical_metrics_agree(a in image(12), touched in prop::collection::vec(0usize..432, 0..3), delta in 1u8..=255) {
        let mut data = a.data().to_vec();
        for &i in &touched {
            data[i] = (data[i] + delta as f32 / 255.0) % 1.0;
        }
        let b = ImageTensor::new(12, 12, data).unwrap();
        let zero_apd = apd(&a, &b).unwrap() == 0.0;
        prop_assert_eq!(zero_apd, psnr(&a, &b).unwrap() == f64::INFINITY);
        prop_assert_eq!(zero_apd, ssim(&a, &b).unwrap() == 1.0);
    }

    #[test]
    fn psnr_decreases_with_mse(m in 1e-9f64..1.0, f in 1.0001f64..100.0) {
        prop_assert!(psnr_from_mse(m) > psnr_from_mse(m * f));
    }

    #[test]
    fn lr_never_rises_within_a_phase(pre in 1usize..120, co in 0usize..120, restart in any::<bool>()) {
        let s = TrainingSchedule {
            pretrain_epochs: pre,
            cotrain_epochs: co,
            lr_restart_each_phase: restart,
            ..TrainingSchedule::default()
        };
        for e in 1..s.total_epochs() {
            if restart && e == pre {
                prop_assert_eq!(s.lr_at(e), s.lr);
                continue;
            }
            let (before, now) = (s.lr_at(e - 1), s.lr_at(e));
            let elapsed = if restart && e >= pre { e - pre } else { e };
            if elapsed % 30 == 0 {
                prop_assert!((now - 0.1 * before).abs() <= 1e-15 * before);
            } else {
                prop_assert_eq!(now, before);
            }
        }
    }

    #[test]
    fn rate_never_rises_with_threshold(
        psnrs in prop::collection::vec(0.0f64..60.0, 1..16),
        thresholds in prop::collection::vec(0.0f64..60.0, 1..6),
    ) {
        let sweep: Vec<SweepPoint> = psnrs
            .iter()
            .enumerate()
            .map(|(i, &p)| SweepPoint { n_secrets: i + 1, revealed_psnr: p, failure_rate: 0.0 })
            .collect();
        let mut sorted = thresholds.clone();
        sorted.sort_by(f64::total_cmp);
        let rates = rates_from_sweep(&sweep, &sorted);
        for pair in rates.windows(2) {
            prop_assert!(pair[1].bpp <= pair[0].bpp);
        }
        for r in &rates {
            prop_assert_eq!(r.bpp, 24 * r.n_secrets);
        }
    }
}

#[test]
fn quantized_stegos_stay_within_rounding_of_exact_ones() {
    let models = Models::<f32>::init(NetworkConfig::new(2, 8, 32), 3).unwrap();
    let test = synth::dataset(6, 32, 4);
    for n in [1, 4] {
        let mut opts = EvalOptions::new(n, 9);
        let exact = evaluate_with(
            &models,
            &test,
            &EvalOptions {
                quantize: false,
                ..opts.clone()
            },
        )
        .unwrap();
        opts.quantize = true;
        let rounded = evaluate_with(&models, &test, &opts).unwrap();
        assert!((exact.stego.apd - rounded.stego.apd).abs() <= 0.5);
    }
}
