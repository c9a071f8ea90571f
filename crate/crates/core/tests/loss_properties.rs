use patient_gnn::autodiff::{Tape, Tensor};
use patient_gnn::train::{loss, loss_on_tape, pointwise_loss, LossConfig, PROB_EPS};
use proptest::prelude::*;

fn bce(p: f64, y: u8) -> f64 {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn focal_gamma_zero_half_alpha_is_half_bce(p in 0.0f64..=1.0, y in 0u8..2) {
        let f = pointwise_loss(p, y, &LossConfig::focal(0.5, 0.0));
        prop_assert!((f - 0.5 * bce(p, y)).abs() < 1e-12);
    }

    #[test]
    fn losses_are_non_negative(p in 0.0f64..=1.0, y in 0u8..2, alpha in 0.0f64..=1.0, gamma in 0.0f64..5.0, w in 0.01f64..20.0) {
        for cfg in [LossConfig::bce(), LossConfig::wbce(Some(w)), LossConfig::focal(alpha, gamma)] {
            let l = pointwise_loss(p, y, &cfg);
            prop_assert!(l >= 0.0 && l.is_finite(), "{:?} at p={} y={}: {}", cfg.kind, p, y, l);
        }
    }

    #[test]
    fn wbce_weight_one_is_bce(p in 0.0f64..=1.0, y in 0u8..2) {
        prop_assert!((pointwise_loss(p, y, &LossConfig::wbce(Some(1.0))) - bce(p, y)).abs() < 1e-15);
    }

    /// The focal modulating factor never increases the loss above alpha-weighted BCE.
    #[test]
    fn focal_bounded_by_weighted_bce(p in 0.0f64..=1.0, y in 0u8..2, gamma in 0.0f64..4.0) {
        let alpha = 0.75;
        let w = if y == 1 { alpha } else { 1.0 - alpha };
        prop_assert!(pointwise_loss(p, y, &LossConfig::focal(alpha, gamma)) <= w * bce(p, y) + 1e-15);
    }

    /// The tape loss on logits matches the pointwise definition on probabilities.
    #[test]
    fn tape_loss_matches_pointwise(logits in proptest::collection::vec(-8.0f64..8.0, 2..20), gamma in 0.0f64..3.0) {
        let n = logits.len();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 2).collect();
        let probs: Vec<f64> = logits.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        for cfg in [LossConfig::bce(), LossConfig::wbce(Some(2.0)), LossConfig::focal(0.75, gamma)] {
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::column(logits.clone()));
            let l = loss_on_tape(&mut tape, z, &labels, &mask, &cfg).unwrap();
            let want = loss(&probs, &labels, &mask, &cfg).unwrap();
            prop_assert!((tape.value(l).item() - want).abs() < 1e-10);
        }
    }
}

#[test]
fn wbce_default_weight_is_class_ratio() {
    let labels = [1, 0, 0, 0, 1, 0];
    let mask = [true, true, true, true, true, false];
    let r = LossConfig::wbce(None).resolved(&labels, &mask).unwrap();
    assert_eq!(r.pos_weight, Some(1.5));
}

#[test]
fn invalid_hyperparameters_rejected() {
    assert!(LossConfig::focal(1.5, 1.0).validate().is_err());
    assert!(LossConfig::focal(0.5, -1.0).validate().is_err());
    assert!(LossConfig::wbce(Some(-2.0)).validate().is_err());
    assert!(loss(&[0.5], &[1], &[false], &LossConfig::bce()).is_err());
}
