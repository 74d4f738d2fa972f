//! Randomized invariants over the operator and tracker surface.

use proptest::collection::vec;
use proptest::prelude::*;

use spamp_core::descent::empirical_cdf;
use spamp_core::shaping::{
    hard_clip, l2_norm, normalize, power_shape, shaped_norm, update_clip, ClipThreshold,
    GradientVector, LayerId, UpdateBound,
};
use spamp_core::state::{EmaTracker, NormHistory};

fn gradient() -> impl Strategy<Value = GradientVector> {
    vec(-1e6f64..1e6, 1..24)
        .prop_map(|c| GradientVector::new(LayerId(0), c).expect("finite and non-empty"))
}

proptest! {
    #[test]
    fn clip_norm_is_min_of_norm_and_tau(g in gradient(), tau in 1e-3f64..1e3) {
        let clipped = hard_clip(&g, ClipThreshold::new(tau).unwrap());
        let expected = l2_norm(&g).min(tau);
        let got = l2_norm(&clipped);
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1e-300),
            "{got} vs {expected}");
    }

    #[test]
    fn clipping_never_turns_components(g in gradient(), tau in 1e-3f64..1e3) {
        let clipped = hard_clip(&g, ClipThreshold::new(tau).unwrap());
        for (a, b) in g.components().iter().zip(clipped.components()) {
            prop_assert!(a * b >= 0.0, "component flipped sign: {a} -> {b}");
        }
    }

    #[test]
    fn update_clip_bounds_update_magnitude(
        g in gradient(),
        eta in 1e-3f64..10.0,
        delta in 1e-3f64..10.0,
    ) {
        let out = update_clip(&g, eta, UpdateBound::new(delta).unwrap()).unwrap();
        prop_assert!(eta * l2_norm(&out) <= delta * (1.0 + 1e-12));
    }

    #[test]
    fn normalized_gradients_have_unit_norm(g in gradient()) {
        prop_assume!(l2_norm(&g) > 1e-12);
        let unit = normalize(&g).unwrap();
        prop_assert!((l2_norm(&unit) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn shaped_norm_agrees_with_materialized_power_shape(
        g in gradient(),
        alpha in 0.1f64..3.0,
    ) {
        let direct = shaped_norm(&g, alpha).unwrap();
        let via_vector = l2_norm(&power_shape(&g, alpha).unwrap());
        let scale = direct.abs().max(via_vector.abs()).max(1e-300);
        prop_assert!((direct - via_vector).abs() <= 1e-12 * scale);
    }

    #[test]
    fn ema_stays_within_observed_hull(
        beta in 0.0f64..0.999,
        observations in vec(-1e6f64..1e6, 1..40),
    ) {
        let mut tracker = EmaTracker::new(beta).unwrap();
        for &x in &observations {
            tracker = tracker.update(x).unwrap();
        }
        let lo = observations.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = observations.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let value = tracker.value().unwrap();
        let pad = 1e-9 * hi.abs().max(lo.abs()).max(1.0);
        prop_assert!(value >= lo - pad && value <= hi + pad,
            "EMA {value} escaped [{lo}, {hi}]");
    }

    #[test]
    fn quantile_is_an_observed_sample(
        samples in vec(0.0f64..1e6, 1..64),
        q in 0.0f64..=1.0,
    ) {
        let mut history = NormHistory::new(samples.len()).unwrap();
        for &s in &samples {
            history.push(s).unwrap();
        }
        let value = history.quantile(q).unwrap();
        prop_assert!(samples.contains(&value));
        // The median-style threshold never exceeds the maximum.
        prop_assert!(value <= samples.iter().cloned().fold(0.0, f64::max));
    }

    #[test]
    fn cdf_is_monotone_and_bounded(
        samples in vec(0.0f64..1e3, 1..64),
        r1 in 0.0f64..1e3,
        r2 in 0.0f64..1e3,
    ) {
        let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
        let at_lo = empirical_cdf(&samples, lo).unwrap();
        let at_hi = empirical_cdf(&samples, hi).unwrap();
        prop_assert!((0.0..=1.0).contains(&at_lo));
        prop_assert!(at_lo <= at_hi);
        let max = samples.iter().cloned().fold(0.0, f64::max);
        prop_assert_eq!(empirical_cdf(&samples, max).unwrap(), 1.0);
    }
}
