use orbitlab::metrics::{deviation_probability_bound, ensemble_size_bound, MetricsError, SizeBound};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

// Frozen from 40-digit evaluations of the closed forms.
const THRESHOLD_1_01_005: f64 = 484.673_466_125_858_181_3;
const BOUND_AT: [(f64, f64); 3] = [
    (1.0, 0.483_941_449_038_286_699_6),
    (2.0, 0.053_990_966_513_188_051_95),
    (3.0, 0.002_954_565_607_958_671_450),
];
// Two-sided normal tails P[|Z| > r], the quantity the bound dominates.
const TAIL_AT: [f64; 3] = [0.317_310_507_862_914_1, 0.045_500_263_896_358_41, 0.002_699_796_063_260_189];

#[test]
fn closed_form_matches_high_precision_threshold() {
    let threshold = -(2.0 / 0.01) * (std::f64::consts::PI.sqrt() * 0.05f64).ln();
    assert!((threshold - THRESHOLD_1_01_005).abs() < 1e-10);
    let b = ensemble_size_bound(1.0, 0.1, 0.05).unwrap();
    assert_eq!(b.closed_form, 485);
    assert_eq!(b.implicit, 413);
}

#[test]
fn frozen_size_bounds() {
    for (s2, d, e, closed, implicit) in [(2.0, 0.5, 0.01, 65, 55), (0.5, 0.05, 0.1, 693, 609), (10.0, 1.0, 0.2, 21, 21)] {
        assert_eq!(ensemble_size_bound(s2, d, e).unwrap(), SizeBound { closed_form: closed, implicit }, "({s2}, {d}, {e})");
    }
    assert_eq!(ensemble_size_bound(0.0, 0.1, 0.05).unwrap(), SizeBound { closed_form: 1, implicit: 1 });
}

#[test]
fn size_bound_rejects_invalid_arguments() {
    assert_eq!(ensemble_size_bound(1.0, 0.1, 0.0), Err(MetricsError::Epsilon(0.0)));
    assert!(matches!(ensemble_size_bound(1.0, 0.1, 0.6), Err(MetricsError::Epsilon(_))));
    assert!(matches!(ensemble_size_bound(1.0, 0.0, 0.05), Err(MetricsError::Delta(_))));
    assert!(matches!(ensemble_size_bound(-1.0, 0.1, 0.05), Err(MetricsError::Variance(_))));
}

#[test]
fn deviation_bound_values_and_dominance() {
    for (i, (r, want)) in BOUND_AT.into_iter().enumerate() {
        let got = deviation_probability_bound(0.7, 0.7 * r);
        assert!((got - want).abs() < 1e-15, "r={r}: {got}");
        assert!(got >= TAIL_AT[i]);
    }
    assert_eq!(deviation_probability_bound(0.0, 1.0), 0.0);
    assert_eq!(deviation_probability_bound(1.0, 0.01), 1.0);
}

#[test]
fn deviation_bound_holds_for_simulated_means() {
    // means of M Gaussian members deviate with sigma / sqrt(M)
    let (sigma, members, draws) = (1.3, 25, 100_000);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let means: Vec<f64> = (0..draws)
        .map(|_| (0..members).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); sigma * z }).sum::<f64>() / members as f64)
        .collect();
    let s = sigma / (members as f64).sqrt();
    for r in [1.0, 2.0, 3.0] {
        let freq = means.iter().filter(|m| m.abs() > r * s).count() as f64 / draws as f64;
        let bound = deviation_probability_bound(s, r * s);
        let se = (bound * (1.0 - bound) / draws as f64).sqrt();
        assert!(freq <= bound + 3.0 * se, "r={r}: {freq} vs {bound}");
    }
}

#[test]
fn implicit_never_exceeds_closed_form() {
    for s2 in [0.1, 1.0, 10.0] {
        for d in [0.05, 0.1, 0.5] {
            for e in [0.01, 0.05, 0.1] {
                let b = ensemble_size_bound(s2, d, e).unwrap();
                assert!(b.implicit <= b.closed_form, "({s2}, {d}, {e}): {b:?}");
                // implicit is the smallest size that meets the target
                let at = |m: u64| deviation_probability_bound((s2 / m as f64).sqrt(), d);
                assert!(at(b.implicit) <= e);
                assert!(b.implicit == 1 || at(b.implicit - 1) > e);
            }
        }
    }
}
