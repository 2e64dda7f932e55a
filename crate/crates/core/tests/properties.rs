use std::collections::BTreeMap;

use nalgebra::DMatrix;
use orbitlab::dynamics::{labels_to_rows, pseudo_inverse, rows_to_labels, spectral_apply, Dynamics, DynamicsConfig, TrainingTime};
use orbitlab::groups::{cyclic_rotation_group, orbit_augment, permutation_table, GroupAction, Geometry};
use orbitlab::kernels::{GramSystem, KernelEngine};
use orbitlab::metrics::transformed_inputs;
use orbitlab::tasks::{ising_generate, SpinDistribution, SplitTag};
use orbitlab::{Activation, LayerSpec, NetworkSpec, Shape};
use proptest::prelude::*;

const SIDE: usize = 5;

fn lattice_c4() -> GroupAction {
    cyclic_rotation_group(4, Geometry::SpinLattice { side: SIDE })
        .unwrap()
        .with_labels_like_inputs()
}

fn mlp() -> NetworkSpec {
    NetworkSpec::mlp(SIDE * SIDE, &[32, 32], SIDE * SIDE, Activation::Relu)
}

fn spins() -> impl Strategy<Value = Vec<f64>> {
    prop_oneof![
        prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { -1.0 }), SIDE * SIDE),
        prop::collection::vec(-20.0..20.0f64, SIDE * SIDE),
    ]
}

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Relu), Just(Activation::Erf)]
}

/// Augmented Ising set with its Gram system.
fn system(n: usize, seed: u64) -> (GroupAction, orbitlab::groups::AugmentedDataset, GramSystem) {
    let group = lattice_c4();
    let base = ising_generate(SIDE, n, seed, SpinDistribution::Uniform, SplitTag::Train);
    let aug = orbit_augment(&base, &group).unwrap();
    let perms = permutation_table(&aug, &group).unwrap();
    let gram = GramSystem::build(&KernelEngine::new(&mlp()).unwrap(), &aug.data.inputs, perms).unwrap();
    (group, aug, gram)
}

fn rel_commutator(f: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = f.nrows();
    (DMatrix::from_fn(n, n, |a, b| f[(perm[a], perm[b])]) - f).norm() / f.norm().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mlp_kernel_is_invariant(x in spins(), xp in spins(), act in activation(), depth in 1usize..4) {
        let spec = NetworkSpec::mlp(SIDE * SIDE, &vec![16; depth], 1, act);
        let engine = KernelEngine::new(&spec).unwrap();
        let group = lattice_c4();
        let base = engine.compute(&x, &xp).unwrap();
        for g in 1..4 {
            let moved = engine
                .compute(&group.rho_x[g].apply(&x).unwrap(), &group.rho_x[g].apply(&xp).unwrap())
                .unwrap();
            for (a, b) in [(&moved.ntk, &base.ntk), (&moved.nngp, &base.nngp)] {
                let (a, b) = (a[(0, 0)], b[(0, 0)]);
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn conv_kernel_transforms_by_relabeling(x in spins(), xp in spins(), act in activation()) {
        let conv = |c| LayerSpec::Conv { extent: vec![3, 3], channels: c };
        let spec = NetworkSpec::new(
            Shape::grid(vec![SIDE, SIDE], 1),
            vec![conv(4), LayerSpec::Nonlinearity(act), conv(1)],
        );
        let engine = KernelEngine::new(&spec).unwrap();
        let group = lattice_c4();
        let base = engine.compute(&x, &xp).unwrap();
        for g in 1..4 {
            let map = &group.rho_x[g];
            let src = map.position_source().unwrap();
            let moved = engine.compute(&map.apply(&x).unwrap(), &map.apply(&xp).unwrap()).unwrap();
            for (m, b) in [(&moved.ntk, &base.ntk), (&moved.nngp, &base.nngp)] {
                for i in 0..m.nrows() {
                    for j in 0..m.ncols() {
                        let want = b[(src[i], src[j])];
                        prop_assert!((m[(i, j)] - want).abs() <= 1e-12 * (1.0 + want.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn spec_validation_is_total(
        spatial in prop::collection::vec(1usize..6, 0..3),
        channels in 1usize..4,
        layers in prop::collection::vec(
            prop_oneof![
                (1usize..8).prop_map(LayerSpec::Dense),
                Just(LayerSpec::Nonlinearity(Activation::Relu)),
                Just(LayerSpec::Flatten),
                Just(LayerSpec::GlobalAggregation),
                ((0usize..3), 1usize..4).prop_map(|(e, c)| LayerSpec::Conv { extent: vec![2 * e + 1; 2], channels: c }),
            ],
            0..6,
        ),
    ) {
        let spec = NetworkSpec::new(Shape::grid(spatial, channels), layers);
        if spec.validate().is_ok() {
            // accepted specs must work downstream without shape errors
            let engine = KernelEngine::new(&spec).unwrap();
            let net = orbitlab::ensemble::Network::new(&spec).unwrap();
            let x: Vec<f64> = (0..spec.input.len()).map(|i| (i as f64 * 0.37).sin()).collect();
            engine.compute(&x, &x).unwrap();
            let out = net.forward(&net.init(1), &DMatrix::from_column_slice(x.len(), 1, &x)).unwrap();
            prop_assert_eq!(out.nrows(), spec.output_shape().unwrap().len());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn gram_is_symmetric_and_commutes(seed in 0u64..1_000, n in 2usize..8, eta in 0.1..4.0f64, t in 1e-3..1e3f64) {
        let (_, _, gram) = system(n, seed);
        prop_assert!(gram.ntk == gram.ntk.transpose());
        prop_assert!(gram.nngp == gram.nngp.transpose());
        let dynm = Dynamics::new(&gram, DynamicsConfig::new(eta, TrainingTime::Finite(t)).unwrap()).unwrap();
        let family = [
            gram.ntk.clone(),
            &gram.ntk * &gram.ntk,
            pseudo_inverse(&gram),
            &gram.nngp * pseudo_inverse(&gram),
            &gram.nngp * dynm.filter(),
            spectral_apply(&gram, |l| (-eta * l * t).exp()),
        ];
        for f in &family {
            for perm in &gram.permutations {
                prop_assert!(rel_commutator(f, perm) <= 1e-8);
            }
        }
        for perm in &gram.permutations {
            prop_assert!(rel_commutator(&gram.ntk, perm) <= 1e-10);
        }
    }

    #[test]
    fn exact_mean_and_variance_are_equivariant(
        seed in 0u64..1_000,
        x in spins(),
        steps in prop_oneof![Just(0u64), Just(10u64), Just(1000u64)],
        infinite in prop::bool::weighted(0.25),
    ) {
        let (group, aug, gram) = system(6, seed);
        let engine = KernelEngine::new(&mlp()).unwrap();
        let n = aug.len();
        let eta = 1.0;
        let cfg = if infinite {
            DynamicsConfig::new(eta, TrainingTime::Infinite).unwrap()
        } else {
            DynamicsConfig::after_gd_steps(eta, steps, n).unwrap()
        };
        let dynm = Dynamics::new(&gram, cfg).unwrap();
        let batch = transformed_inputs(&DMatrix::from_column_slice(x.len(), 1, &x), &group.rho_x[1..]).unwrap();
        let (k_test, theta_test) = engine.cross(&batch, &aug.data.inputs).unwrap();
        let y = labels_to_rows(&aug.data.labels, 1);
        let mu = rows_to_labels(&dynm.mean(&y, &theta_test).unwrap(), 1);
        let k_self: Vec<f64> = (0..4).map(|c| engine.compute(batch.column(c).as_slice(), batch.column(c).as_slice()).unwrap().nngp[(0, 0)]).collect();
        let cov = dynm.covariance(&DMatrix::from_fn(4, 4, |a, b| engine.compute(batch.column(a).as_slice(), batch.column(b).as_slice()).unwrap().nngp[(0, 0)]), &theta_test, &k_test, &theta_test, &k_test).unwrap();
        let base = mu.column(0);
        for g in 1..4 {
            let want = group.rho_y[g].apply(base.as_slice()).unwrap();
            let diff = mu.column(g).iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(diff <= 1e-8 * (1.0 + base.norm()), "mean residual {}", diff);
            // Sigma(g x, g x') for x' = h x depends only on g^-1 h
            for h in 0..4 {
                let moved = cov[(g, group.compose(g, h))];
                let orig = cov[(0, h)];
                prop_assert!((moved - orig).abs() <= 1e-8 * orig.abs().max(k_self[0]));
            }
        }
    }

    #[test]
    fn training_residual_is_monotone_in_time(seed in 0u64..1_000, n in 2usize..6) {
        let (_, aug, gram) = system(n, seed);
        let y = labels_to_rows(&aug.data.labels, 1);
        let mut last = vec![f64::INFINITY; aug.len()];
        let times: Vec<TrainingTime> = (-3..=4)
            .map(|e| TrainingTime::Finite(10f64.powi(e)))
            .chain([TrainingTime::Infinite])
            .collect();
        for t in times {
            let dynm = Dynamics::new(&gram, DynamicsConfig::new(1.0, t).unwrap()).unwrap();
            let mu = dynm.mean(&y, &gram.ntk).unwrap();
            for i in 0..aug.len() {
                let r = (mu.row(i) - y.row(i)).norm();
                prop_assert!(r <= last[i] * (1.0 + 1e-9) + 1e-9, "point {} at t={}: {} > {}", i, t, r, last[i]);
                last[i] = r;
            }
        }
    }
}

#[test]
fn infinite_time_filter_inverts_ntk_on_its_range() {
    let (_, _, gram) = system(8, 3);
    let dynm = Dynamics::new(&gram, DynamicsConfig::new(0.7, TrainingTime::Infinite).unwrap()).unwrap();
    // Theta * A is the projector onto the non-null eigenspace
    let product = &gram.ntk * dynm.filter();
    let threshold = gram.eigenvalues[0] * gram.len() as f64 * f64::EPSILON * 16.0;
    for (j, &l) in gram.eigenvalues.iter().enumerate() {
        let v = gram.eigenvectors.column(j);
        let image = &product * v;
        let want = if l > threshold { v.clone_owned() } else { v * 0.0 };
        assert!((image - want).norm() <= 1e-10, "eigenvalue {l}");
    }
}

#[test]
fn permutation_tables_form_a_representation() {
    for (k, geometry) in [
        (2, Geometry::SpinLattice { side: 4 }),
        (4, Geometry::SpinLattice { side: 5 }),
        (4, Geometry::PixelGrid { side: 6 }),
    ] {
        let group = cyclic_rotation_group(k, geometry).unwrap();
        group.check_axioms().unwrap();
        let side = match geometry {
            Geometry::SpinLattice { side } | Geometry::PixelGrid { side } => side,
            Geometry::PlanarVector => unreachable!(),
        };
        let base = ising_generate(side, 5, 9, SpinDistribution::Uniform, SplitTag::Train);
        let aug = orbit_augment(&base, &group).unwrap();
        let table = permutation_table(&aug, &group).unwrap();
        for g in 0..k {
            let inv = group.inverse(g);
            for j in 0..aug.len() {
                // transpose: Pi(g)^T = Pi(g^-1)
                assert_eq!(table[inv][table[g][j]], j);
                for h in 0..k {
                    assert_eq!(table[g][table[h][j]], table[group.compose(g, h)][j]);
                }
            }
        }
    }
}

fn multiset(m: &DMatrix<f64>) -> BTreeMap<Vec<u64>, usize> {
    let mut out = BTreeMap::new();
    for c in m.column_iter() {
        *out.entry(c.iter().map(|v| v.to_bits()).collect()).or_insert(0) += 1;
    }
    out
}

#[test]
fn reaugmenting_only_repeats_orbits() {
    let group = lattice_c4();
    let base = ising_generate(SIDE, 6, 21, SpinDistribution::Gaussian { mean: 0.0, variance: 1.0 }, SplitTag::Train);
    let once = orbit_augment(&base, &group).unwrap();
    let twice = orbit_augment(&once.data, &group).unwrap();
    let mut expected = multiset(&once.data.inputs);
    expected.values_mut().for_each(|c| *c *= group.order());
    assert_eq!(multiset(&twice.data.inputs), expected);
    let mut expected = multiset(&once.data.labels);
    expected.values_mut().for_each(|c| *c *= group.order());
    assert_eq!(multiset(&twice.data.labels), expected);
}
