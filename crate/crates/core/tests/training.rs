use nalgebra::DMatrix;
use orbitlab::dynamics::{labels_to_rows, rows_to_labels, Dynamics, DynamicsConfig, TrainingTime};
use orbitlab::ensemble::{ensemble_mean, train_ensemble, EnsembleConfig, EvalSet, Network, Readout};
use orbitlab::groups::{cyclic_rotation_group, orbit_augment, permutation_table, AugmentedDataset, Geometry, GroupAction};
use orbitlab::kernels::{GramSystem, KernelEngine};
use orbitlab::metrics::{median, orbit_rsd, transformed_inputs};
use orbitlab::tasks::{ising_generate, SpinDistribution, SplitTag};
use orbitlab::{Activation, NetworkSpec};

fn lattice() -> GroupAction {
    cyclic_rotation_group(4, Geometry::SpinLattice { side: 5 })
        .unwrap()
        .with_labels_like_inputs()
}

fn augmented(n: usize, seed: u64) -> AugmentedDataset {
    let base = ising_generate(5, n, seed, SpinDistribution::Uniform, SplitTag::Train);
    orbit_augment(&base, &lattice()).unwrap()
}

#[test]
fn gd_steps_map_to_flow_time_eta_steps_over_n() {
    let spec = NetworkSpec::mlp(25, &[4096], 25, Activation::Relu);
    let aug = augmented(4, 1);
    let group = lattice();
    let perms = permutation_table(&aug, &group).unwrap();
    let engine = KernelEngine::new(&spec).unwrap();
    let gram = GramSystem::build(&engine, &aug.data.inputs, perms).unwrap();
    let test = ising_generate(5, 8, 2, SpinDistribution::Uniform, SplitTag::Test);
    let (_, theta_test) = engine.cross(&test.inputs, &aug.data.inputs).unwrap();
    let (eta, steps) = (0.5, 40);
    let n = aug.len();
    let y = labels_to_rows(&aug.data.labels, 1);

    let net = Network::new(&spec).unwrap();
    let mut member = net.init(3);
    let f0_train = labels_to_rows(&net.forward(&member, &aug.data.inputs).unwrap(), 1);
    let f0_test = labels_to_rows(&net.forward(&member, &test.inputs).unwrap(), 1);
    net.train_full_batch(&mut member, &aug.data.inputs, &aug.data.labels, eta, steps, &[], |_, _| {})
        .unwrap();
    let trained = net.forward(&member, &test.inputs).unwrap();

    let predict = |t: f64| {
        let d = Dynamics::new(&gram, DynamicsConfig::new(eta, TrainingTime::Finite(t)).unwrap()).unwrap();
        rows_to_labels(&d.linearized_member(&y, &f0_train, &f0_test, &theta_test).unwrap(), 1)
    };
    // error relative to how far training moved the outputs
    let moved = rows_to_labels(&f0_test, 1);
    let err = |t: f64| (predict(t) - &trained).norm() / (&trained - &moved).norm();
    let ours = err(steps as f64 / n as f64);
    let doubled = err(2.0 * steps as f64 / n as f64);
    println!("eta*steps/N: {ours:.4}, 2*eta*steps/N: {doubled:.4}");
    assert!(ours < 0.1, "eta*steps/N: {ours}");
    assert!(ours * 3.0 < doubled, "eta*steps/N: {ours}, 2*eta*steps/N: {doubled}");
    let via_steps = DynamicsConfig::after_gd_steps(eta, steps, n).unwrap();
    assert_eq!(via_steps.time, TrainingTime::Finite(steps as f64 / n as f64));
}

fn orbit_energies(preds: &DMatrix<f64>, order: usize) -> Vec<f64> {
    orbit_rsd(Readout::IsingEnergy.apply(preds).row(0).transpose().as_slice(), order, 2.0).unwrap()
}

#[test]
fn members_are_less_equivariant_than_their_mean() {
    let aug = augmented(16, 4);
    let group = lattice();
    let spec = NetworkSpec::mlp(25, &[512], 25, Activation::Relu);
    let ood = ising_generate(5, 16, 5, SpinDistribution::Gaussian { mean: 0.0, variance: 400.0 }, SplitTag::Ood);
    let batch = transformed_inputs(&ood.inputs, &group.rho_x[1..]).unwrap();
    let cfg = EnsembleConfig {
        width: 512,
        members: 24,
        eta: 2.0,
        steps: 100,
        checkpoints: vec![100],
        seed: 6,
        readout: Readout::Outputs,
    };
    let run = train_ensemble(&spec, &cfg, &aug.data.inputs, &aug.data.labels, &[EvalSet { tag: SplitTag::Ood, inputs: batch }]).unwrap();
    let members = run.members(100, SplitTag::Ood).unwrap();
    let mean_rsd = median(&orbit_energies(&ensemble_mean(members), 4));
    for (i, m) in members.iter().enumerate() {
        let member_rsd = median(&orbit_energies(m, 4));
        assert!(member_rsd > mean_rsd, "member {i}: {member_rsd} <= {mean_rsd}");
    }
}

#[test]
fn ensemble_mean_fluctuation_shrinks_like_inverse_sqrt_m() {
    // Monte Carlo part of the ensemble gap: distance of an M-member mean to
    // a disjoint 4000-member reference at the same width.
    let aug = augmented(4, 8);
    let spec = NetworkSpec::mlp(25, &[32], 25, Activation::Relu);
    let test = ising_generate(5, 8, 9, SpinDistribution::Uniform, SplitTag::Test);
    let cfg = EnsembleConfig {
        width: 32,
        members: 5000,
        eta: 1.0,
        steps: 20,
        checkpoints: vec![20],
        seed: 10,
        readout: Readout::IsingEnergy,
    };
    let run = train_ensemble(&spec, &cfg, &aug.data.inputs, &aug.data.labels, &[EvalSet { tag: SplitTag::Test, inputs: test.inputs }]).unwrap();
    let all = run.members(20, SplitTag::Test).unwrap();
    let reference = ensemble_mean(&all[1000..]);
    let gap = |m: usize| {
        let d = ensemble_mean(&all[..m]) - &reference;
        median(&d.iter().map(|v| v.abs()).collect::<Vec<_>>())
    };
    let (g100, g1000) = (gap(100), gap(1000));
    let ratio = g100 / g1000;
    let ideal = 10f64.sqrt();
    assert!(ratio > ideal / 3.0 && ratio < ideal * 3.0, "gap(100) {g100}, gap(1000) {g1000}, ratio {ratio}");
}

#[test]
fn ensemble_predictions_do_not_depend_on_thread_count() {
    let aug = augmented(4, 11);
    let spec = NetworkSpec::mlp(25, &[48], 25, Activation::Relu);
    let cfg = EnsembleConfig {
        width: 48,
        members: 16,
        eta: 1.0,
        steps: 30,
        checkpoints: vec![0, 15, 30],
        seed: 12,
        readout: Readout::Outputs,
    };
    let evals = [EvalSet {
        tag: SplitTag::Test,
        inputs: ising_generate(5, 6, 13, SpinDistribution::Uniform, SplitTag::Test).inputs,
    }];
    let run_with = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| train_ensemble(&spec, &cfg, &aug.data.inputs, &aug.data.labels, &evals).unwrap())
    };
    assert_eq!(run_with(1), run_with(4));
}
