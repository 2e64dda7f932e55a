//! Property suites for the group-theoretic identities the library relies
//! on, runnable as one command.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::dynamics::{labels_to_rows, pseudo_inverse, rows_to_labels, spectral_apply, Dynamics, DynamicsConfig, TrainingTime};
use crate::ensemble::{derive_seed, Readout};
use crate::groups::{cyclic_rotation_group, orbit_augment, permutation_table, GroupAction, Geometry};
use crate::kernels::{ConvPadding, GramSystem, KernelEngine};
use crate::metrics::{deviation_probability_bound, ensemble_size_bound, orbit_rsd, transformed_inputs};
use crate::netspec::{Activation, LayerSpec, NetworkSpec, Shape};
use crate::tasks::{ising_generate, SpinDistribution, SplitTag};

const SIDE: usize = 5;

#[derive(Debug, Clone)]
pub struct VerifySettings {
    pub seed: u64,
    /// Random input pairs per spec in the kernel-transformation suite.
    pub pairs: usize,
    /// Base samples in the augmented Gram (times the group order).
    pub gram_samples: usize,
    /// Base points per evaluation set.
    pub eval_samples: usize,
    /// Simulated ensemble means per deviation-bound check.
    pub mc_draws: usize,
    /// Convolution boundary handling; anything but circular is a negative
    /// control.
    pub padding: ConvPadding,
}

impl Default for VerifySettings {
    fn default() -> Self {
        VerifySettings {
            seed: 0,
            pairs: 50,
            gram_samples: 32,
            eval_samples: 16,
            mc_draws: 100_000,
            padding: ConvPadding::Circular,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyResult {
    pub name: String,
    pub max_residual: f64,
    pub threshold: f64,
    pub passed: bool,
    /// Seed reproducing the worst instance.
    pub seed: u64,
    pub worst_instance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<48} {:>12} {:>10}  result\n", "property", "max residual", "threshold");
        for p in &self.properties {
            s += &format!(
                "{:<48} {:>12.3e} {:>10.1e}  {}\n",
                p.name,
                p.max_residual,
                p.threshold,
                if p.passed { "pass" } else { "FAIL" }
            );
            if !p.passed {
                s += &format!("    worst instance: {} (seed {})\n", p.worst_instance, p.seed);
            }
        }
        s
    }
}

/// Running maximum of a residual with the instance that produced it.
struct Worst {
    residual: f64,
    seed: u64,
    instance: String,
}

impl Worst {
    fn new() -> Self {
        Worst {
            residual: 0.0,
            seed: 0,
            instance: String::from("none"),
        }
    }

    fn update(&mut self, residual: f64, seed: u64, instance: impl FnOnce() -> String) {
        // NaN must surface as a failure
        if residual.is_nan() || residual > self.residual {
            self.residual = if residual.is_nan() { f64::INFINITY } else { residual };
            self.seed = seed;
            self.instance = instance();
        }
    }

    fn finish(self, name: &str, threshold: f64) -> PropertyResult {
        PropertyResult {
            name: name.to_string(),
            passed: self.residual <= threshold,
            max_residual: self.residual,
            threshold,
            seed: self.seed,
            worst_instance: self.instance,
        }
    }
}

/// Specs exercised by the kernel-transformation suite, with thresholds.
pub fn lattice_specs() -> Vec<(&'static str, NetworkSpec, f64)> {
    let grid = Shape::grid(vec![SIDE, SIDE], 1);
    let conv = |c| LayerSpec::Conv {
        extent: vec![3, 3],
        channels: c,
    };
    let relu = LayerSpec::Nonlinearity(Activation::Relu);
    vec![
        ("mlp-relu-3", NetworkSpec::mlp(SIDE * SIDE, &[64, 64, 64], 1, Activation::Relu), 1e-12),
        ("mlp-erf-2", NetworkSpec::mlp(SIDE * SIDE, &[64, 64], 1, Activation::Erf), 1e-12),
        (
            "conv-relu-3",
            NetworkSpec::new(grid.clone(), vec![conv(8), relu.clone(), conv(8), relu.clone(), conv(1)]),
            1e-10,
        ),
        (
            "conv-flatten",
            NetworkSpec::new(grid, vec![conv(8), relu, LayerSpec::Flatten, LayerSpec::Dense(1)]),
            1e-10,
        ),
    ]
}

fn lattice_group() -> GroupAction {
    cyclic_rotation_group(4, Geometry::SpinLattice { side: SIDE })
        .expect("C4 acts on the lattice")
        .with_labels_like_inputs()
}

fn random_configuration(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if rng.random::<bool>() {
        (0..SIDE * SIDE).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    } else {
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        (0..SIDE * SIDE).map(|_| n.sample(&mut rng)).collect()
    }
}

/// `max_g |Theta(g x, g x')[a,b] - Theta(x, x')[src a, src b]| / (1 + |Theta|)`
/// over random pairs, for both kernels.
pub fn kernel_transformation(settings: &VerifySettings) -> Result<Vec<PropertyResult>, String> {
    let group = lattice_group();
    let mut out = Vec::new();
    for (si, (name, spec, threshold)) in lattice_specs().into_iter().enumerate() {
        let engine = KernelEngine::with_padding(&spec, settings.padding).map_err(|e| e.to_string())?;
        let mut worst = Worst::new();
        for pair in 0..settings.pairs {
            let seed = derive_seed(settings.seed, &[1, si as u64, pair as u64]);
            let x = random_configuration(seed);
            let xp = random_configuration(seed ^ 0x9e37_79b9_7f4a_7c15);
            let base = engine.compute(&x, &xp).map_err(|e| e.to_string())?;
            for g in 1..group.order() {
                let map = &group.rho_x[g];
                let gx = map.apply(&x).map_err(|e| e.to_string())?;
                let gxp = map.apply(&xp).map_err(|e| e.to_string())?;
                let moved = engine.compute(&gx, &gxp).map_err(|e| e.to_string())?;
                let src = map.position_source().expect("lattice rotations permute sites");
                let spatial = base.ntk.nrows() > 1;
                let relabel = |k: &DMatrix<f64>, a: usize, b: usize| if spatial { k[(src[a], src[b])] } else { k[(a, b)] };
                for (kind, m, b) in [("ntk", &moved.ntk, &base.ntk), ("nngp", &moved.nngp, &base.nngp)] {
                    for a in 0..m.nrows() {
                        for c in 0..m.ncols() {
                            let want = relabel(b, a, c);
                            let r = (m[(a, c)] - want).abs() / (1.0 + want.abs());
                            worst.update(r, seed, || format!("{name} pair {pair} element {g} {kind}[{a},{c}]"));
                        }
                    }
                }
            }
        }
        out.push(worst.finish(&format!("kernel transformation ({name})"), threshold));
    }
    Ok(out)
}

/// Augmented Ising Gram used by the commutation and equivariance suites.
pub fn lattice_gram(settings: &VerifySettings) -> Result<(NetworkSpec, GroupAction, crate::groups::AugmentedDataset, GramSystem), String> {
    let spec = NetworkSpec::mlp(SIDE * SIDE, &[64, 64], SIDE * SIDE, Activation::Relu);
    let group = lattice_group();
    let base = ising_generate(
        SIDE,
        settings.gram_samples,
        derive_seed(settings.seed, &[2]),
        SpinDistribution::Uniform,
        SplitTag::Train,
    );
    let aug = orbit_augment(&base, &group).map_err(|e| e.to_string())?;
    let perms = permutation_table(&aug, &group).map_err(|e| e.to_string())?;
    let engine = KernelEngine::with_padding(&spec, settings.padding).map_err(|e| e.to_string())?;
    let gram = GramSystem::build(&engine, &aug.data.inputs, perms).map_err(|e| e.to_string())?;
    Ok((spec, group, aug, gram))
}

/// `|F[p, p] - F|_F / |F|_F` for a permutation table `p`.
pub fn commutator_residual(f: &DMatrix<f64>, perm: &[usize]) -> f64 {
    let n = f.nrows();
    let moved = DMatrix::from_fn(n, n, |a, b| f[(perm[a], perm[b])]);
    (moved - f).norm() / f.norm()
}

pub fn permutation_commutation(settings: &VerifySettings) -> Result<PropertyResult, String> {
    let (_, _, _, gram) = lattice_gram(settings)?;
    let (eta, t) = (1.0, 1.0);
    let cfg = DynamicsConfig::new(eta, TrainingTime::Finite(t)).map_err(|e| e.to_string())?;
    let dynm = Dynamics::new(&gram, cfg).map_err(|e| e.to_string())?;
    let functions: Vec<(&str, DMatrix<f64>)> = vec![
        ("ntk", gram.ntk.clone()),
        ("ntk^2", &gram.ntk * &gram.ntk),
        ("pseudo-inverse", pseudo_inverse(&gram)),
        ("nngp * filter", &gram.nngp * dynm.filter()),
        ("exp(-eta ntk t)", spectral_apply(&gram, |l| (-eta * l * t).exp())),
    ];
    let mut worst = Worst::new();
    for (name, f) in &functions {
        for (g, perm) in gram.permutations.iter().enumerate() {
            worst.update(commutator_residual(f, perm), derive_seed(settings.seed, &[2]), || {
                format!("{name}, element {g}")
            });
        }
    }
    Ok(worst.finish("permutation commutation", 1e-8))
}

/// Mean and covariance equivariance of the exact ensemble on orbit batches.
pub fn mean_covariance_equivariance(settings: &VerifySettings) -> Result<Vec<PropertyResult>, String> {
    let (spec, group, aug, gram) = lattice_gram(settings)?;
    let engine = KernelEngine::with_padding(&spec, settings.padding).map_err(|e| e.to_string())?;
    let y = labels_to_rows(&aug.data.labels, 1);
    let n = settings.eval_samples;
    let sets = [
        (SplitTag::Train, aug.data.select(&(0..n.min(settings.gram_samples)).map(|i| aug.index(i, 0)).collect::<Vec<_>>())),
        (
            SplitTag::Test,
            ising_generate(SIDE, n, derive_seed(settings.seed, &[3]), SpinDistribution::Uniform, SplitTag::Test),
        ),
        (
            SplitTag::Ood,
            ising_generate(
                SIDE,
                n,
                derive_seed(settings.seed, &[4]),
                SpinDistribution::Gaussian {
                    mean: 0.0,
                    variance: 400.0,
                },
                SplitTag::Ood,
            ),
        ),
    ];
    let times = [
        TrainingTime::Finite(1e-3),
        TrainingTime::Finite(1.0),
        TrainingTime::Finite(100.0),
        TrainingTime::Infinite,
    ];
    let k = group.order();
    let mut mean_worst = Worst::new();
    let mut rsd_worst = Worst::new();
    let mut cov_worst = Worst::new();
    for (tag, data) in &sets {
        let batch = transformed_inputs(&data.inputs, &group.rho_x[1..]).map_err(|e| e.to_string())?;
        let (k_test, theta_test) = engine.cross(&batch, &aug.data.inputs).map_err(|e| e.to_string())?;
        let k_self: Vec<f64> = (0..batch.ncols())
            .map(|c| {
                let x = batch.column(c);
                engine.compute(x.as_slice(), x.as_slice()).map(|p| p.nngp[(0, 0)])
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for &t in &times {
            let dynm = Dynamics::new(&gram, DynamicsConfig { eta: 1.0, time: t }).map_err(|e| e.to_string())?;
            let mu = rows_to_labels(&dynm.mean(&y, &theta_test).map_err(|e| e.to_string())?, 1);
            let var = dynm.variance(&k_self, &theta_test, &k_test).map_err(|e| e.to_string())?;
            let seed = settings.seed;
            for i in 0..data.len() {
                let base_mu = mu.column(i * k);
                let base_var = var[i * k];
                for h in 1..k {
                    let want = group.rho_y[h].apply(base_mu.as_slice()).map_err(|e| e.to_string())?;
                    let got = mu.column(i * k + h);
                    let diff = got.iter().zip(&want).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                    mean_worst.update(diff / (1.0 + base_mu.norm()), seed, || format!("{tag} point {i} element {h} t={t}"));
                    let dv = (var[i * k + h] - base_var).abs();
                    let scale = base_var.abs().max(k_self[i * k]);
                    cov_worst.update(dv / scale, seed, || format!("{tag} point {i} element {h} t={t}"));
                }
            }
            let energy = Readout::IsingEnergy.apply(&mu);
            let rsd = orbit_rsd(energy.row(0).transpose().as_slice(), k, 2.0).map_err(|e| e.to_string())?;
            for (i, r) in rsd.iter().enumerate() {
                rsd_worst.update(*r, seed, || format!("{tag} point {i} t={t}"));
            }
        }
    }
    Ok(vec![
        mean_worst.finish("mean equivariance", 1e-8),
        rsd_worst.finish("orbit RSD of the exact mean", 1e-8),
        cov_worst.finish("covariance equivariance", 1e-8),
    ])
}

/// Closed-form constant, simulated deviation frequencies and the
/// implicit/closed-form ordering.
pub fn bound_validation(settings: &VerifySettings) -> Vec<PropertyResult> {
    let mut out = Vec::new();
    let closed = ensemble_size_bound(1.0, 0.1, 0.05).map(|b| b.closed_form);
    out.push(PropertyResult {
        name: "ensemble size bound (1, 0.1, 0.05) = 485".into(),
        max_residual: closed.as_ref().map(|m| (*m as f64 - 485.0).abs()).unwrap_or(f64::INFINITY),
        threshold: 0.0,
        passed: matches!(closed, Ok(485)),
        seed: 0,
        worst_instance: format!("{closed:?}"),
    });

    let mut worst = Worst::new();
    let unit: Normal<f64> = Normal::new(0.0, 1.0).expect("unit normal");
    for (j, ratio) in [1.0, 2.0, 3.0].into_iter().enumerate() {
        let seed = derive_seed(settings.seed, &[5, j as u64]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma: f64 = 0.7;
        let delta = ratio * sigma;
        let hits = (0..settings.mc_draws)
            .filter(|_| (sigma * unit.sample(&mut rng)).abs() > delta)
            .count();
        let p = hits as f64 / settings.mc_draws as f64;
        let bound = deviation_probability_bound(sigma, delta);
        let se = (bound * (1.0 - bound) / settings.mc_draws as f64).sqrt().max(1e-12);
        worst.update((p - bound) / se, seed, || format!("delta/sigma = {ratio}: frequency {p}, bound {bound}"));
    }
    out.push(worst.finish("deviation bound vs simulation (standard errors)", 3.0));

    let mut worst = Worst::new();
    for s2 in [0.1, 1.0, 10.0] {
        for delta in [0.05, 0.1, 0.5] {
            for eps in [0.01, 0.05, 0.1] {
                if let Ok(b) = ensemble_size_bound(s2, delta, eps) {
                    let excess = b.implicit as f64 - b.closed_form as f64;
                    worst.update(excess.max(0.0), 0, || format!("sigma2 {s2}, delta {delta}, eps {eps}: {b:?}"));
                } else {
                    worst.update(f64::INFINITY, 0, || format!("sigma2 {s2}, delta {delta}, eps {eps}: rejected"));
                }
            }
        }
    }
    out.push(worst.finish("implicit bound <= closed form", 0.0));
    out
}

pub fn verify_suite(settings: &VerifySettings) -> Result<VerifyReport, String> {
    let mut properties = kernel_transformation(settings)?;
    properties.push(permutation_commutation(settings)?);
    properties.extend(mean_covariance_equivariance(settings)?);
    properties.extend(bound_validation(settings));
    Ok(VerifyReport { properties })
}
