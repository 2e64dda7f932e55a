//! Finite-width networks in the NTK parametrization, full-batch gradient
//! descent, deep ensembles and the empirical NTK.
//!
//! Every weight is standard normal and each layer multiplies by
//! `1/sqrt(fan_in)` at evaluation time, so the empirical kernels converge
//! to the analytic ones in [`crate::kernels`] as width grows.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netspec::{Activation, LayerSpec, NetworkSpec, SpecError};
use crate::tasks::SplitTag;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("input batch has {found} features, network expects {expected}")]
    InputShape { expected: usize, found: usize },
    #[error("label batch is {found_rows}x{found_cols}, expected {expected_rows}x{expected_cols}")]
    LabelShape {
        expected_rows: usize,
        expected_cols: usize,
        found_rows: usize,
        found_cols: usize,
    },
    #[error(
        "member {member} diverged at step {step}: loss {loss:e} exceeds 1e6 x initial loss {initial:e}; \
         reduce the learning rate (currently {eta})"
    )]
    Diverged {
        member: usize,
        step: u64,
        loss: f64,
        initial: f64,
        eta: f64,
    },
    #[error("checkpoint {step} not recorded for {set}")]
    MissingCheckpoint { step: u64, set: SplitTag },
    #[error("checkpoint {step} is past the last step {steps}")]
    CheckpointRange { step: u64, steps: u64 },
}

/// Deterministic 64-bit seed from a root seed and a path of labels.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    for p in path {
        h.update(p.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

/// Seed of ensemble member `index` under `run_seed`.
pub fn member_seed(run_seed: u64, index: usize) -> u64 {
    derive_seed(run_seed, &[0x6d656d62, index as u64])
}

#[derive(Debug, Clone)]
enum NetLayer {
    Dense,
    Conv {
        shifts: Vec<Vec<usize>>,
        cin: usize,
        cout: usize,
    },
    Act(Activation),
    Flatten,
    Aggregate {
        neighborhoods: Vec<Vec<usize>>,
        channels: usize,
    },
}

/// A validated spec compiled into trainable layers.
#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    layers: Vec<NetLayer>,
    /// `(rows, cols, scale)` per parameterized layer, in layer order.
    weights: Vec<(usize, usize, f64)>,
    input_len: usize,
    output_len: usize,
}

fn shift_tables(spatial: &[usize], extent: &[usize]) -> Vec<Vec<usize>> {
    let positions: usize = spatial.iter().product();
    let support: usize = extent.iter().product();
    (0..support)
        .map(|s| {
            let mut rem = s;
            let mut offset = vec![0isize; extent.len()];
            for d in (0..extent.len()).rev() {
                offset[d] = (rem % extent[d]) as isize - (extent[d] / 2) as isize;
                rem /= extent[d];
            }
            (0..positions)
                .map(|a| {
                    let mut rem = a;
                    let mut coords = vec![0usize; spatial.len()];
                    for d in (0..spatial.len()).rev() {
                        coords[d] = rem % spatial[d];
                        rem /= spatial[d];
                    }
                    coords
                        .iter()
                        .zip(&offset)
                        .zip(spatial)
                        .fold(0, |idx, ((&c, &o), &n)| idx * n + (c as isize + o).rem_euclid(n as isize) as usize)
                })
                .collect()
        })
        .collect()
}

struct Cache {
    /// Input to each layer.
    inputs: Vec<DMatrix<f64>>,
    /// im2col patches (conv) or neighborhood sums (aggregation).
    extra: Vec<Option<DMatrix<f64>>>,
}

fn reshape(m: DMatrix<f64>, rows: usize, cols: usize) -> DMatrix<f64> {
    m.reshape_generic(Dyn(rows), Dyn(cols))
}

impl Network {
    pub fn new(spec: &NetworkSpec) -> Result<Self, EnsembleError> {
        let trace = spec.validate()?;
        let mut shape = spec.input.clone();
        let mut layers = Vec::new();
        let mut weights = Vec::new();
        for (layer, out) in spec.layers.iter().zip(&trace) {
            match layer {
                LayerSpec::Dense(w) => {
                    layers.push(NetLayer::Dense);
                    weights.push((*w, shape.len(), 1.0 / (shape.len() as f64).sqrt()));
                }
                LayerSpec::Conv { extent, channels } => {
                    let shifts = shift_tables(&shape.spatial, extent);
                    let fan = shifts.len() * shape.channels;
                    weights.push((*channels, fan, 1.0 / (fan as f64).sqrt()));
                    layers.push(NetLayer::Conv {
                        shifts,
                        cin: shape.channels,
                        cout: *channels,
                    });
                }
                LayerSpec::Nonlinearity(a) => layers.push(NetLayer::Act(*a)),
                LayerSpec::Flatten => layers.push(NetLayer::Flatten),
                LayerSpec::LocalAggregation(n) => {
                    let c = shape.channels;
                    weights.push((c, c, 1.0 / (c as f64).sqrt()));
                    layers.push(NetLayer::Aggregate {
                        neighborhoods: n.clone(),
                        channels: c,
                    });
                }
                LayerSpec::GlobalAggregation => {
                    let c = shape.channels;
                    let p = shape.positions();
                    weights.push((c, c, 1.0 / (c as f64).sqrt()));
                    layers.push(NetLayer::Aggregate {
                        neighborhoods: vec![(0..p).collect(); p],
                        channels: c,
                    });
                }
            }
            shape = out.clone();
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            weights,
            input_len: spec.input.len(),
            output_len: shape.len(),
        })
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.iter().map(|(r, c, _)| r * c).sum()
    }

    /// Standard-normal weights; layer `l` draws from stream `l` of a ChaCha8
    /// generator keyed by `seed`.
    pub fn init(&self, seed: u64) -> Member {
        let weights = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, &(r, c, _))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(l as u64);
                let vals: Vec<f64> = (0..r * c).map(|_| StandardNormal.sample(&mut rng)).collect();
                DMatrix::from_vec(r, c, vals)
            })
            .collect();
        Member {
            seed,
            steps: 0,
            weights,
        }
    }

    fn check_input(&self, x: &DMatrix<f64>) -> Result<(), EnsembleError> {
        if x.nrows() != self.input_len {
            return Err(EnsembleError::InputShape {
                expected: self.input_len,
                found: x.nrows(),
            });
        }
        Ok(())
    }

    fn run(&self, w: &[DMatrix<f64>], x: &DMatrix<f64>, mut cache: Option<&mut Cache>) -> DMatrix<f64> {
        let batch = x.ncols();
        let mut h = x.clone();
        let mut wi = 0;
        for layer in &self.layers {
            let mut extra = None;
            let next = match layer {
                NetLayer::Dense => {
                    let (_, _, s) = self.weights[wi];
                    let z = (&w[wi] * &h) * s;
                    wi += 1;
                    z
                }
                NetLayer::Conv { shifts, cin, cout } => {
                    let (_, _, s) = self.weights[wi];
                    let p = shifts[0].len();
                    let hv = reshape(h.clone(), *cin, p * batch);
                    let mut u = DMatrix::zeros(shifts.len() * cin, p * batch);
                    for b in 0..batch {
                        for a in 0..p {
                            let col = b * p + a;
                            for (si, t) in shifts.iter().enumerate() {
                                let src = b * p + t[a];
                                for c in 0..*cin {
                                    u[(si * cin + c, col)] = hv[(c, src)];
                                }
                            }
                        }
                    }
                    let z = (&w[wi] * &u) * s;
                    wi += 1;
                    extra = Some(u);
                    reshape(z, p * cout, batch)
                }
                NetLayer::Act(a) => h.map(|v| a.apply(v)),
                NetLayer::Flatten => h.clone(),
                NetLayer::Aggregate { neighborhoods, channels } => {
                    let (_, _, s) = self.weights[wi];
                    let p = neighborhoods.len();
                    let hv = reshape(h.clone(), *channels, p * batch);
                    let mut agg = DMatrix::zeros(*channels, p * batch);
                    for b in 0..batch {
                        for (a, nb) in neighborhoods.iter().enumerate() {
                            for &j in nb {
                                let mut dst = agg.column_mut(b * p + a);
                                dst += hv.column(b * p + j);
                            }
                        }
                    }
                    let z = (&w[wi] * &agg) * s;
                    wi += 1;
                    extra = Some(agg);
                    reshape(z, p * channels, batch)
                }
            };
            if let Some(c) = cache.as_deref_mut() {
                c.inputs.push(std::mem::replace(&mut h, next));
                c.extra.push(extra);
            } else {
                h = next;
            }
        }
        h
    }

    /// Outputs for a batch of inputs (one per column).
    pub fn forward(&self, member: &Member, x: &DMatrix<f64>) -> Result<DMatrix<f64>, EnsembleError> {
        self.check_input(x)?;
        Ok(self.run(&member.weights, x, None))
    }

    /// Weight gradients of `sum_b <seed_b, f(x_b)>`.
    fn backward(&self, w: &[DMatrix<f64>], cache: &Cache, seed: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let batch = seed.ncols();
        let mut grads: Vec<DMatrix<f64>> = Vec::with_capacity(w.len());
        let mut wi = w.len();
        let mut d = seed;
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let h = &cache.inputs[li];
            let first = li == 0;
            d = match layer {
                NetLayer::Dense => {
                    wi -= 1;
                    let (_, _, s) = self.weights[wi];
                    grads.push((&d * h.transpose()) * s);
                    if first {
                        break;
                    }
                    (w[wi].transpose() * &d) * s
                }
                NetLayer::Conv { shifts, cin, cout } => {
                    wi -= 1;
                    let (_, _, s) = self.weights[wi];
                    let p = shifts[0].len();
                    let u = cache.extra[li].as_ref().expect("conv patches cached");
                    let dz = reshape(d, *cout, p * batch);
                    grads.push((&dz * u.transpose()) * s);
                    if first {
                        break;
                    }
                    let du = (w[wi].transpose() * &dz) * s;
                    let mut dh = DMatrix::zeros(*cin, p * batch);
                    for b in 0..batch {
                        for a in 0..p {
                            let col = b * p + a;
                            for (si, t) in shifts.iter().enumerate() {
                                let dst = b * p + t[a];
                                for c in 0..*cin {
                                    dh[(c, dst)] += du[(si * cin + c, col)];
                                }
                            }
                        }
                    }
                    reshape(dh, p * cin, batch)
                }
                NetLayer::Act(a) => d.zip_map(h, |g, v| g * a.derivative(v)),
                NetLayer::Flatten => d,
                NetLayer::Aggregate { neighborhoods, channels } => {
                    wi -= 1;
                    let (_, _, s) = self.weights[wi];
                    let p = neighborhoods.len();
                    let agg = cache.extra[li].as_ref().expect("aggregates cached");
                    let dz = reshape(d, *channels, p * batch);
                    grads.push((&dz * agg.transpose()) * s);
                    if first {
                        break;
                    }
                    let dagg = (w[wi].transpose() * &dz) * s;
                    let mut dh = DMatrix::zeros(*channels, p * batch);
                    for b in 0..batch {
                        for (a, nb) in neighborhoods.iter().enumerate() {
                            for &j in nb {
                                let mut dst = dh.column_mut(b * p + j);
                                dst += dagg.column(b * p + a);
                            }
                        }
                    }
                    reshape(dh, p * channels, batch)
                }
            };
        }
        grads.reverse();
        grads
    }

    /// Loss `|f(X) - Y|_F^2 / (2N)` and its weight gradients.
    pub fn loss_and_gradient(&self, member: &Member, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<(f64, Vec<DMatrix<f64>>), EnsembleError> {
        self.check_input(x)?;
        if y.shape() != (self.output_len, x.ncols()) {
            return Err(EnsembleError::LabelShape {
                expected_rows: self.output_len,
                expected_cols: x.ncols(),
                found_rows: y.nrows(),
                found_cols: y.ncols(),
            });
        }
        let n = x.ncols() as f64;
        let mut cache = Cache {
            inputs: Vec::with_capacity(self.layers.len()),
            extra: Vec::with_capacity(self.layers.len()),
        };
        let out = self.run(&member.weights, x, Some(&mut cache));
        let resid = out - y;
        let loss = resid.norm_squared() / (2.0 * n);
        let grads = self.backward(&member.weights, &cache, resid / n);
        Ok((loss, grads))
    }

    pub fn loss(&self, member: &Member, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<f64, EnsembleError> {
        let out = self.forward(member, x)?;
        Ok((out - y).norm_squared() / (2.0 * x.ncols() as f64))
    }

    /// Parameter Jacobian of every output at one input: `params x outputs`.
    pub fn jacobian(&self, member: &Member, x: &[f64]) -> Result<DMatrix<f64>, EnsembleError> {
        let xm = DMatrix::from_column_slice(x.len(), 1, x);
        self.check_input(&xm)?;
        let mut cache = Cache {
            inputs: Vec::new(),
            extra: Vec::new(),
        };
        self.run(&member.weights, &xm, Some(&mut cache));
        let mut jac = DMatrix::zeros(self.parameter_count(), self.output_len);
        for o in 0..self.output_len {
            let mut seed = DMatrix::zeros(self.output_len, 1);
            seed[(o, 0)] = 1.0;
            let grads = self.backward(&member.weights, &cache, seed);
            let mut col = jac.column_mut(o);
            let mut off = 0;
            for g in grads {
                col.rows_mut(off, g.len()).copy_from_slice(g.as_slice());
                off += g.len();
            }
        }
        Ok(jac)
    }

    /// Empirical NTK `J(x)^T J(x')` between all output pairs.
    pub fn empirical_ntk(&self, member: &Member, x: &[f64], xp: &[f64]) -> Result<DMatrix<f64>, EnsembleError> {
        let jx = self.jacobian(member, x)?;
        let jxp = if x == xp { jx.clone() } else { self.jacobian(member, xp)? };
        Ok(jx.transpose() * jxp)
    }

    /// Full-batch gradient descent for `steps` steps. `on_checkpoint` runs
    /// after `s` updates for every `s` in `checkpoints`.
    pub fn train_full_batch(
        &self,
        member: &mut Member,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        eta: f64,
        steps: u64,
        checkpoints: &[u64],
        mut on_checkpoint: impl FnMut(u64, &Member),
    ) -> Result<TrainReport, EnsembleError> {
        if let Some(&bad) = checkpoints.iter().find(|&&c| c > steps) {
            return Err(EnsembleError::CheckpointRange { step: bad, steps });
        }
        let mut losses = Vec::new();
        let mut initial = None;
        for step in 0..=steps {
            let last = step == steps;
            let record = checkpoints.contains(&step);
            if record {
                on_checkpoint(member.steps, member);
            }
            if last && !record {
                let loss = self.loss(member, x, y)?;
                losses.push((member.steps, loss));
                break;
            }
            if last {
                losses.push((member.steps, self.loss(member, x, y)?));
                break;
            }
            let (loss, grads) = self.loss_and_gradient(member, x, y)?;
            let init = *initial.get_or_insert(loss);
            if !loss.is_finite() || loss > 1e6 * init.max(f64::MIN_POSITIVE) {
                return Err(EnsembleError::Diverged {
                    member: 0,
                    step: member.steps,
                    loss,
                    initial: init,
                    eta,
                });
            }
            if record {
                losses.push((member.steps, loss));
            }
            if eta != 0.0 {
                for (w, g) in member.weights.iter_mut().zip(grads) {
                    w.zip_apply(&g, |a, b| *a -= eta * b);
                }
            }
            member.steps += 1;
        }
        Ok(TrainReport { losses })
    }
}

/// Weights of one ensemble member.
#[derive(Debug, Clone, PartialEq)]
pub struct Member {
    pub seed: u64,
    pub steps: u64,
    pub weights: Vec<DMatrix<f64>>,
}

impl Member {
    /// Weights of the first parameterized layer.
    pub fn first_layer_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weights[0]
    }
}

/// Training losses recorded at checkpoints and at the final step.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub losses: Vec<(u64, f64)>,
}

pub fn init_member(spec: &NetworkSpec, width: usize, seed: u64) -> Result<(Network, Member), EnsembleError> {
    let net = Network::new(&spec.with_hidden_width(width))?;
    let member = net.init(seed);
    Ok((net, member))
}

/// Reduction applied to raw outputs before they are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// Raw network outputs.
    #[default]
    Outputs,
    /// Total lattice energy `-(1/volume) sum_i E(i)` from predicted local
    /// energies.
    IsingEnergy,
}

impl Readout {
    pub fn apply(self, out: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Readout::Outputs => out.clone(),
            Readout::IsingEnergy => {
                let n = out.nrows() as f64;
                DMatrix::from_fn(1, out.ncols(), |_, c| -out.column(c).sum() / n)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub width: usize,
    pub members: usize,
    pub eta: f64,
    pub steps: u64,
    pub checkpoints: Vec<u64>,
    pub seed: u64,
    #[serde(default)]
    pub readout: Readout,
}

/// Named evaluation inputs (one sample per column).
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub tag: SplitTag,
    pub inputs: DMatrix<f64>,
}

/// Member predictions per (checkpoint, evaluation set), after the readout.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleRun {
    pub config: EnsembleConfig,
    pub seeds: Vec<u64>,
    pub final_losses: Vec<f64>,
    /// `predictions[(step, tag)][member]` is `readout_dim x points`.
    pub predictions: BTreeMap<(u64, SplitTag), Vec<DMatrix<f64>>>,
}

pub fn train_ensemble(
    spec: &NetworkSpec,
    config: &EnsembleConfig,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    evals: &[EvalSet],
) -> Result<EnsembleRun, EnsembleError> {
    let net = Network::new(&spec.with_hidden_width(config.width))?;
    let seeds: Vec<u64> = (0..config.members).map(|i| member_seed(config.seed, i)).collect();
    let results: Vec<(f64, Vec<(u64, Vec<DMatrix<f64>>)>)> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, &seed)| {
            let mut member = net.init(seed);
            let mut recorded = Vec::new();
            let mut failure = None;
            let report = net
                .train_full_batch(&mut member, x, y, config.eta, config.steps, &config.checkpoints, |step, m| {
                    let preds = evals
                        .iter()
                        .map(|e| match net.forward(m, &e.inputs) {
                            Ok(out) => config.readout.apply(&out),
                            Err(err) => {
                                failure.get_or_insert(err);
                                DMatrix::zeros(0, 0)
                            }
                        })
                        .collect();
                    recorded.push((step, preds));
                })
                .map_err(|e| match e {
                    EnsembleError::Diverged { step, loss, initial, eta, .. } => EnsembleError::Diverged {
                        member: i,
                        step,
                        loss,
                        initial,
                        eta,
                    },
                    other => other,
                })?;
            if let Some(err) = failure {
                return Err(err);
            }
            let final_loss = report.losses.last().map(|l| l.1).unwrap_or(f64::NAN);
            Ok((final_loss, recorded))
        })
        .collect::<Result<_, _>>()?;
    let mut predictions: BTreeMap<(u64, SplitTag), Vec<DMatrix<f64>>> = BTreeMap::new();
    let mut final_losses = Vec::with_capacity(results.len());
    for (loss, recorded) in results {
        final_losses.push(loss);
        for (step, preds) in recorded {
            for (e, p) in evals.iter().zip(preds) {
                predictions.entry((step, e.tag)).or_default().push(p);
            }
        }
    }
    Ok(EnsembleRun {
        config: config.clone(),
        seeds,
        final_losses,
        predictions,
    })
}

impl EnsembleRun {
    pub fn members(&self, step: u64, tag: SplitTag) -> Result<&[DMatrix<f64>], EnsembleError> {
        self.predictions
            .get(&(step, tag))
            .map(|v| v.as_slice())
            .ok_or(EnsembleError::MissingCheckpoint { step, set: tag })
    }

    /// Mean of the first `m` members, summed in member order.
    pub fn mean_of_first(&self, m: usize, step: u64, tag: SplitTag) -> Result<DMatrix<f64>, EnsembleError> {
        Ok(ensemble_mean(&self.members(step, tag)?[..m]))
    }
}

/// Arithmetic mean in fixed member order.
pub fn ensemble_mean(members: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut acc = DMatrix::zeros(members[0].nrows(), members[0].ncols());
    for m in members {
        acc += m;
    }
    acc / members.len() as f64
}
