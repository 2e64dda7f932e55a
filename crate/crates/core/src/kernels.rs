//! Analytic NNGP and NTK of a [`NetworkSpec`] by layerwise recursion.
//!
//! Conventions: the input kernel divides the channel inner product by the
//! channel count, convolutions average over the filter support with circular
//! wrap, flatten takes the spatial mean, dense layers add no factor. Flatten
//! also accounts for the dense layer that must follow it, so that layer is a
//! no-op in the recursion.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netspec::{Activation, LayerSpec, NetworkSpec, Shape, SpecError};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("input has {found} entries, expected {expected} for shape {shape}")]
    InputShape {
        expected: usize,
        found: usize,
        shape: Shape,
    },
    #[error("{op} expects {expected}, got a {rows}x{cols} kernel")]
    LayerShape {
        op: &'static str,
        expected: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("neighborhood index {index} out of range for {nodes} nodes")]
    NeighborhoodIndex { index: usize, nodes: usize },
    #[error("filter extent {extent:?} invalid for spatial size {spatial:?}")]
    FilterExtent {
        extent: Vec<usize>,
        spatial: Vec<usize>,
    },
    #[error("symmetric eigendecomposition failed ({0})")]
    Eigen(GramDiagnostics),
    #[error("gram blob: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Conditioning summary attached to eigendecomposition failures.
#[derive(Debug, Clone)]
pub struct GramDiagnostics {
    pub size: usize,
    pub non_finite: usize,
    pub frobenius: f64,
    pub min_diagonal: f64,
    pub max_diagonal: f64,
}

impl std::fmt::Display for GramDiagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "size {}, {} non-finite entries, frobenius norm {:e}, diagonal range [{:e}, {:e}]",
            self.size, self.non_finite, self.frobenius, self.min_diagonal, self.max_diagonal
        )
    }
}

impl GramDiagnostics {
    fn of(m: &DMatrix<f64>) -> Self {
        let diag = m.diagonal();
        GramDiagnostics {
            size: m.nrows(),
            non_finite: m.iter().filter(|v| !v.is_finite()).count(),
            frobenius: m.norm(),
            min_diagonal: diag.iter().cloned().fold(f64::INFINITY, f64::min),
            max_diagonal: diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        }
    }
}

/// NNGP and NTK values of one input pair at one layer.
///
/// Both matrices are indexed by (position of x, position of x'); flat layers
/// give 1x1 matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPair {
    pub nngp: DMatrix<f64>,
    pub ntk: DMatrix<f64>,
    pub layer: usize,
    /// Entries zeroed because a ReLU saw a non-positive variance.
    pub degenerate: usize,
}

impl KernelPair {
    pub fn scalar(nngp: f64, ntk: f64) -> Self {
        KernelPair {
            nngp: DMatrix::from_element(1, 1, nngp),
            ntk: DMatrix::from_element(1, 1, ntk),
            layer: 0,
            degenerate: 0,
        }
    }

    pub fn is_scalar(&self) -> bool {
        self.nngp.shape() == (1, 1)
    }

    fn next(&self, nngp: DMatrix<f64>, ntk: DMatrix<f64>) -> Self {
        KernelPair {
            nngp,
            ntk,
            layer: self.layer + 1,
            degenerate: self.degenerate,
        }
    }
}

fn check_input(x: &[f64], shape: &Shape) -> Result<(), KernelError> {
    if x.len() != shape.len() {
        return Err(KernelError::InputShape {
            expected: shape.len(),
            found: x.len(),
            shape: shape.clone(),
        });
    }
    Ok(())
}

fn input_nngp(x: &[f64], xp: &[f64], shape: &Shape) -> DMatrix<f64> {
    let p = shape.positions();
    let c = shape.channels;
    let scale = 1.0 / c as f64;
    DMatrix::from_fn(p, p, |a, b| {
        let u = &x[a * c..(a + 1) * c];
        let v = &xp[b * c..(b + 1) * c];
        u.iter().zip(v).map(|(s, t)| s * t).sum::<f64>() * scale
    })
}

/// Kernel after the first linear layer: channel inner product over channel
/// count, with the NTK equal to the NNGP.
pub fn base_kernel(x: &[f64], xp: &[f64], shape: &Shape) -> Result<KernelPair, KernelError> {
    check_input(x, shape)?;
    check_input(xp, shape)?;
    let k = input_nngp(x, xp, shape);
    Ok(KernelPair {
        ntk: k.clone(),
        nngp: k,
        layer: 1,
        degenerate: 0,
    })
}

/// Closed-form `(E[relu(u) relu(v)], E[relu'(u) relu'(v)])` for
/// `(u, v) ~ N(0, [[k11, k12], [k12, k22]])`. `None` when a variance is not
/// positive.
pub fn relu_expectations(k11: f64, k12: f64, k22: f64) -> Option<(f64, f64)> {
    let norm = (k11 * k22).sqrt();
    if !(k11 > 0.0 && k22 > 0.0 && norm > 0.0) {
        return None;
    }
    let cos = (k12 / norm).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let sin = (1.0 - cos * cos).max(0.0).sqrt();
    let k = norm * (sin + (PI - theta) * cos) / (2.0 * PI);
    let kdot = (PI - theta) / (2.0 * PI);
    Some((k, kdot))
}

/// Closed-form `(E[erf(u) erf(v)], E[erf'(u) erf'(v)])` for the same
/// bivariate normal.
pub fn erf_expectations(k11: f64, k12: f64, k22: f64) -> (f64, f64) {
    let d = (1.0 + 2.0 * k11) * (1.0 + 2.0 * k22);
    let k = 2.0 / PI * (2.0 * k12 / d.sqrt()).clamp(-1.0, 1.0).asin();
    let kdot = 4.0 / PI / (d - 4.0 * k12 * k12).sqrt();
    (k, kdot)
}

fn activation_map(
    k: &DMatrix<f64>,
    theta: Option<&DMatrix<f64>>,
    d1: &[f64],
    d2: &[f64],
    kind: Activation,
) -> (DMatrix<f64>, Option<DMatrix<f64>>, usize) {
    let (r, c) = k.shape();
    let mut kout = DMatrix::zeros(r, c);
    let mut tout = theta.map(|_| DMatrix::zeros(r, c));
    let mut degenerate = 0;
    for b in 0..c {
        for a in 0..r {
            let (kv, kd) = match kind {
                Activation::Relu => match relu_expectations(d1[a], k[(a, b)], d2[b]) {
                    Some(v) => v,
                    None => {
                        degenerate += 1;
                        (0.0, 0.0)
                    }
                },
                Activation::Erf => erf_expectations(d1[a], k[(a, b)], d2[b]),
            };
            kout[(a, b)] = kv;
            if let (Some(t), Some(to)) = (theta, tout.as_mut()) {
                to[(a, b)] = kd * t[(a, b)];
            }
        }
    }
    (kout, tout, degenerate)
}

/// Pointwise nonlinearity. `d1[a]` and `d2[b]` are the variances
/// `K(x,x)[a,a]` and `K(x',x')[b,b]` at the layer input.
pub fn nonlinearity_step(prev: &KernelPair, d1: &[f64], d2: &[f64], kind: Activation) -> KernelPair {
    let (k, t, deg) = activation_map(&prev.nngp, Some(&prev.ntk), d1, d2, kind);
    let mut out = prev.next(k, t.expect("ntk requested"));
    out.degenerate += deg;
    out
}

/// Nonlinearity for a pair whose two sides are the same input.
pub fn nonlinearity_step_self(prev: &KernelPair, kind: Activation) -> KernelPair {
    let d: Vec<f64> = prev.nngp.diagonal().iter().copied().collect();
    nonlinearity_step(prev, &d, &d, kind)
}

pub fn dense_step(prev: &KernelPair) -> Result<KernelPair, KernelError> {
    if !prev.is_scalar() {
        return Err(KernelError::LayerShape {
            op: "dense_step",
            expected: "a scalar kernel",
            rows: prev.nngp.nrows(),
            cols: prev.nngp.ncols(),
        });
    }
    Ok(prev.next(prev.nngp.clone(), &prev.nngp + &prev.ntk))
}

/// Placement of the filter support relative to the output position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPadding {
    /// Centered support with wrap-around.
    #[default]
    Circular,
    /// Support anchored at the corner (offsets `0..extent`), wrapped. Not
    /// rotation-symmetric; used as a negative control.
    OneSided,
}

/// Index tables `shift[s][a] = a + offset_s (mod spatial)` for a centered
/// filter, positions in row-major order.
fn shift_tables(spatial: &[usize], extent: &[usize]) -> Result<Vec<Vec<usize>>, KernelError> {
    shift_tables_with(spatial, extent, ConvPadding::Circular)
}

fn shift_tables_with(spatial: &[usize], extent: &[usize], padding: ConvPadding) -> Result<Vec<Vec<usize>>, KernelError> {
    if extent.len() != spatial.len()
        || extent.iter().zip(spatial).any(|(&e, &s)| e % 2 == 0 || e > s)
    {
        return Err(KernelError::FilterExtent {
            extent: extent.to_vec(),
            spatial: spatial.to_vec(),
        });
    }
    let positions: usize = spatial.iter().product();
    let support: usize = extent.iter().product();
    let mut tables = Vec::with_capacity(support);
    for s in 0..support {
        // decode the offset multi-index
        let mut rem = s;
        let mut offset = vec![0isize; extent.len()];
        for d in (0..extent.len()).rev() {
            let centre = match padding {
                ConvPadding::Circular => (extent[d] / 2) as isize,
                ConvPadding::OneSided => 0,
            };
            offset[d] = (rem % extent[d]) as isize - centre;
            rem /= extent[d];
        }
        let mut table = Vec::with_capacity(positions);
        for a in 0..positions {
            let mut rem = a;
            let mut coords = vec![0usize; spatial.len()];
            for d in (0..spatial.len()).rev() {
                coords[d] = rem % spatial[d];
                rem /= spatial[d];
            }
            let mut idx = 0;
            for d in 0..spatial.len() {
                let n = spatial[d] as isize;
                let c = (coords[d] as isize + offset[d]).rem_euclid(n) as usize;
                idx = idx * spatial[d] + c;
            }
            table.push(idx);
        }
        tables.push(table);
    }
    Ok(tables)
}

fn offset_diagonal_mean(m: &DMatrix<f64>, shifts: &[Vec<usize>]) -> DMatrix<f64> {
    let (r, c) = m.shape();
    let scale = 1.0 / shifts.len() as f64;
    DMatrix::from_fn(r, c, |a, b| {
        shifts.iter().map(|t| m[(t[a], t[b])]).sum::<f64>() * scale
    })
}

fn conv_apply(prev: &KernelPair, shifts: &[Vec<usize>]) -> KernelPair {
    let k = offset_diagonal_mean(&prev.nngp, shifts);
    let t = &k + offset_diagonal_mean(&prev.ntk, shifts);
    prev.next(k, t)
}

/// Convolution with a centered odd filter and circular padding.
pub fn conv_step(prev: &KernelPair, spatial: &[usize], extent: &[usize]) -> Result<KernelPair, KernelError> {
    let p: usize = spatial.iter().product();
    if prev.nngp.shape() != (p, p) {
        return Err(KernelError::LayerShape {
            op: "conv_step",
            expected: "one row and column per spatial position",
            rows: prev.nngp.nrows(),
            cols: prev.nngp.ncols(),
        });
    }
    let shifts = shift_tables(spatial, extent)?;
    Ok(conv_apply(prev, &shifts))
}

/// Spatial mean of the diagonal. The NTK term includes the dense readout.
pub fn flatten_step(prev: &KernelPair) -> Result<KernelPair, KernelError> {
    let (r, c) = prev.nngp.shape();
    if r != c || r < 2 {
        return Err(KernelError::LayerShape {
            op: "flatten_step",
            expected: "a kernel with spatial axes",
            rows: r,
            cols: c,
        });
    }
    Ok(flatten_apply(prev))
}

fn flatten_apply(prev: &KernelPair) -> KernelPair {
    let k = prev.nngp.diagonal().mean();
    let t = k + prev.ntk.diagonal().mean();
    prev.next(DMatrix::from_element(1, 1, k), DMatrix::from_element(1, 1, t))
}

fn neighborhood_matrix(neighborhoods: &[Vec<usize>], nodes: usize) -> Result<DMatrix<f64>, KernelError> {
    let mut b = DMatrix::zeros(neighborhoods.len(), nodes);
    for (a, nbrs) in neighborhoods.iter().enumerate() {
        for &j in nbrs {
            if j >= nodes {
                return Err(KernelError::NeighborhoodIndex { index: j, nodes });
            }
            b[(a, j)] += 1.0;
        }
    }
    Ok(b)
}

fn aggregate_apply(prev: &KernelPair, b: &DMatrix<f64>) -> KernelPair {
    let bt = b.transpose();
    let k = b * &prev.nngp * &bt;
    let t = &k + b * &prev.ntk * &bt;
    prev.next(k, t)
}

/// Graph aggregation: unnormalized sum over both neighborhoods.
pub fn local_aggregation_step(prev: &KernelPair, neighborhoods: &[Vec<usize>]) -> Result<KernelPair, KernelError> {
    let n = prev.nngp.nrows();
    if neighborhoods.len() != n || prev.nngp.ncols() != n {
        return Err(KernelError::LayerShape {
            op: "local_aggregation_step",
            expected: "one row and column per graph node",
            rows: prev.nngp.nrows(),
            cols: prev.nngp.ncols(),
        });
    }
    let b = neighborhood_matrix(neighborhoods, n)?;
    Ok(aggregate_apply(prev, &b))
}

pub fn global_aggregation_step(prev: &KernelPair) -> Result<KernelPair, KernelError> {
    let n = prev.nngp.nrows();
    let all: Vec<Vec<usize>> = vec![(0..n).collect(); n];
    local_aggregation_step(prev, &all)
}

#[derive(Debug, Clone)]
enum Op {
    Dense,
    Conv(Vec<Vec<usize>>),
    Act(Activation),
    Flatten,
    Aggregate(DMatrix<f64>),
}

/// A validated spec compiled into kernel operations.
#[derive(Debug, Clone)]
pub struct KernelEngine {
    input: Shape,
    output: Shape,
    ops: Vec<Op>,
}

/// Variances `K(x,x)[a,a]` entering each nonlinearity, for one input.
#[derive(Debug, Clone)]
pub struct SelfTrace {
    diagonals: Vec<Vec<f64>>,
}

impl KernelEngine {
    pub fn new(spec: &NetworkSpec) -> Result<Self, KernelError> {
        Self::with_padding(spec, ConvPadding::Circular)
    }

    pub fn with_padding(spec: &NetworkSpec, padding: ConvPadding) -> Result<Self, KernelError> {
        let trace = spec.validate()?;
        let mut ops = Vec::new();
        let mut shape = spec.input.clone();
        let mut skip_dense = false;
        for (layer, out) in spec.layers.iter().zip(&trace) {
            match layer {
                LayerSpec::Dense(_) => {
                    if !std::mem::take(&mut skip_dense) {
                        ops.push(Op::Dense);
                    }
                }
                LayerSpec::Conv { extent, .. } => {
                    ops.push(Op::Conv(shift_tables_with(&shape.spatial, extent, padding)?));
                }
                LayerSpec::Nonlinearity(kind) => ops.push(Op::Act(*kind)),
                LayerSpec::Flatten => {
                    ops.push(Op::Flatten);
                    skip_dense = true;
                }
                LayerSpec::LocalAggregation(nbrs) => {
                    ops.push(Op::Aggregate(neighborhood_matrix(nbrs, shape.positions())?));
                }
                LayerSpec::GlobalAggregation => {
                    let n = shape.positions();
                    ops.push(Op::Aggregate(DMatrix::from_element(n, n, 1.0)));
                }
            }
            shape = out.clone();
        }
        Ok(KernelEngine {
            input: spec.input.clone(),
            output: shape,
            ops,
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input
    }

    /// Spatial positions of the output kernel (1 for flat outputs).
    pub fn output_positions(&self) -> usize {
        self.output.positions()
    }

    pub fn self_trace(&self, x: &[f64]) -> Result<SelfTrace, KernelError> {
        check_input(x, &self.input)?;
        let mut k = input_nngp(x, x, &self.input);
        let mut diagonals = Vec::new();
        for op in &self.ops {
            k = match op {
                Op::Dense => k,
                Op::Conv(shifts) => offset_diagonal_mean(&k, shifts),
                Op::Act(kind) => {
                    let d: Vec<f64> = k.diagonal().iter().copied().collect();
                    let (kn, _, _) = activation_map(&k, None, &d, &d, *kind);
                    diagonals.push(d);
                    kn
                }
                Op::Flatten => DMatrix::from_element(1, 1, k.diagonal().mean()),
                Op::Aggregate(b) => b * &k * b.transpose(),
            };
        }
        Ok(SelfTrace { diagonals })
    }

    /// Output kernel of `(x, x')` given both self traces.
    pub fn pair_with_traces(&self, x: &[f64], tx: &SelfTrace, xp: &[f64], txp: &SelfTrace) -> Result<KernelPair, KernelError> {
        check_input(x, &self.input)?;
        check_input(xp, &self.input)?;
        let p = self.input.positions();
        let mut state = KernelPair {
            nngp: input_nngp(x, xp, &self.input),
            ntk: DMatrix::zeros(p, p),
            layer: 0,
            degenerate: 0,
        };
        let mut act = 0;
        for op in &self.ops {
            state = match op {
                Op::Dense => state.next(state.nngp.clone(), &state.nngp + &state.ntk),
                Op::Conv(shifts) => conv_apply(&state, shifts),
                Op::Act(kind) => {
                    let s = nonlinearity_step(&state, &tx.diagonals[act], &txp.diagonals[act], *kind);
                    act += 1;
                    s
                }
                Op::Flatten => flatten_apply(&state),
                Op::Aggregate(b) => aggregate_apply(&state, b),
            };
        }
        Ok(state)
    }

    pub fn compute(&self, x: &[f64], xp: &[f64]) -> Result<KernelPair, KernelError> {
        let tx = self.self_trace(x)?;
        let txp = self.self_trace(xp)?;
        self.pair_with_traces(x, &tx, xp, &txp)
    }

    fn traces(&self, xs: &[&[f64]]) -> Result<Vec<SelfTrace>, KernelError> {
        xs.par_iter().map(|x| self.self_trace(x)).collect()
    }

    /// Kernel blocks between every column of `a` and every column of `b`:
    /// `(nngp, ntk)` of shape `(cols(a) * P_out, cols(b) * P_out)`.
    pub fn cross(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), KernelError> {
        let xa = columns(a);
        let xb = columns(b);
        let ta = self.traces(&xa)?;
        let tb = self.traces(&xb)?;
        let po = self.output_positions();
        let pairs: Vec<(usize, usize)> = (0..xa.len())
            .flat_map(|i| (0..xb.len()).map(move |j| (i, j)))
            .collect();
        let blocks: Vec<KernelPair> = pairs
            .par_iter()
            .map(|&(i, j)| self.pair_with_traces(xa[i], &ta[i], xb[j], &tb[j]))
            .collect::<Result<_, _>>()?;
        let mut k = DMatrix::zeros(xa.len() * po, xb.len() * po);
        let mut t = DMatrix::zeros(xa.len() * po, xb.len() * po);
        for (&(i, j), blk) in pairs.iter().zip(&blocks) {
            k.view_mut((i * po, j * po), (po, po)).copy_from(&blk.nngp);
            t.view_mut((i * po, j * po), (po, po)).copy_from(&blk.ntk);
        }
        Ok((k, t))
    }

    /// Symmetric Gram matrices over the columns of `x`. Only blocks with
    /// `i <= j` are computed; the rest are mirrored bit for bit.
    pub fn symmetric_gram(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>), KernelError> {
        let xs = columns(x);
        let traces = self.traces(&xs)?;
        let n = xs.len();
        let po = self.output_positions();
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
        let blocks: Vec<KernelPair> = pairs
            .par_iter()
            .map(|&(i, j)| self.pair_with_traces(xs[i], &traces[i], xs[j], &traces[j]))
            .collect::<Result<_, _>>()?;
        let mut k = DMatrix::zeros(n * po, n * po);
        let mut t = DMatrix::zeros(n * po, n * po);
        for (&(i, j), blk) in pairs.iter().zip(&blocks) {
            for (dst, src) in [(&mut k, &blk.nngp), (&mut t, &blk.ntk)] {
                for b in 0..po {
                    for a in 0..po {
                        if i == j && a > b {
                            continue;
                        }
                        let (r, c) = (i * po + a, j * po + b);
                        dst[(r, c)] = src[(a, b)];
                        dst[(c, r)] = src[(a, b)];
                    }
                }
            }
        }
        Ok((k, t))
    }
}

/// Per-sample column slices of a column-major sample matrix.
pub fn columns(m: &DMatrix<f64>) -> Vec<&[f64]> {
    let r = m.nrows();
    m.as_slice().chunks(r.max(1)).take(m.ncols()).collect()
}

pub fn compute_kernel(spec: &NetworkSpec, x: &[f64], xp: &[f64]) -> Result<KernelPair, KernelError> {
    KernelEngine::new(spec)?.compute(x, xp)
}

/// Training-set Gram matrices with the NTK spectrum and the sample
/// permutation of every group element.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSystem {
    pub ntk: DMatrix<f64>,
    pub nngp: DMatrix<f64>,
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// `permutations[g][i]` is the index of `rho(g) x_i`.
    pub permutations: Vec<Vec<usize>>,
    /// Output spatial positions per sample (1 for flat outputs).
    pub output_positions: usize,
}

/// Descending symmetric eigendecomposition.
pub fn symmetric_eigen(m: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), KernelError> {
    let diag = GramDiagnostics::of(m);
    if diag.non_finite > 0 {
        return Err(KernelError::Eigen(diag));
    }
    let eig = SymmetricEigen::try_new(m.clone(), f64::EPSILON, 0).ok_or(KernelError::Eigen(diag))?;
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = DVector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = DMatrix::from_fn(m.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((values, vectors))
}

pub fn gram(spec: &NetworkSpec, inputs: &DMatrix<f64>, permutations: Vec<Vec<usize>>) -> Result<GramSystem, KernelError> {
    let engine = KernelEngine::new(spec)?;
    GramSystem::build(&engine, inputs, permutations)
}

impl GramSystem {
    pub fn build(engine: &KernelEngine, inputs: &DMatrix<f64>, permutations: Vec<Vec<usize>>) -> Result<Self, KernelError> {
        let (nngp, ntk) = engine.symmetric_gram(inputs)?;
        let (eigenvalues, eigenvectors) = symmetric_eigen(&ntk)?;
        Ok(GramSystem {
            ntk,
            nngp,
            eigenvalues,
            eigenvectors,
            permutations,
            output_positions: engine.output_positions(),
        })
    }

    pub fn len(&self) -> usize {
        self.ntk.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Relative Frobenius error of `V diag(lambda) V^T` against the NTK Gram.
    pub fn reconstruction_error(&self) -> f64 {
        let v = &self.eigenvectors;
        let recon = v * DMatrix::from_diagonal(&self.eigenvalues) * v.transpose();
        (recon - &self.ntk).norm() / self.ntk.norm().max(f64::MIN_POSITIVE)
    }

    /// Eigenvalue listing with cumulative spectral mass.
    pub fn spectrum_summary(&self) -> String {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let lmax = self.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let zero = self.eigenvalues.iter().filter(|&&v| v < 1e-10 * lmax).count();
        let mut s = format!(
            "# ntk gram {n}x{n}, trace {total:e}, {zero} eigenvalues below 1e-10 * max\n# index eigenvalue cumulative_fraction\n",
            n = self.len()
        );
        let mut acc = 0.0;
        for (i, v) in self.eigenvalues.iter().enumerate() {
            acc += v.max(0.0);
            s.push_str(&format!("{i} {v:e} {:.6}\n", if total > 0.0 { acc / total } else { 0.0 }));
        }
        s
    }

    const MAGIC: &'static [u8; 8] = b"OLGRAM\0\0";
    const VERSION: u32 = 1;

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), KernelError> {
        let mut buf = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&Self::VERSION.to_le_bytes());
        let n = self.len() as u64;
        buf.extend_from_slice(&n.to_le_bytes());
        buf.extend_from_slice(&(self.output_positions as u64).to_le_bytes());
        buf.extend_from_slice(&(self.permutations.len() as u64).to_le_bytes());
        for m in [&self.ntk, &self.nngp, &self.eigenvectors] {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    buf.extend_from_slice(&m[(r, c)].to_le_bytes());
                }
            }
        }
        for v in self.eigenvalues.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.permutations {
            buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
            for &i in p {
                buf.extend_from_slice(&(i as u64).to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest);
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, KernelError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        if buf.len() < 8 + 4 + 24 + 32 {
            return Err(KernelError::Format("truncated header".into()));
        }
        let (body, digest) = buf.split_at(buf.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(KernelError::Format("checksum mismatch".into()));
        }
        if &body[..8] != Self::MAGIC {
            return Err(KernelError::Format("bad magic".into()));
        }
        let mut cur = Cursor { buf: body, pos: 8 };
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != Self::VERSION {
            return Err(KernelError::Format(format!("unsupported version {version}")));
        }
        let n = cur.u64()? as usize;
        let output_positions = cur.u64()? as usize;
        let groups = cur.u64()? as usize;
        let mut mats = Vec::new();
        for _ in 0..3 {
            let mut m = DMatrix::zeros(n, n);
            for row in 0..n {
                for col in 0..n {
                    m[(row, col)] = cur.f64()?;
                }
            }
            mats.push(m);
        }
        let eigenvalues = DVector::from_iterator(n, (0..n).map(|_| cur.f64()).collect::<Result<Vec<_>, _>>()?);
        let mut permutations = Vec::with_capacity(groups);
        for _ in 0..groups {
            let len = cur.u64()? as usize;
            permutations.push((0..len).map(|_| cur.u64().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?);
        }
        if cur.pos != body.len() {
            return Err(KernelError::Format("trailing bytes".into()));
        }
        let eigenvectors = mats.pop().unwrap();
        let nngp = mats.pop().unwrap();
        let ntk = mats.pop().unwrap();
        Ok(GramSystem {
            ntk,
            nngp,
            eigenvalues,
            eigenvectors,
            permutations,
            output_positions,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], KernelError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| KernelError::Format("truncated body".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, KernelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, KernelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
