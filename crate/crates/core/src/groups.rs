//! Finite rotation groups, their representations on samples, orbit
//! augmentation and Haar sampling.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix2, Matrix3, Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tasks::{quarter_turn_source, rotate_image, LabeledDataset, OrbitIndex};

#[derive(Debug, Error, PartialEq)]
pub enum GroupError {
    #[error("cyclic group of order {order} has no exact action on {geometry}")]
    Unsupported { order: usize, geometry: String },
    #[error("group order must be at least 1")]
    EmptyGroup,
    #[error("sample map expects {expected} features, got {found}")]
    Shape { expected: usize, found: usize },
    #[error("dataset has no orbit layout for this group (order {order})")]
    NotAugmented { order: usize },
    #[error("element {element} maps sample {index} off the table (residual {residual:e})")]
    Verification {
        element: usize,
        index: usize,
        residual: f64,
    },
}

/// Geometry a cyclic rotation group acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Geometry {
    /// Square spin lattice stored row-major.
    SpinLattice { side: usize },
    /// Square single-channel image stored row-major.
    PixelGrid { side: usize },
    /// A single 2-vector.
    PlanarVector,
}

impl std::fmt::Display for Geometry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Geometry::SpinLattice { side } => write!(f, "spin lattice {side}x{side}"),
            Geometry::PixelGrid { side } => write!(f, "pixel grid {side}x{side}"),
            Geometry::PlanarVector => write!(f, "planar vector"),
        }
    }
}

/// Linear map on a flat sample.
#[derive(Debug, Clone, PartialEq)]
pub enum SampleMap {
    Identity,
    /// `out[chunk a] = tau * in[chunk source[a]]`, with `tau` absent meaning
    /// the identity on each chunk.
    Gather {
        source: Vec<usize>,
        chunk: usize,
        tau: Option<DMatrix<f64>>,
    },
    /// Counter-clockwise image rotation; exact only for quarter turns.
    ImageRotation { angle: f64 },
}

impl SampleMap {
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>, GroupError> {
        match self {
            SampleMap::Identity => Ok(x.to_vec()),
            SampleMap::Gather { source, chunk, tau } => {
                let expected = source.len() * chunk;
                if x.len() != expected {
                    return Err(GroupError::Shape {
                        expected,
                        found: x.len(),
                    });
                }
                let mut out = vec![0.0; expected];
                for (a, &s) in source.iter().enumerate() {
                    let src = &x[s * chunk..(s + 1) * chunk];
                    let dst = &mut out[a * chunk..(a + 1) * chunk];
                    match tau {
                        None => dst.copy_from_slice(src),
                        Some(t) => {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = (0..*chunk).map(|j| t[(i, j)] * src[j]).sum();
                            }
                        }
                    }
                }
                Ok(out)
            }
            SampleMap::ImageRotation { angle } => rotate_image(x, *angle).map_err(|_| GroupError::Shape {
                expected: 0,
                found: x.len(),
            }),
        }
    }

    pub fn inverse(&self) -> SampleMap {
        match self {
            SampleMap::Identity => SampleMap::Identity,
            SampleMap::Gather { source, chunk, tau } => {
                let mut inv = vec![0; source.len()];
                for (a, &s) in source.iter().enumerate() {
                    inv[s] = a;
                }
                SampleMap::Gather {
                    source: inv,
                    chunk: *chunk,
                    tau: tau.as_ref().map(|t| t.transpose()),
                }
            }
            SampleMap::ImageRotation { angle } => SampleMap::ImageRotation { angle: -angle },
        }
    }

    /// Position relabeling induced on spatial kernels (`rho_K`), if this map
    /// permutes positions.
    pub fn position_source(&self) -> Option<&[usize]> {
        match self {
            SampleMap::Gather { source, .. } => Some(source),
            _ => None,
        }
    }
}

/// 2x2 rotation by `2 pi j / k`, exact at multiples of a quarter turn.
pub fn planar_rotation(j: usize, k: usize) -> Matrix2<f64> {
    let (s, c) = if (4 * j) % k == 0 {
        match (4 * j / k) % 4 {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        (2.0 * PI * j as f64 / k as f64).sin_cos()
    };
    Matrix2::new(c, -s, s, c)
}

fn dyn2(m: Matrix2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(2, 2, |r, c| m[(r, c)])
}

/// Finite group with a composition table and representations on inputs and
/// labels. Element 0 is the identity.
#[derive(Debug, Clone)]
pub struct GroupAction {
    pub name: String,
    table: Vec<Vec<usize>>,
    inverses: Vec<usize>,
    pub rho_x: Vec<SampleMap>,
    pub rho_y: Vec<SampleMap>,
    /// Rotation angle of each element, where meaningful.
    pub angles: Vec<f64>,
}

fn cyclic_table(k: usize) -> (Vec<Vec<usize>>, Vec<usize>) {
    let table = (0..k).map(|g| (0..k).map(|h| (g + h) % k).collect()).collect();
    let inverses = (0..k).map(|g| (k - g) % k).collect();
    (table, inverses)
}

fn lattice_rotation_sources(side: usize, turns: usize) -> Vec<usize> {
    let quarter: Vec<usize> = (0..side * side).map(|a| quarter_turn_source(side, a / side, a % side)).collect();
    let mut src: Vec<usize> = (0..side * side).collect();
    for _ in 0..turns {
        src = src.iter().map(|&a| quarter[a]).collect();
    }
    src
}

/// Cyclic group `C_k` of rotations acting exactly on `geometry`. Labels are
/// invariant by default; see [`GroupAction::with_labels_like_inputs`].
pub fn cyclic_rotation_group(k: usize, geometry: Geometry) -> Result<GroupAction, GroupError> {
    if k == 0 {
        return Err(GroupError::EmptyGroup);
    }
    let rho_x: Vec<SampleMap> = match geometry {
        Geometry::SpinLattice { side } | Geometry::PixelGrid { side } => {
            if ![1, 2, 4].contains(&k) || side == 0 {
                return Err(GroupError::Unsupported {
                    order: k,
                    geometry: geometry.to_string(),
                });
            }
            (0..k)
                .map(|j| SampleMap::Gather {
                    source: lattice_rotation_sources(side, j * 4 / k),
                    chunk: 1,
                    tau: None,
                })
                .collect()
        }
        Geometry::PlanarVector => (0..k)
            .map(|j| SampleMap::Gather {
                source: vec![0],
                chunk: 2,
                tau: Some(dyn2(planar_rotation(j, k))),
            })
            .collect(),
    };
    let (table, inverses) = cyclic_table(k);
    Ok(GroupAction {
        name: format!("C{k} on {geometry}"),
        table,
        inverses,
        rho_y: vec![SampleMap::Identity; k],
        rho_x,
        angles: (0..k).map(|j| 2.0 * PI * j as f64 / k as f64).collect(),
    })
}

/// `C_k` acting on square images by interpolated rotation. Only quarter-turn
/// elements are exact.
pub fn interpolated_image_rotations(k: usize) -> Result<GroupAction, GroupError> {
    if k == 0 {
        return Err(GroupError::EmptyGroup);
    }
    let (table, inverses) = cyclic_table(k);
    let angles: Vec<f64> = (0..k).map(|j| 2.0 * PI * j as f64 / k as f64).collect();
    Ok(GroupAction {
        name: format!("C{k} on images (interpolated)"),
        table,
        inverses,
        rho_x: angles.iter().map(|&angle| SampleMap::ImageRotation { angle }).collect(),
        rho_y: vec![SampleMap::Identity; k],
        angles,
    })
}

impl GroupAction {
    pub fn order(&self) -> usize {
        self.table.len()
    }

    pub fn compose(&self, g: usize, h: usize) -> usize {
        self.table[g][h]
    }

    pub fn inverse(&self, g: usize) -> usize {
        self.inverses[g]
    }

    pub fn identity(&self) -> usize {
        0
    }

    /// Use the input representation on labels too (site-wise or vector
    /// labels that rotate with the input).
    pub fn with_labels_like_inputs(mut self) -> Self {
        self.rho_y = self.rho_x.clone();
        self
    }

    pub fn with_label_maps(mut self, rho_y: Vec<SampleMap>) -> Self {
        assert_eq!(rho_y.len(), self.order());
        self.rho_y = rho_y;
        self
    }

    /// Closure, identity, inverses, and associativity on every triple.
    pub fn check_axioms(&self) -> Result<(), String> {
        let k = self.order();
        for g in 0..k {
            if self.table[g].len() != k || self.table[g].iter().any(|&v| v >= k) {
                return Err(format!("row {g} not closed"));
            }
            if self.table[0][g] != g || self.table[g][0] != g {
                return Err(format!("element 0 is not an identity for {g}"));
            }
            if self.table[g][self.inverses[g]] != 0 || self.table[self.inverses[g]][g] != 0 {
                return Err(format!("bad inverse for {g}"));
            }
            for h in 0..k {
                for l in 0..k {
                    if self.table[self.table[g][h]][l] != self.table[g][self.table[h][l]] {
                        return Err(format!("associativity fails at ({g},{h},{l})"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Orbit-augmented dataset in sample-major, element-minor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub data: LabeledDataset,
    pub base_size: usize,
    pub group_order: usize,
}

impl AugmentedDataset {
    pub fn index(&self, i: usize, h: usize) -> usize {
        i * self.group_order + h
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reattach the layout recorded in a loaded dataset.
    pub fn from_dataset(data: LabeledDataset) -> Option<Self> {
        let o = data.orbit?;
        (o.base_size * o.group_order == data.len()).then_some(AugmentedDataset {
            base_size: o.base_size,
            group_order: o.group_order,
            data,
        })
    }
}

/// Apply a list of maps to every sample: column `i * maps + h` holds
/// `(rx[h] x_i, ry[h] y_i)`.
pub fn augment_with_maps(dataset: &LabeledDataset, rx: &[SampleMap], ry: &[SampleMap]) -> Result<AugmentedDataset, GroupError> {
    assert_eq!(rx.len(), ry.len());
    let k = rx.len();
    let n = dataset.len();
    let mut inputs = DMatrix::zeros(dataset.inputs.nrows(), n * k);
    let mut labels = DMatrix::zeros(dataset.labels.nrows(), n * k);
    for i in 0..n {
        for h in 0..k {
            inputs.column_mut(i * k + h).copy_from_slice(&rx[h].apply(dataset.input(i))?);
            labels.column_mut(i * k + h).copy_from_slice(&ry[h].apply(dataset.label(i))?);
        }
    }
    let data = LabeledDataset {
        tag: dataset.tag,
        input_shape: dataset.input_shape.clone(),
        label_shape: dataset.label_shape.clone(),
        inputs,
        labels,
        provenance: dataset.provenance.clone(),
        orbit: Some(OrbitIndex {
            base_size: n,
            group_order: k,
        }),
    };
    Ok(AugmentedDataset {
        data,
        base_size: n,
        group_order: k,
    })
}

pub fn orbit_augment(dataset: &LabeledDataset, action: &GroupAction) -> Result<AugmentedDataset, GroupError> {
    augment_with_maps(dataset, &action.rho_x, &action.rho_y)
}

/// `table[g][(i,h)] = (i, g h)`, verified by comparing
/// `rho_X(g) x_(i,h)` with `x_(i, g h)` bit for bit.
pub fn permutation_table(aug: &AugmentedDataset, action: &GroupAction) -> Result<Vec<Vec<usize>>, GroupError> {
    permutation_table_within(aug, action, 0.0)
}

/// [`permutation_table`] with a max-abs tolerance for floating-point
/// representations.
pub fn permutation_table_within(aug: &AugmentedDataset, action: &GroupAction, tol: f64) -> Result<Vec<Vec<usize>>, GroupError> {
    let k = action.order();
    if aug.group_order != k {
        return Err(GroupError::NotAugmented { order: k });
    }
    let mut tables = Vec::with_capacity(k);
    for g in 0..k {
        let mut t = Vec::with_capacity(aug.len());
        for i in 0..aug.base_size {
            for h in 0..k {
                let from = aug.index(i, h);
                let to = aug.index(i, action.compose(g, h));
                let moved = action.rho_x[g].apply(aug.data.input(from))?;
                let residual = moved
                    .iter()
                    .zip(aug.data.input(to))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                if !(residual <= tol) {
                    return Err(GroupError::Verification {
                        element: g,
                        index: from,
                        residual,
                    });
                }
                t.push(to);
            }
        }
        tables.push(t);
    }
    Ok(tables)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationFamily {
    So2,
    So3,
}

/// Uniform angles in `[0, 2 pi)`.
pub fn haar_so2(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>() * 2.0 * PI).collect()
}

/// Rotations from normalized Gaussian quaternions.
pub fn haar_so3(n: usize, seed: u64) -> Vec<Matrix3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
            UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3])).to_rotation_matrix().into_inner()
        })
        .collect()
}

pub fn haar_sample(family: RotationFamily, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
    match family {
        RotationFamily::So2 => haar_so2(n, seed)
            .into_iter()
            .map(|a| {
                let (s, c) = a.sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            })
            .collect(),
        RotationFamily::So3 => haar_so3(n, seed)
            .into_iter()
            .map(|r| DMatrix::from_fn(3, 3, |i, j| r[(i, j)]))
            .collect(),
    }
}

/// Block rotation acting on `blocks` stacked 3-vectors.
pub fn vector_block_map(r: &Matrix3<f64>, blocks: usize) -> SampleMap {
    SampleMap::Gather {
        source: (0..blocks).collect(),
        chunk: 3,
        tau: Some(DMatrix::from_fn(3, 3, |i, j| r[(i, j)])),
    }
}

/// Largest singular value of a 2x2 matrix.
pub fn operator_norm_2x2(m: &Matrix2<f64>) -> f64 {
    let g = m.transpose() * m;
    let (a, b, d) = (g[(0, 0)], g[(0, 1)], g[(1, 1)]);
    let half = 0.5 * (a + d);
    let rad = (0.25 * (a - d) * (a - d) + b * b).sqrt();
    (half + rad).max(0.0).sqrt()
}

fn rotation2(angle: f64) -> Matrix2<f64> {
    let (s, c) = angle.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Grid size used by [`discretization_error`]: a power of two, so the
/// grid contains every midpoint between `k`-th roots for `k` up to 2^16.
pub const DISCRETIZATION_GRID: usize = 1 << 17;

/// `max over g in SO(2) of min over g' in C_k of ||R(g) - R(g')||_op`,
/// maximized over a uniform angle grid.
pub fn discretization_error(k: usize) -> f64 {
    discretization_error_on_grid(k, DISCRETIZATION_GRID)
}

pub fn discretization_error_on_grid(k: usize, grid: usize) -> f64 {
    assert!(k >= 1, "subgroup order must be positive");
    let sub: Vec<Matrix2<f64>> = (0..k).map(|j| rotation2(2.0 * PI * j as f64 / k as f64)).collect();
    (0..grid)
        .map(|i| {
            let r = rotation2(2.0 * PI * i as f64 / grid as f64);
            sub.iter().map(|s| operator_norm_2x2(&(r - s))).fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{cross_product_generate, ising_generate, SpinDistribution, SplitTag, VectorDistribution};

    #[test]
    fn lattice_rot90_four_times_is_identity() {
        let g = cyclic_rotation_group(4, Geometry::SpinLattice { side: 5 }).unwrap();
        let x: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let mut y = x.clone();
        for _ in 0..4 {
            y = g.rho_x[1].apply(&y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(g.rho_x[1].apply(&x).unwrap(), x);
        g.check_axioms().unwrap();
    }

    #[test]
    fn planar_quarter_turn_matrix() {
        let g = cyclic_rotation_group(4, Geometry::PlanarVector).unwrap();
        match &g.rho_x[1] {
            SampleMap::Gather { tau: Some(t), .. } => {
                assert_eq!(t, &DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
            }
            other => panic!("unexpected map {other:?}"),
        }
    }

    #[test]
    fn half_turn_on_2x2_reverses_indices() {
        let g = cyclic_rotation_group(2, Geometry::PixelGrid { side: 2 }).unwrap();
        assert_eq!(g.rho_x[1].position_source().unwrap(), &[3, 2, 1, 0]);
    }

    #[test]
    fn unsupported_orders_rejected() {
        assert!(cyclic_rotation_group(8, Geometry::PixelGrid { side: 6 }).is_err());
        assert!(cyclic_rotation_group(3, Geometry::SpinLattice { side: 5 }).is_err());
        assert!(cyclic_rotation_group(7, Geometry::PlanarVector).is_ok());
    }

    #[test]
    fn trivial_group_copies_dataset() {
        let d = ising_generate(3, 4, 0, SpinDistribution::Uniform, SplitTag::Train);
        let g = cyclic_rotation_group(1, Geometry::SpinLattice { side: 3 }).unwrap();
        let aug = orbit_augment(&d, &g).unwrap();
        assert_eq!(aug.data.inputs, d.inputs);
        assert_eq!(aug.data.labels, d.labels);
    }

    #[test]
    fn invariant_labels_repeat_across_orbit() {
        let d = ising_generate(5, 1, 2, SpinDistribution::Uniform, SplitTag::Train);
        let g = cyclic_rotation_group(4, Geometry::SpinLattice { side: 5 }).unwrap();
        let aug = orbit_augment(&d, &g).unwrap();
        assert_eq!(aug.len(), 4);
        for h in 1..4 {
            assert_eq!(aug.data.label(h), aug.data.label(0));
        }
    }

    #[test]
    fn cross_product_label_rotates() {
        let d = cross_product_generate(1, 5, VectorDistribution::Normal, SplitTag::Train);
        let r = haar_so3(1, 3)[0];
        let aug = augment_with_maps(&d, &[vector_block_map(&r, 2)], &[vector_block_map(&r, 1)]).unwrap();
        let x = aug.data.input(0);
        let c = crate::tasks::cross(&x[..3], &x[3..]);
        for (a, b) in c.iter().zip(aug.data.label(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_table_examples() {
        let d = ising_generate(5, 3, 1, SpinDistribution::Uniform, SplitTag::Train);
        let g = cyclic_rotation_group(4, Geometry::SpinLattice { side: 5 }).unwrap();
        let aug = orbit_augment(&d, &g).unwrap();
        let t = permutation_table(&aug, &g).unwrap();
        assert_eq!(t[0], (0..12).collect::<Vec<_>>());
        assert_eq!(t[1][aug.index(0, 1)], aug.index(0, 2));
        for gi in 0..4 {
            let inv = &t[g.inverse(gi)];
            for i in 0..12 {
                assert_eq!(inv[t[gi][i]], i);
            }
        }
    }

    #[test]
    fn inconsistent_action_fails_verification() {
        let d = ising_generate(5, 2, 1, SpinDistribution::Uniform, SplitTag::Train);
        let g = cyclic_rotation_group(4, Geometry::SpinLattice { side: 5 }).unwrap();
        let mut aug = orbit_augment(&d, &g).unwrap();
        aug.data.inputs[(0, 1)] = 7.0;
        assert!(matches!(permutation_table(&aug, &g), Err(GroupError::Verification { .. })));
    }

    #[test]
    fn haar_matrices_are_rotations_and_reproducible() {
        for r in haar_sample(RotationFamily::So3, 50, 9) {
            let e = &r.transpose() * &r - DMatrix::identity(3, 3);
            assert!(e.amax() < 1e-12);
            assert!((r.determinant() - 1.0).abs() < 1e-12);
        }
        assert_eq!(haar_so3(5, 1), haar_so3(5, 1));
        assert_eq!(haar_so2(5, 1), haar_so2(5, 1));
    }

    #[test]
    fn discretization_error_of_full_grid_is_zero() {
        assert!(discretization_error_on_grid(64, 64) < 1e-12);
    }

    #[test]
    fn operator_norm_matches_chord_length() {
        for (a, b) in [(0.3, 1.9), (0.0, PI), (2.0, 2.0), (-1.0, 4.0)] {
            let m = rotation2(a) - rotation2(b);
            let want = 2.0 * ((a - b) / 2.0_f64).sin().abs();
            assert!((operator_norm_2x2(&m) - want).abs() < 1e-14);
        }
    }
}
