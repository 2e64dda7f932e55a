//! Dataset generators, image rotation and the dataset file format.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::netspec::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Test,
    Ood,
}

impl SplitTag {
    pub const ALL: [SplitTag; 3] = [SplitTag::Train, SplitTag::Test, SplitTag::Ood];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::Test => "test",
            SplitTag::Ood => "ood",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block layout of an orbit-augmented set: flat index `i * group_order + h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrbitIndex {
    pub base_size: usize,
    pub group_order: usize,
}

/// Inputs and labels stored one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub tag: SplitTag,
    pub input_shape: Shape,
    pub label_shape: Shape,
    pub inputs: DMatrix<f64>,
    pub labels: DMatrix<f64>,
    /// Generator name, seed and parameters as JSON.
    pub provenance: String,
    pub orbit: Option<OrbitIndex>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let r = self.inputs.nrows();
        &self.inputs.as_slice()[i * r..(i + 1) * r]
    }

    pub fn label(&self, i: usize) -> &[f64] {
        let r = self.labels.nrows();
        &self.labels.as_slice()[i * r..(i + 1) * r]
    }

    /// Subset of columns, dropping any orbit layout.
    pub fn select(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            tag: self.tag,
            input_shape: self.input_shape.clone(),
            label_shape: self.label_shape.clone(),
            inputs: self.inputs.select_columns(idx),
            labels: self.labels.select_columns(idx),
            provenance: self.provenance.clone(),
            orbit: None,
        }
    }
}

// ---------------------------------------------------------------------------
// Ising

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum SpinDistribution {
    Uniform,
    Gaussian { mean: f64, variance: f64 },
}

/// Local energies `E(i) = s_i * sum of the four periodic neighbors`.
pub fn ising_local_energies(spins: &[f64], side: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| spins[(r % side) * side + (c % side)];
    let mut e = Vec::with_capacity(side * side);
    for r in 0..side {
        for c in 0..side {
            let nb = at(r + 1, c) + at(r + side - 1, c) + at(r, c + 1) + at(r, c + side - 1);
            e.push(spins[r * side + c] * nb);
        }
    }
    e
}

/// Total energy `-(1/volume) * sum_i E(i)` with unit coupling.
pub fn ising_total_energy(local: &[f64]) -> f64 {
    -local.iter().sum::<f64>() / local.len() as f64
}

pub fn ising_generate(side: usize, n: usize, seed: u64, dist: SpinDistribution, tag: SplitTag) -> LabeledDataset {
    assert!(side >= 2, "lattice side must be at least 2");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = side * side;
    let mut inputs = DMatrix::zeros(p, n);
    let mut labels = DMatrix::zeros(p, n);
    for i in 0..n {
        let spins: Vec<f64> = match dist {
            SpinDistribution::Uniform => (0..p).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
            SpinDistribution::Gaussian { mean, variance } => {
                let d = Normal::new(mean, variance.sqrt()).expect("finite variance");
                (0..p).map(|_| d.sample(&mut rng)).collect()
            }
        };
        let e = ising_local_energies(&spins, side);
        inputs.column_mut(i).copy_from_slice(&spins);
        labels.column_mut(i).copy_from_slice(&e);
    }
    LabeledDataset {
        tag,
        input_shape: Shape::grid(vec![side, side], 1),
        label_shape: Shape::grid(vec![side, side], 1),
        inputs,
        labels,
        provenance: serde_json::json!({
            "generator": "ising", "side": side, "n": n, "seed": seed, "spins": dist,
        })
        .to_string(),
        orbit: None,
    }
}

// ---------------------------------------------------------------------------
// Cross product

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum VectorDistribution {
    Normal,
    Poisson { mean: f64 },
}

pub fn cross(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn cross_product_generate(n: usize, seed: u64, dist: VectorDistribution, tag: SplitTag) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = DMatrix::zeros(6, n);
    let mut labels = DMatrix::zeros(3, n);
    for i in 0..n {
        let v: Vec<f64> = match dist {
            VectorDistribution::Normal => (0..6).map(|_| StandardNormal.sample(&mut rng)).collect(),
            VectorDistribution::Poisson { mean } => {
                let d = Poisson::new(mean).expect("positive mean");
                (0..6).map(|_| d.sample(&mut rng)).collect()
            }
        };
        inputs.column_mut(i).copy_from_slice(&v);
        labels.column_mut(i).copy_from_slice(&cross(&v[..3], &v[3..]));
    }
    LabeledDataset {
        tag,
        input_shape: Shape::grid(vec![2], 3),
        label_shape: Shape::flat(3),
        inputs,
        labels,
        provenance: serde_json::json!({
            "generator": "cross_product", "n": n, "seed": seed, "vectors": dist,
        })
        .to_string(),
        orbit: None,
    }
}

// ---------------------------------------------------------------------------
// Synthetic images

/// Band-limited image model: `x = B z` with `z ~ N(0, I)`. `B` holds masked
/// low-frequency Fourier modes; the class rule is `argmax(U^T z)` with
/// orthonormal `U`, so classes are exactly equiprobable.
#[derive(Debug, Clone)]
pub struct ImageModel {
    pub side: usize,
    pub classes: usize,
    basis: DMatrix<f64>,
    rule: DMatrix<f64>,
}

/// Highest spatial frequency (cycles per image side) in the image basis.
pub const IMAGE_MAX_FREQUENCY: i32 = 2;

/// Radial taper that is 1 at the center and 0 beyond the inscribed circle.
fn disc_mask(side: usize, r: usize, c: usize) -> f64 {
    let center = (side as f64 - 1.0) / 2.0;
    let radius = side as f64 / 2.0 - 0.5;
    let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt() / radius;
    if d >= 1.0 {
        0.0
    } else {
        0.5 * (1.0 + (PI * d).cos())
    }
}

impl ImageModel {
    pub fn new(side: usize, classes: usize, rule_seed: u64) -> Self {
        assert!(side >= 8, "image side must be at least 8");
        let kmax = IMAGE_MAX_FREQUENCY;
        let mut modes: Vec<(i32, i32, bool)> = Vec::new();
        for ky in -kmax..=kmax {
            for kx in -kmax..=kmax {
                if kx * kx + ky * ky > kmax * kmax {
                    continue;
                }
                // one of each +/- k pair carries cos and sin
                if (ky, kx) < (0, 0) {
                    continue;
                }
                modes.push((ky, kx, false));
                if (ky, kx) != (0, 0) {
                    modes.push((ky, kx, true));
                }
            }
        }
        assert!(classes >= 2 && classes <= modes.len(), "unsupported class count");
        let p = side * side;
        let center = (side as f64 - 1.0) / 2.0;
        let basis = DMatrix::from_fn(p, modes.len(), |a, m| {
            let (r, c) = (a / side, a % side);
            let (ky, kx, odd) = modes[m];
            let phase = 2.0 * PI * (ky as f64 * (r as f64 - center) + kx as f64 * (c as f64 - center)) / side as f64;
            let wave = if odd { phase.sin() } else { phase.cos() };
            wave * disc_mask(side, r, c)
        });
        let mut rng = ChaCha8Rng::seed_from_u64(rule_seed);
        let g = DMatrix::from_fn(modes.len(), classes, |_, _| StandardNormal.sample(&mut rng));
        let rule = g.qr().q();
        ImageModel {
            side,
            classes,
            basis,
            rule,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn generate(&self, n: usize, seed: u64, tag: SplitTag) -> LabeledDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(self.latent_dim(), n, |_, _| StandardNormal.sample(&mut rng));
        let inputs = &self.basis * &z;
        let scores = self.rule.transpose() * &z;
        let mut labels = DMatrix::zeros(self.classes, n);
        for i in 0..n {
            labels[(argmax(scores.column(i).as_slice()), i)] = 1.0;
        }
        LabeledDataset {
            tag,
            input_shape: Shape::grid(vec![self.side, self.side], 1),
            label_shape: Shape::flat(self.classes),
            inputs,
            labels,
            provenance: serde_json::json!({
                "generator": "synthetic_image", "side": self.side, "classes": self.classes,
                "n": n, "seed": seed, "max_frequency": IMAGE_MAX_FREQUENCY,
            })
            .to_string(),
            orbit: None,
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn synth_image_generate(side: usize, classes: usize, n: usize, seed: u64, rule_seed: u64, tag: SplitTag) -> LabeledDataset {
    ImageModel::new(side, classes, rule_seed).generate(n, seed, tag)
}

#[derive(Debug, Error, PartialEq)]
pub enum RotateError {
    #[error("image with {0} pixels is not square")]
    NotSquare(usize),
}

/// Source pixel of `out[r][c]` under a counter-clockwise quarter turn.
pub fn quarter_turn_source(side: usize, r: usize, c: usize) -> usize {
    c * side + (side - 1 - r)
}

/// Rotate a square single-channel image counter-clockwise about its center.
/// Multiples of 90 degrees are exact pixel permutations; other angles use
/// bilinear interpolation with zero fill.
pub fn rotate_image(image: &[f64], angle: f64) -> Result<Vec<f64>, RotateError> {
    let side = (image.len() as f64).sqrt().round() as usize;
    if side * side != image.len() {
        return Err(RotateError::NotSquare(image.len()));
    }
    let quarters = angle / (PI / 2.0);
    if (quarters - quarters.round()).abs() < 1e-12 {
        let q = (quarters.round() as i64).rem_euclid(4);
        let mut out = image.to_vec();
        for _ in 0..q {
            let prev = out.clone();
            for r in 0..side {
                for c in 0..side {
                    out[r * side + c] = prev[quarter_turn_source(side, r, c)];
                }
            }
        }
        return Ok(out);
    }
    let center = (side as f64 - 1.0) / 2.0;
    let (s, co) = angle.sin_cos();
    let px = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= side as isize || c >= side as isize {
            0.0
        } else {
            image[r as usize * side + c as usize]
        }
    };
    let mut out = vec![0.0; image.len()];
    for r in 0..side {
        for c in 0..side {
            let x = c as f64 - center;
            let y = center - r as f64;
            let xs = x * co + y * s;
            let ys = -x * s + y * co;
            let (sc, sr) = (center + xs, center - ys);
            let (c0, r0) = (sc.floor(), sr.floor());
            let (fc, fr) = (sc - c0, sr - r0);
            let (c0, r0) = (c0 as isize, r0 as isize);
            out[r * side + c] = (1.0 - fr) * ((1.0 - fc) * px(r0, c0) + fc * px(r0, c0 + 1))
                + fr * ((1.0 - fc) * px(r0 + 1, c0) + fc * px(r0 + 1, c0 + 1));
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence

#[derive(Debug, Error)]
pub enum DatasetFileError {
    #[error("dataset file {0} not found")]
    NotFound(String),
    #[error("dataset file version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("dataset file checksum mismatch")]
    ChecksumMismatch,
    #[error("dataset file truncated or malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const DATASET_MAGIC: &[u8; 8] = b"OLDATA\0\0";
const DATASET_VERSION: u32 = 1;

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_shape(buf: &mut Vec<u8>, s: &Shape) {
    put_u64(buf, s.spatial.len() as u64);
    for &d in &s.spatial {
        put_u64(buf, d as u64);
    }
    put_u64(buf, s.channels as u64);
}

fn put_matrix_rows(buf: &mut Vec<u8>, m: &DMatrix<f64>) {
    // one row per sample
    for c in 0..m.ncols() {
        for r in 0..m.nrows() {
            buf.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

pub fn dataset_to_bytes(d: &LabeledDataset) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.push(d.tag.code());
    put_shape(&mut buf, &d.input_shape);
    put_shape(&mut buf, &d.label_shape);
    put_u64(&mut buf, d.len() as u64);
    put_u64(&mut buf, d.inputs.nrows() as u64);
    put_u64(&mut buf, d.labels.nrows() as u64);
    match d.orbit {
        Some(o) => {
            buf.push(1);
            put_u64(&mut buf, o.base_size as u64);
            put_u64(&mut buf, o.group_order as u64);
        }
        None => buf.push(0),
    }
    put_u64(&mut buf, d.provenance.len() as u64);
    buf.extend_from_slice(d.provenance.as_bytes());
    put_matrix_rows(&mut buf, &d.inputs);
    put_matrix_rows(&mut buf, &d.labels);
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DatasetFileError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DatasetFileError> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<usize, DatasetFileError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| DatasetFileError::Malformed("length overflow".into()))
    }

    fn shape(&mut self) -> Result<Shape, DatasetFileError> {
        let dims = self.u64()?;
        if dims > 16 {
            return Err(DatasetFileError::Malformed("too many spatial axes".into()));
        }
        let spatial = (0..dims).map(|_| self.u64()).collect::<Result<Vec<_>, _>>()?;
        Ok(Shape::grid(spatial, self.u64()?))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>, DatasetFileError> {
        let bytes = self.take(rows.checked_mul(cols).and_then(|v| v.checked_mul(8)).ok_or_else(|| {
            DatasetFileError::Malformed("size overflow".into())
        })?)?;
        let vals: Vec<f64> = bytes.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
        Ok(DMatrix::from_vec(rows, cols, vals))
    }
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<LabeledDataset, DatasetFileError> {
    if bytes.len() < DATASET_MAGIC.len() + 4 + 32 {
        return Err(DatasetFileError::Malformed("file shorter than header".into()));
    }
    if &bytes[..8] != DATASET_MAGIC {
        return Err(DatasetFileError::Malformed("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != DATASET_VERSION {
        return Err(DatasetFileError::VersionMismatch {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(DatasetFileError::ChecksumMismatch);
    }
    let mut r = Reader { buf: body, pos: 12 };
    let tag = SplitTag::from_code(r.u8()?).ok_or_else(|| DatasetFileError::Malformed("unknown tag".into()))?;
    let input_shape = r.shape()?;
    let label_shape = r.shape()?;
    let n = r.u64()?;
    let in_dim = r.u64()?;
    let out_dim = r.u64()?;
    let orbit = match r.u8()? {
        0 => None,
        1 => Some(OrbitIndex {
            base_size: r.u64()?,
            group_order: r.u64()?,
        }),
        _ => return Err(DatasetFileError::Malformed("bad orbit flag".into())),
    };
    let plen = r.u64()?;
    let provenance = String::from_utf8(r.take(plen)?.to_vec())
        .map_err(|_| DatasetFileError::Malformed("provenance is not UTF-8".into()))?;
    let inputs = r.matrix(in_dim, n)?;
    let labels = r.matrix(out_dim, n)?;
    if r.pos != body.len() {
        return Err(DatasetFileError::Malformed("trailing bytes".into()));
    }
    Ok(LabeledDataset {
        tag,
        input_shape,
        label_shape,
        inputs,
        labels,
        provenance,
        orbit,
    })
}

pub fn save_dataset(d: &LabeledDataset, path: &Path) -> Result<(), DatasetFileError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&dataset_to_bytes(d))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, DatasetFileError> {
    match fs::read(path) {
        Ok(bytes) => dataset_from_bytes(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(DatasetFileError::NotFound(path.display().to_string())),
        Err(e) => Err(e.into()),
    }
}
