//! Equivariance metrics, ensemble-to-NTK deviation and ensemble-size bounds.
//!
//! Orbit metrics consume predictions laid out like an orbit-augmented set:
//! column `i * order + h` holds the prediction at `rho_X(g_h) x_i`, with
//! `h = 0` the identity.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::groups::{haar_so2, SampleMap};
use crate::tasks::{argmax, SplitTag};

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty orbit")]
    EmptyOrbit,
    #[error("{found} predictions do not split into orbits of size {order}")]
    OrbitLayout { found: usize, order: usize },
    #[error("normalizer must be positive, got {0}")]
    Normalizer(f64),
    #[error("classifier needs at least two output channels, got {0}")]
    Channels(usize),
    #[error("prediction sets differ in size ({0} vs {1})")]
    Mismatch(usize, usize),
    #[error("epsilon {0} outside (0, 1/sqrt(pi))")]
    Epsilon(f64),
    #[error("delta must be positive, got {0}")]
    Delta(f64),
    #[error("variance must be nonnegative, got {0}")]
    Variance(f64),
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn median(values: &[f64]) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Aggregate {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len().max(1) as f64,
            median: quantile_sorted(&s, 0.5),
            q25: quantile_sorted(&s, 0.25),
            q75: quantile_sorted(&s, 0.75),
        }
    }
}

/// Per-point orbit statistic with its aggregate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrbitReport {
    pub metric: String,
    pub tag: SplitTag,
    /// `member-<id>`, `ensemble-mean` or `ntk-mean`.
    pub evaluator: String,
    pub per_point: Vec<f64>,
    pub aggregate: Aggregate,
}

impl OrbitReport {
    pub fn new(metric: &str, tag: SplitTag, evaluator: &str, per_point: Vec<f64>) -> Self {
        OrbitReport {
            metric: metric.to_string(),
            tag,
            evaluator: evaluator.to_string(),
            aggregate: Aggregate::of(&per_point),
            per_point,
        }
    }

    /// One row per point: `metric,tag,evaluator,point_id,value`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["metric", "tag", "evaluator", "point_id", "value"])?;
        for (i, v) in self.per_point.iter().enumerate() {
            out.write_record([
                self.metric.as_str(),
                self.tag.as_str(),
                self.evaluator.as_str(),
                &i.to_string(),
                &v.to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn aggregate_json(&self) -> serde_json::Value {
        serde_json::json!({
            "metric": self.metric,
            "tag": self.tag,
            "evaluator": self.evaluator,
            "aggregate": self.aggregate,
        })
    }
}

fn orbits(values: &[f64], order: usize) -> Result<std::slice::Chunks<'_, f64>, MetricsError> {
    if order == 0 || values.is_empty() {
        return Err(MetricsError::EmptyOrbit);
    }
    if values.len() % order != 0 {
        return Err(MetricsError::OrbitLayout {
            found: values.len(),
            order,
        });
    }
    Ok(values.chunks(order))
}

/// Population standard deviation over each orbit divided by `normalizer`.
pub fn orbit_rsd(values: &[f64], order: usize, normalizer: f64) -> Result<Vec<f64>, MetricsError> {
    if !(normalizer > 0.0) {
        return Err(MetricsError::Normalizer(normalizer));
    }
    Ok(orbits(values, order)?
        .map(|o| {
            let m = o.iter().sum::<f64>() / o.len() as f64;
            let var = o.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / o.len() as f64;
            var.sqrt() / normalizer
        })
        .collect())
}

/// Number of orbit elements whose predicted class matches the identity
/// element's; `scores` has one column per prediction.
pub fn orbit_same_prediction(scores: &DMatrix<f64>, order: usize) -> Result<Vec<f64>, MetricsError> {
    if scores.nrows() < 2 {
        return Err(MetricsError::Channels(scores.nrows()));
    }
    let classes: Vec<f64> = (0..scores.ncols())
        .map(|c| argmax(scores.column(c).as_slice()) as f64)
        .collect();
    Ok(orbits(&classes, order)?
        .map(|o| o.iter().filter(|&&c| c == o[0]).count() as f64)
        .collect())
}

/// Agreement rule for [`continuous_osp`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Agreement {
    /// Same argmax (lowest index on ties).
    Argmax,
    /// Max-abs difference within the tolerance.
    Within(f64),
}

impl Agreement {
    fn agrees(self, a: &[f64], b: &[f64]) -> bool {
        match self {
            Agreement::Argmax => argmax(a) == argmax(b),
            Agreement::Within(tol) => a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol),
        }
    }
}

/// Fraction of `angles` at which the prediction agrees with the unrotated
/// one. `predict` maps a batch (one input per column) to outputs;
/// `rotate` maps one input and an angle to the rotated input.
pub fn continuous_osp_at(
    predict: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    rotate: &dyn Fn(&[f64], f64) -> Vec<f64>,
    inputs: &DMatrix<f64>,
    angles: &[f64],
    rule: Agreement,
) -> Result<Vec<f64>, MetricsError> {
    if angles.is_empty() {
        return Err(MetricsError::EmptyOrbit);
    }
    let d = inputs.nrows();
    let n = inputs.ncols();
    let k = angles.len() + 1;
    let mut batch = DMatrix::zeros(d, n * k);
    for i in 0..n {
        let x = inputs.column(i);
        batch.column_mut(i * k).copy_from(&x);
        for (j, &a) in angles.iter().enumerate() {
            batch.column_mut(i * k + j + 1).copy_from_slice(&rotate(x.as_slice(), a));
        }
    }
    continuous_osp_from_predictions(&predict(&batch), angles.len(), rule)
}

/// Continuous OSP from recorded predictions laid out as each point followed
/// by its `samples` rotated copies.
pub fn continuous_osp_from_predictions(
    predictions: &DMatrix<f64>,
    samples: usize,
    rule: Agreement,
) -> Result<Vec<f64>, MetricsError> {
    if samples == 0 {
        return Err(MetricsError::EmptyOrbit);
    }
    let k = samples + 1;
    if predictions.ncols() % k != 0 {
        return Err(MetricsError::OrbitLayout {
            found: predictions.ncols(),
            order: k,
        });
    }
    Ok((0..predictions.ncols() / k)
        .map(|i| {
            let base = predictions.column(i * k);
            let hits = (1..k)
                .filter(|&j| rule.agrees(predictions.column(i * k + j).as_slice(), base.as_slice()))
                .count();
            hits as f64 / samples as f64
        })
        .collect())
}

/// [`continuous_osp_at`] over `samples` Haar-random planar angles.
pub fn continuous_osp(
    predict: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    rotate: &dyn Fn(&[f64], f64) -> Vec<f64>,
    inputs: &DMatrix<f64>,
    samples: usize,
    seed: u64,
    rule: Agreement,
) -> Result<Vec<f64>, MetricsError> {
    continuous_osp_at(predict, rotate, inputs, &haar_so2(samples, seed), rule)
}

/// Evaluation batch for [`orbit_mse`]: each input followed by its images
/// under `maps`.
pub fn transformed_inputs(inputs: &DMatrix<f64>, maps: &[SampleMap]) -> Result<DMatrix<f64>, crate::groups::GroupError> {
    let stride = maps.len() + 1;
    let mut out = DMatrix::zeros(inputs.nrows(), inputs.ncols() * stride);
    for i in 0..inputs.ncols() {
        let x = inputs.column(i);
        out.column_mut(i * stride).copy_from(&x);
        for (j, m) in maps.iter().enumerate() {
            out.column_mut(i * stride + j + 1).copy_from_slice(&m.apply(x.as_slice())?);
        }
    }
    Ok(out)
}

/// Mean over transforms of `|rho_Y(g)^-1 f(rho_X(g) x) - f(x)|^2`.
/// `predictions` has column `i * (k + 1)` at the untransformed point and
/// `i * (k + 1) + 1 + j` at transform `j`.
pub fn orbit_mse(predictions: &DMatrix<f64>, label_maps: &[SampleMap]) -> Result<Vec<f64>, MetricsError> {
    let k = label_maps.len();
    if k == 0 {
        return Err(MetricsError::EmptyOrbit);
    }
    let stride = k + 1;
    if predictions.ncols() % stride != 0 {
        return Err(MetricsError::OrbitLayout {
            found: predictions.ncols(),
            order: stride,
        });
    }
    let inverses: Vec<SampleMap> = label_maps.iter().map(|m| m.inverse()).collect();
    Ok((0..predictions.ncols() / stride)
        .map(|i| {
            let base = predictions.column(i * stride);
            inverses
                .iter()
                .enumerate()
                .map(|(j, inv)| {
                    let back = inv
                        .apply(predictions.column(i * stride + j + 1).as_slice())
                        .expect("label map matches prediction width");
                    back.iter().zip(base.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                })
                .sum::<f64>()
                / k as f64
        })
        .collect())
}

/// Per-point `|ensemble - mu| / scale`.
pub fn ntk_deviation(ensemble: &[f64], mu: &[f64], scale: f64) -> Result<Vec<f64>, MetricsError> {
    if ensemble.len() != mu.len() {
        return Err(MetricsError::Mismatch(ensemble.len(), mu.len()));
    }
    if !(scale > 0.0) {
        return Err(MetricsError::Normalizer(scale));
    }
    Ok(ensemble.iter().zip(mu).map(|(a, b)| (a - b).abs() / scale).collect())
}

/// Per-column `|ensemble - mu|_2 / scale` for vector predictions.
pub fn ntk_deviation_vectors(ensemble: &DMatrix<f64>, mu: &DMatrix<f64>, scale: f64) -> Result<Vec<f64>, MetricsError> {
    if ensemble.shape() != mu.shape() {
        return Err(MetricsError::Mismatch(ensemble.len(), mu.len()));
    }
    if !(scale > 0.0) {
        return Err(MetricsError::Normalizer(scale));
    }
    Ok((0..ensemble.ncols())
        .map(|c| (ensemble.column(c) - mu.column(c)).norm() / scale)
        .collect())
}

/// `sqrt(2/pi) (sigma/delta) exp(-delta^2 / (2 sigma^2))`, capped at 1.
pub fn deviation_probability_bound(sigma: f64, delta: f64) -> f64 {
    if sigma <= 0.0 {
        return 0.0;
    }
    let r = delta / sigma;
    ((2.0 / PI).sqrt() / r * (-0.5 * r * r).exp()).min(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SizeBound {
    /// Smallest `M > -(2 sigma^2 / delta^2) ln(sqrt(pi) epsilon)`.
    pub closed_form: u64,
    /// Smallest `M` whose deviation bound for the mean of `M` members is at
    /// most `epsilon`.
    pub implicit: u64,
}

/// Ensemble size needed so the mean deviates by more than `delta` with
/// probability at most `epsilon`, given member variance `sigma2`.
pub fn ensemble_size_bound(sigma2: f64, delta: f64, epsilon: f64) -> Result<SizeBound, MetricsError> {
    if !(epsilon > 0.0 && epsilon < 1.0 / PI.sqrt()) {
        return Err(MetricsError::Epsilon(epsilon));
    }
    if !(delta > 0.0) {
        return Err(MetricsError::Delta(delta));
    }
    if !(sigma2 >= 0.0) {
        return Err(MetricsError::Variance(sigma2));
    }
    if sigma2 == 0.0 {
        return Ok(SizeBound {
            closed_form: 1,
            implicit: 1,
        });
    }
    let threshold = -(2.0 * sigma2 / (delta * delta)) * (PI.sqrt() * epsilon).ln();
    let closed_form = (threshold.floor() as u64 + 1).max(1);
    let bound = |m: u64| deviation_probability_bound((sigma2 / m as f64).sqrt(), delta);
    let mut hi = 1u64;
    while bound(hi) > epsilon {
        hi *= 2;
    }
    let mut lo = 0u64;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if bound(mid) <= epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(SizeBound {
        closed_form,
        implicit: hi,
    })
}
