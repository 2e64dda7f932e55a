//! Closed-form gradient-flow dynamics of the infinite-width ensemble.
//!
//! With `A = Theta^-1 (I - exp(-eta Theta t))` evaluated spectrally:
//!
//! * mean `mu_t(x) = Theta(x,X) A Y`
//! * covariance `Sigma_t(x,x') = K(x,x') + Theta(x,X) A K A Theta(X,x')
//!   - Theta(x,X) A K(X,x') - K(x,X) A Theta(X,x')`
//! * linearized member `f_t(x) = f_0(x) - Theta(x,X) A (f_0(X) - Y)`
//!
//! Outputs are independent across channels with a shared kernel, so labels
//! are a matrix with one row per (sample, output position) and one column
//! per channel.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::GramSystem;

/// Eigenvalues below this fraction of the largest one count as zero.
pub const NULL_EIGENVALUE_RTOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq)]
pub enum DynamicsError {
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("training time must be nonnegative, got {0}")]
    Time(f64),
    #[error("{what}: expected {expected}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

/// Training time: a finite value or the converged limit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainingTime {
    Finite(f64),
    #[serde(with = "infinity")]
    Infinite,
}

mod infinity {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str("inf")
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<(), D::Error> {
        let s = String::deserialize(d)?;
        if s == "inf" {
            Ok(())
        } else {
            Err(D::Error::custom(format!("expected a number or \"inf\", got {s:?}")))
        }
    }
}

impl std::fmt::Display for TrainingTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainingTime::Finite(t) => write!(f, "{t}"),
            TrainingTime::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    pub eta: f64,
    pub time: TrainingTime,
}

impl DynamicsConfig {
    pub fn new(eta: f64, time: TrainingTime) -> Result<Self, DynamicsError> {
        let cfg = DynamicsConfig { eta, time };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(DynamicsError::LearningRate(self.eta));
        }
        if let TrainingTime::Finite(t) = self.time {
            if !(t >= 0.0) {
                return Err(DynamicsError::Time(t));
            }
        }
        Ok(())
    }

    /// Flow time reached by `steps` full-batch gradient steps on the loss
    /// `1/(2N) sum_i |f(x_i) - y_i|^2`: each step advances `t` by `1/N`.
    pub fn after_gd_steps(eta: f64, steps: u64, train_size: usize) -> Result<Self, DynamicsError> {
        Self::new(eta, TrainingTime::Finite(steps as f64 / train_size as f64))
    }

    /// Spectral filter `(1 - exp(-eta lambda t)) / lambda`, with eigenvalues
    /// below `threshold` treated as exactly zero.
    pub fn filter(&self, lambda: f64, threshold: f64) -> f64 {
        let zero = lambda <= threshold;
        match self.time {
            TrainingTime::Infinite => {
                if zero {
                    0.0
                } else {
                    1.0 / lambda
                }
            }
            TrainingTime::Finite(t) => {
                if zero {
                    self.eta * t
                } else {
                    -(-self.eta * lambda * t).exp_m1() / lambda
                }
            }
        }
    }
}

fn null_threshold(gram: &GramSystem) -> f64 {
    let lmax = gram.eigenvalues.iter().cloned().fold(0.0, f64::max);
    NULL_EIGENVALUE_RTOL * lmax
}

/// `V diag(f(lambda)) V^T` over the NTK Gram's eigendecomposition.
pub fn spectral_apply(gram: &GramSystem, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let v = &gram.eigenvectors;
    let mut scaled = v.clone();
    for (j, &l) in gram.eigenvalues.iter().enumerate() {
        let fl = f(l);
        scaled.column_mut(j).scale_mut(fl);
    }
    scaled * v.transpose()
}

/// `Theta^-1 T_t` with the null-space conventions of [`DynamicsConfig::filter`].
pub fn spectral_filter(gram: &GramSystem, cfg: &DynamicsConfig) -> DMatrix<f64> {
    let thr = null_threshold(gram);
    spectral_apply(gram, |l| cfg.filter(l, thr))
}

/// Spectral pseudo-inverse of the NTK Gram.
pub fn pseudo_inverse(gram: &GramSystem) -> DMatrix<f64> {
    spectral_filter(
        gram,
        &DynamicsConfig {
            eta: 1.0,
            time: TrainingTime::Infinite,
        },
    )
}

/// Reshape per-sample label columns into Gram row layout: row
/// `i * positions + a`, column = channel.
pub fn labels_to_rows(labels: &DMatrix<f64>, positions: usize) -> DMatrix<f64> {
    let n = labels.ncols();
    let channels = labels.nrows() / positions;
    DMatrix::from_fn(n * positions, channels, |r, c| labels[((r % positions) * channels + c, r / positions)])
}

/// Inverse of [`labels_to_rows`].
pub fn rows_to_labels(rows: &DMatrix<f64>, positions: usize) -> DMatrix<f64> {
    let n = rows.nrows() / positions;
    let channels = rows.ncols();
    DMatrix::from_fn(positions * channels, n, |f, i| rows[(i * positions + f / channels, f % channels)])
}

/// Time-`t` predictor bound to one Gram system.
#[derive(Debug, Clone)]
pub struct Dynamics<'a> {
    pub gram: &'a GramSystem,
    pub cfg: DynamicsConfig,
    filter: DMatrix<f64>,
}

impl<'a> Dynamics<'a> {
    pub fn new(gram: &'a GramSystem, cfg: DynamicsConfig) -> Result<Self, DynamicsError> {
        cfg.validate()?;
        Ok(Dynamics {
            filter: spectral_filter(gram, &cfg),
            gram,
            cfg,
        })
    }

    pub fn filter(&self) -> &DMatrix<f64> {
        &self.filter
    }

    fn check_rows(&self, what: &'static str, m: &DMatrix<f64>) -> Result<(), DynamicsError> {
        if m.nrows() != self.gram.len() {
            return Err(DynamicsError::Dimension {
                what,
                expected: self.gram.len(),
                found: m.nrows(),
            });
        }
        Ok(())
    }

    fn check_cols(&self, what: &'static str, m: &DMatrix<f64>) -> Result<(), DynamicsError> {
        if m.ncols() != self.gram.len() {
            return Err(DynamicsError::Dimension {
                what,
                expected: self.gram.len(),
                found: m.ncols(),
            });
        }
        Ok(())
    }

    /// `A Y`, reusable across test batches.
    pub fn weights(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_rows("label rows", y)?;
        Ok(&self.filter * y)
    }

    /// `mu_t` for each row of `theta_test` (test rows against training set).
    pub fn mean(&self, y: &DMatrix<f64>, theta_test: &DMatrix<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_cols("test kernel columns", theta_test)?;
        Ok(theta_test * self.weights(y)?)
    }

    /// `Sigma_t` between the rows of two test batches.
    pub fn covariance(
        &self,
        k_pair: &DMatrix<f64>,
        theta_a: &DMatrix<f64>,
        k_a: &DMatrix<f64>,
        theta_b: &DMatrix<f64>,
        k_b: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        for (what, m) in [
            ("theta rows (a)", theta_a),
            ("nngp rows (a)", k_a),
            ("theta rows (b)", theta_b),
            ("nngp rows (b)", k_b),
        ] {
            self.check_cols(what, m)?;
        }
        if k_pair.shape() != (theta_a.nrows(), theta_b.nrows()) {
            return Err(DynamicsError::Dimension {
                what: "pair nngp block",
                expected: theta_a.nrows() * theta_b.nrows(),
                found: k_pair.len(),
            });
        }
        let a = &self.filter;
        let ta_a = theta_a * a;
        let ka_a = k_a * a;
        let s1 = &ta_a * (&self.gram.nngp * (a * theta_b.transpose()));
        let s2 = &ta_a * k_b.transpose();
        let s2h = ka_a * theta_b.transpose();
        Ok(k_pair + s1 - s2 - s2h)
    }

    /// Pointwise variance `Sigma_t(x, x)` for each test row.
    pub fn variance(&self, k_self: &[f64], theta_test: &DMatrix<f64>, k_test: &DMatrix<f64>) -> Result<Vec<f64>, DynamicsError> {
        self.check_cols("theta rows", theta_test)?;
        self.check_cols("nngp rows", k_test)?;
        let a = &self.filter;
        let ta = theta_test * a;
        let ka = k_test * a;
        let tak = &ta * &self.gram.nngp;
        Ok((0..theta_test.nrows())
            .map(|r| {
                let s1 = tak.row(r).dot(&ta.row(r));
                let s2 = ta.row(r).dot(&k_test.row(r));
                let s2h = ka.row(r).dot(&theta_test.row(r));
                k_self[r] + s1 - s2 - s2h
            })
            .collect())
    }

    /// Linearized trajectory of one member from its initial outputs.
    pub fn linearized_member(
        &self,
        y: &DMatrix<f64>,
        f0_train: &DMatrix<f64>,
        f0_test: &DMatrix<f64>,
        theta_test: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, DynamicsError> {
        self.check_rows("initial train outputs", f0_train)?;
        self.check_cols("test kernel columns", theta_test)?;
        if f0_test.shape() != (theta_test.nrows(), y.ncols()) {
            return Err(DynamicsError::Dimension {
                what: "initial test outputs",
                expected: theta_test.nrows() * y.ncols(),
                found: f0_test.len(),
            });
        }
        let resid = f0_train - y;
        Ok(f0_test - theta_test * (&self.filter * resid))
    }
}
