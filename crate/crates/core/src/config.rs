//! Experiment configuration: one TOML file per experiment, strict schema,
//! all randomness derived from a single root seed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::TrainingTime;
use crate::ensemble::Readout;
use crate::groups::Geometry;
use crate::netspec::{NetworkSpec, Shape, SpecError};
use crate::tasks::SpinDistribution;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("spec: {0}")]
    Spec(#[from] SpecError),
    #[error("{key}: {reason}")]
    Invalid { key: &'static str, reason: String },
}

fn invalid(key: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// Run directory; the command-line flag takes precedence.
    #[serde(default)]
    pub output: Option<PathBuf>,
    pub task: TaskConfig,
    #[serde(default)]
    pub group: GroupConfig,
    pub spec: NetworkSpec,
    #[serde(default)]
    pub dynamics: Option<DynamicsBlock>,
    #[serde(default)]
    pub ensemble: Option<EnsembleBlock>,
    #[serde(default)]
    pub metrics: MetricsBlock,
}

fn gaussian_400() -> SpinDistribution {
    SpinDistribution::Gaussian {
        mean: 0.0,
        variance: 400.0,
    }
}

fn half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskConfig {
    /// Periodic spin lattice; labels are per-site local energies.
    Ising {
        side: usize,
        train: usize,
        test: usize,
        ood: usize,
        #[serde(default = "gaussian_400")]
        ood_spins: SpinDistribution,
    },
    /// Pairs of 3-vectors labelled by their cross product.
    CrossProduct {
        train: usize,
        test: usize,
        ood: usize,
        #[serde(default = "half")]
        ood_poisson_mean: f64,
    },
    /// Band-limited random images with a fixed linear class rule.
    SyntheticImage {
        side: usize,
        classes: usize,
        train: usize,
        test: usize,
    },
}

impl TaskConfig {
    pub fn input_shape(&self) -> Shape {
        match self {
            TaskConfig::Ising { side, .. } | TaskConfig::SyntheticImage { side, .. } => Shape::grid(vec![*side, *side], 1),
            TaskConfig::CrossProduct { .. } => Shape::grid(vec![2], 3),
        }
    }

    pub fn label_len(&self) -> usize {
        match self {
            TaskConfig::Ising { side, .. } => side * side,
            TaskConfig::CrossProduct { .. } => 3,
            TaskConfig::SyntheticImage { classes, .. } => *classes,
        }
    }

    pub fn geometry(&self) -> Option<Geometry> {
        match self {
            TaskConfig::Ising { side, .. } => Some(Geometry::SpinLattice { side: *side }),
            TaskConfig::SyntheticImage { side, .. } => Some(Geometry::PixelGrid { side: *side }),
            TaskConfig::CrossProduct { .. } => None,
        }
    }

    /// Label standard deviation used as the default metric scale.
    pub fn label_scale(&self) -> f64 {
        match self {
            TaskConfig::Ising { .. } => 2.0,
            TaskConfig::CrossProduct { .. } => std::f64::consts::SQRT_2,
            TaskConfig::SyntheticImage { .. } => 1.0,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskConfig::SyntheticImage { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GroupConfig {
    /// No augmentation.
    #[default]
    Trivial,
    /// `C_k` rotations acting by exact index permutations.
    Cyclic { order: usize },
    /// `C_k` image rotations by bilinear interpolation.
    Interpolated { order: usize },
    /// A fixed set of Haar-random 3D rotations (not a group).
    RandomRotations { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsBlock {
    pub eta: f64,
    pub times: Vec<TrainingTime>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    pub widths: Vec<usize>,
    /// Ensemble sizes; members are trained once per width and the first `M`
    /// form each cell.
    pub members: Vec<usize>,
    pub eta: f64,
    pub steps: u64,
    pub checkpoints: Vec<u64>,
    /// Defaults to the task's readout.
    #[serde(default)]
    pub readout: Option<Readout>,
}

impl EnsembleBlock {
    pub fn max_members(&self) -> usize {
        self.members.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    OrbitRsd,
    Osp,
    ContinuousOsp,
    OrbitMse,
    NtkDeviation,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::OrbitRsd => "orbit_rsd",
            ReportKind::Osp => "osp",
            ReportKind::ContinuousOsp => "continuous_osp",
            ReportKind::OrbitMse => "orbit_mse",
            ReportKind::NtkDeviation => "ntk_deviation",
        }
    }

    /// Whether the report consumes Haar-sampled transforms rather than the
    /// configured group's orbit.
    pub fn uses_haar(self) -> bool {
        matches!(self, ReportKind::ContinuousOsp | ReportKind::OrbitMse)
    }
}

fn hundred() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsBlock {
    /// Empty selects the task defaults.
    #[serde(default)]
    pub reports: Vec<ReportKind>,
    /// Defaults to the task's label scale.
    #[serde(default)]
    pub normalizer: Option<f64>,
    /// Haar samples per point for `orbit_mse` and `continuous_osp`.
    #[serde(default = "hundred")]
    pub haar_samples: usize,
    /// Evaluate at most this many training points.
    #[serde(default)]
    pub max_train_points: Option<usize>,
}

impl Default for MetricsBlock {
    fn default() -> Self {
        MetricsBlock {
            reports: Vec::new(),
            normalizer: None,
            haar_samples: hundred(),
            max_train_points: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn reports(&self) -> Vec<ReportKind> {
        if !self.metrics.reports.is_empty() {
            let mut r = self.metrics.reports.clone();
            r.sort();
            r.dedup();
            return r;
        }
        let mut r = Vec::new();
        let order = self.group_order();
        match self.task {
            TaskConfig::Ising { .. } => {
                if order > 1 {
                    r.push(ReportKind::OrbitRsd);
                }
            }
            TaskConfig::CrossProduct { .. } => r.push(ReportKind::OrbitMse),
            TaskConfig::SyntheticImage { .. } => {
                if order > 1 {
                    r.push(ReportKind::Osp);
                }
                r.push(ReportKind::ContinuousOsp);
            }
        }
        if self.ensemble.is_some() && !self.task.is_classification() {
            r.push(ReportKind::NtkDeviation);
        }
        r.sort();
        r
    }

    pub fn group_order(&self) -> usize {
        match self.group {
            GroupConfig::Trivial => 1,
            GroupConfig::Cyclic { order } | GroupConfig::Interpolated { order } => order,
            GroupConfig::RandomRotations { count } => count,
        }
    }

    /// Reduction applied to predictions before metrics: the explicit
    /// ensemble readout, else total energy for Ising and raw outputs
    /// otherwise.
    pub fn readout(&self) -> Readout {
        match (&self.ensemble, &self.task) {
            (Some(EnsembleBlock { readout: Some(r), .. }), _) => *r,
            (_, TaskConfig::Ising { .. }) => Readout::IsingEnergy,
            _ => Readout::Outputs,
        }
    }

    pub fn normalizer(&self) -> f64 {
        self.metrics.normalizer.unwrap_or_else(|| self.task.label_scale())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let (train, test) = match self.task {
            TaskConfig::Ising { side, train, test, .. } => {
                if side < 2 {
                    return Err(invalid("task.side", "lattice side must be at least 2"));
                }
                (train, test)
            }
            TaskConfig::CrossProduct {
                train,
                test,
                ood_poisson_mean,
                ..
            } => {
                if !(ood_poisson_mean > 0.0) {
                    return Err(invalid("task.ood_poisson_mean", "must be positive"));
                }
                (train, test)
            }
            TaskConfig::SyntheticImage { side, classes, train, test } => {
                if side < 8 {
                    return Err(invalid("task.side", "images need side >= 8"));
                }
                if classes < 2 {
                    return Err(invalid("task.classes", "need at least two classes"));
                }
                (train, test)
            }
        };
        if train == 0 || test == 0 {
            return Err(invalid("task", "train and test sets must be nonempty"));
        }
        let trace = self.spec.validate()?;
        let want = self.task.input_shape();
        if self.spec.input.len() != want.len() {
            return Err(invalid(
                "spec.input",
                format!("{} features, task provides {}", self.spec.input.len(), want.len()),
            ));
        }
        if !self.spec.input.is_flat() && self.spec.input != want {
            return Err(invalid("spec.input", format!("spatial input must be {want:?}")));
        }
        let out = trace.last().expect("validated spec has layers");
        if out.len() != self.task.label_len() {
            return Err(invalid(
                "spec.layers",
                format!("output has {} features, labels have {}", out.len(), self.task.label_len()),
            ));
        }
        match (&self.group, &self.task) {
            (GroupConfig::Trivial, _) => {}
            (GroupConfig::Cyclic { order }, TaskConfig::Ising { .. } | TaskConfig::SyntheticImage { .. }) => {
                if ![1, 2, 4].contains(order) {
                    return Err(invalid("group.order", "exact grid rotations need order 1, 2 or 4"));
                }
            }
            (GroupConfig::Interpolated { order }, TaskConfig::SyntheticImage { .. }) => {
                if *order == 0 {
                    return Err(invalid("group.order", "must be positive"));
                }
            }
            (GroupConfig::RandomRotations { count }, TaskConfig::CrossProduct { .. }) => {
                if *count == 0 {
                    return Err(invalid("group.count", "must be positive"));
                }
            }
            (g, _) => {
                return Err(invalid("group.kind", format!("{g:?} does not act on this task")));
            }
        }
        if let Some(d) = &self.dynamics {
            if !(d.eta > 0.0) {
                return Err(invalid("dynamics.eta", "must be positive"));
            }
            if d.times.iter().any(|t| matches!(t, TrainingTime::Finite(x) if !(*x >= 0.0 && x.is_finite()))) {
                return Err(invalid("dynamics.times", "times must be nonnegative"));
            }
        }
        if let Some(e) = &self.ensemble {
            if e.widths.is_empty() || e.widths.contains(&0) {
                return Err(invalid("ensemble.widths", "need positive widths"));
            }
            if e.members.is_empty() || e.members.contains(&0) {
                return Err(invalid("ensemble.members", "need positive ensemble sizes"));
            }
            if !(e.eta >= 0.0 && e.eta.is_finite()) {
                return Err(invalid("ensemble.eta", "must be finite and nonnegative"));
            }
            if e.checkpoints.is_empty() || e.checkpoints.iter().any(|&c| c > e.steps) {
                return Err(invalid("ensemble.checkpoints", "need checkpoints within [0, steps]"));
            }
            if e.readout == Some(Readout::IsingEnergy) && !matches!(self.task, TaskConfig::Ising { .. }) {
                return Err(invalid("ensemble.readout", "ising_energy needs the ising task"));
            }
        }
        if let Some(n) = self.metrics.normalizer {
            if !(n > 0.0) {
                return Err(invalid("metrics.normalizer", "must be positive"));
            }
        }
        for r in self.reports() {
            let scalar = self.readout() == Readout::IsingEnergy || self.task.label_len() == 1;
            let ok = match r {
                ReportKind::OrbitRsd => {
                    scalar && self.group_order() > 1 && !matches!(self.group, GroupConfig::RandomRotations { .. })
                }
                ReportKind::Osp => self.task.is_classification() && self.group_order() > 1,
                ReportKind::ContinuousOsp => matches!(self.task, TaskConfig::SyntheticImage { .. }),
                ReportKind::OrbitMse => matches!(self.task, TaskConfig::CrossProduct { .. }),
                ReportKind::NtkDeviation => self.ensemble.is_some(),
            };
            if !ok {
                return Err(invalid("metrics.reports", format!("{} is not available for this experiment", r.as_str())));
            }
            if r.uses_haar() && self.metrics.haar_samples == 0 {
                return Err(invalid("metrics.haar_samples", "must be positive"));
            }
        }
        Ok(())
    }
}
