//! Config-driven experiment pipeline over a run directory.
//!
//! Stages run in order `generate -> augment -> gram -> dynamics -> train ->
//! metrics`; each reads its inputs from the run directory and records its
//! status in `manifest.toml`. Layout:
//!
//! ```text
//! manifest.toml                      resolved config, tool version, stage status
//! datasets/{train,test,ood}.oldata   base datasets
//! datasets/train_augmented.oldata    orbit-augmented training set
//! augment/permutations.csv           element,index,image (exact groups only)
//! gram/train.olgram, gram/spectrum.csv
//! dynamics/ntk.csv                   tag,time,point_id,channel,mean,variance
//! ensemble/w<width>/step-<s>_<tag>.csv   member_id,point_id,channel,value
//! ensemble/w<width>/members.csv, ensemble/w<width>/manifest.toml
//! metrics/<report>.csv               metric,tag,time,cell,evaluator,point_id,value
//! metrics/summary.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, GroupConfig, ReportKind, TaskConfig};
use crate::dynamics::{labels_to_rows, rows_to_labels, Dynamics, DynamicsConfig};
use crate::ensemble::{derive_seed, ensemble_mean, train_ensemble, EnsembleConfig, EvalSet, Readout};
use crate::groups::{
    augment_with_maps, cyclic_rotation_group, haar_so2, haar_so3, interpolated_image_rotations, permutation_table,
    vector_block_map, AugmentedDataset, GroupAction, SampleMap,
};
use crate::kernels::{GramSystem, KernelEngine};
use crate::metrics::{
    continuous_osp_from_predictions, median, ntk_deviation_vectors, orbit_mse, orbit_rsd, orbit_same_prediction,
    transformed_inputs, Agreement, Aggregate,
};
use crate::tasks::{
    cross_product_generate, ising_generate, load_dataset, save_dataset, ImageModel, LabeledDataset, SpinDistribution,
    SplitTag, VectorDistribution,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Seed streams derived from the root seed.
mod stream {
    pub const DATA: u64 = 1;
    pub const IMAGE_RULE: u64 = 2;
    pub const GROUP: u64 = 3;
    pub const HAAR_EVAL: u64 = 4;
    pub const ENSEMBLE: u64 = 5;
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path} already exists; pass --overwrite to replace it")]
    OutputExists { path: PathBuf },
    #[error("stage {stage} is already complete in {path}; pass --overwrite to rerun it")]
    StageComplete { stage: Stage, path: PathBuf },
    #[error("stage {stage} was started but never finished in {path}; rerun that stage with --overwrite")]
    PartialRun { stage: Stage, path: PathBuf },
    #[error("stage {stage} needs stage {needs} to be complete first")]
    MissingStage { stage: Stage, needs: Stage },
    #[error("{path} holds a different experiment config; pass --overwrite to start over")]
    ConfigChanged { path: PathBuf },
    #[error("stage {stage}: {message}")]
    Stage { stage: Stage, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generate,
    Augment,
    Gram,
    Dynamics,
    Train,
    Metrics,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Generate,
        Stage::Augment,
        Stage::Gram,
        Stage::Dynamics,
        Stage::Train,
        Stage::Metrics,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Generate => "generate",
            Stage::Augment => "augment",
            Stage::Gram => "gram",
            Stage::Dynamics => "dynamics",
            Stage::Train => "train",
            Stage::Metrics => "metrics",
        }
    }

    fn prerequisites(self, cfg: &ExperimentConfig) -> Vec<Stage> {
        match self {
            Stage::Generate => vec![],
            Stage::Augment => vec![Stage::Generate],
            Stage::Gram => vec![Stage::Augment],
            Stage::Dynamics => vec![Stage::Gram],
            Stage::Train => vec![Stage::Augment],
            Stage::Metrics => {
                let mut v = vec![];
                if needs_dynamics(cfg) {
                    v.push(Stage::Dynamics);
                }
                if cfg.ensemble.is_some() {
                    v.push(Stage::Train);
                }
                v
            }
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn needs_dynamics(cfg: &ExperimentConfig) -> bool {
    cfg.dynamics.is_some() || cfg.reports().contains(&ReportKind::NtkDeviation)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub status: StageStatus,
    #[serde(default)]
    pub wall_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    #[serde(default)]
    pub stages: BTreeMap<Stage, StageRecord>,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Overwrite {
    /// Fail if outputs already exist.
    #[default]
    Refuse,
    /// Replace existing outputs.
    Replace,
}

fn io_err(stage: Stage, what: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> PipelineError {
    let what = what.to_string();
    move |e| PipelineError::Stage {
        stage,
        message: format!("{what}: {e}"),
    }
}

fn stage_err(stage: Stage) -> impl Fn(&dyn std::fmt::Display) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

/// A run directory and its manifest.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    fn manifest_path(root: &Path) -> PathBuf {
        root.join("manifest.toml")
    }

    /// Opens `root` for `config`, creating it when absent. An existing
    /// directory must hold the same config unless `overwrite` replaces it.
    pub fn prepare(root: &Path, config: &ExperimentConfig, overwrite: Overwrite) -> Result<Self, PipelineError> {
        config.validate()?;
        let mpath = Self::manifest_path(root);
        if mpath.exists() {
            let existing = Self::open(root)?;
            if existing.manifest.config == *config {
                return Ok(existing);
            }
            if overwrite == Overwrite::Refuse {
                return Err(PipelineError::ConfigChanged { path: root.to_path_buf() });
            }
        }
        Self::create(root, config, overwrite)
    }

    /// Creates a fresh run directory.
    pub fn create(root: &Path, config: &ExperimentConfig, overwrite: Overwrite) -> Result<Self, PipelineError> {
        config.validate()?;
        let nonempty = root.exists() && fs::read_dir(root).map(|mut d| d.next().is_some()).unwrap_or(true);
        if nonempty {
            if overwrite == Overwrite::Refuse {
                return Err(PipelineError::OutputExists { path: root.to_path_buf() });
            }
            fs::remove_dir_all(root).map_err(io_err(Stage::Generate, root.display()))?;
        }
        fs::create_dir_all(root).map_err(io_err(Stage::Generate, root.display()))?;
        let dir = RunDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                tool_version: TOOL_VERSION.to_string(),
                stages: BTreeMap::new(),
                config: config.clone(),
            },
        };
        dir.save_manifest(Stage::Generate)?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        let path = Self::manifest_path(root);
        let text = fs::read_to_string(&path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        manifest.config.validate()?;
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    fn save_manifest(&self, stage: Stage) -> Result<(), PipelineError> {
        let text = toml::to_string(&self.manifest).map_err(|e| stage_err(stage)(&e))?;
        let path = Self::manifest_path(&self.root);
        fs::write(&path, text).map_err(io_err(stage, path.display()))
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.manifest.config
    }

    pub fn is_complete(&self, stage: Stage) -> bool {
        matches!(
            self.manifest.stages.get(&stage),
            Some(StageRecord {
                status: StageStatus::Complete,
                ..
            })
        )
    }

    /// Stages that were started and never finished.
    pub fn incomplete_stages(&self) -> Vec<Stage> {
        self.manifest
            .stages
            .iter()
            .filter(|(_, r)| r.status == StageStatus::Running)
            .map(|(s, _)| *s)
            .collect()
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Runs one stage after checking its prerequisites.
    pub fn run_stage(&mut self, stage: Stage, overwrite: Overwrite) -> Result<(), PipelineError> {
        match self.manifest.stages.get(&stage).map(|r| r.status) {
            Some(StageStatus::Complete) if overwrite == Overwrite::Refuse => {
                return Err(PipelineError::StageComplete {
                    stage,
                    path: self.root.clone(),
                })
            }
            Some(StageStatus::Running) if overwrite == Overwrite::Refuse => {
                return Err(PipelineError::PartialRun {
                    stage,
                    path: self.root.clone(),
                })
            }
            _ => {}
        }
        // An interrupted upstream stage leaves its outputs untrustworthy.
        if let Some(&partial) = self.incomplete_stages().iter().find(|s| **s < stage) {
            return Err(PipelineError::PartialRun {
                stage: partial,
                path: self.root.clone(),
            });
        }
        for needs in stage.prerequisites(self.config()) {
            if !self.is_complete(needs) {
                return Err(PipelineError::MissingStage { stage, needs });
            }
        }
        self.manifest.stages.insert(
            stage,
            StageRecord {
                status: StageStatus::Running,
                wall_seconds: None,
            },
        );
        self.save_manifest(stage)?;
        let start = Instant::now();
        match stage {
            Stage::Generate => stage_generate(self)?,
            Stage::Augment => stage_augment(self)?,
            Stage::Gram => stage_gram(self)?,
            Stage::Dynamics => stage_dynamics(self)?,
            Stage::Train => stage_train(self)?,
            Stage::Metrics => stage_metrics(self)?,
        }
        self.manifest.stages.insert(
            stage,
            StageRecord {
                status: StageStatus::Complete,
                wall_seconds: Some(start.elapsed().as_secs_f64()),
            },
        );
        self.save_manifest(stage)
    }

    /// Stages this config uses, in order.
    pub fn planned_stages(&self) -> Vec<Stage> {
        let cfg = self.config();
        Stage::ALL
            .into_iter()
            .filter(|s| match s {
                Stage::Gram | Stage::Dynamics => needs_dynamics(cfg),
                Stage::Train => cfg.ensemble.is_some(),
                _ => true,
            })
            .collect()
    }
}

/// Runs every stage into a fresh directory.
pub fn run_experiment(config: &ExperimentConfig, output: &Path, overwrite: Overwrite) -> Result<RunDir, PipelineError> {
    let mut dir = RunDir::create(output, config, overwrite)?;
    for stage in dir.planned_stages() {
        dir.run_stage(stage, Overwrite::Refuse)?;
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// Group and evaluation design

/// Input and label transforms used for augmentation.
pub struct GroupMaps {
    pub rx: Vec<SampleMap>,
    pub ry: Vec<SampleMap>,
    /// Present when the transforms form a group acting by exact index
    /// permutations.
    pub action: Option<GroupAction>,
}

pub fn group_maps(cfg: &ExperimentConfig) -> Result<GroupMaps, String> {
    let geometry = cfg.task.geometry();
    Ok(match cfg.group {
        GroupConfig::Trivial => GroupMaps {
            rx: vec![SampleMap::Identity],
            ry: vec![SampleMap::Identity],
            action: None,
        },
        GroupConfig::Cyclic { order } => {
            let geometry = geometry.ok_or("cyclic group needs a grid task")?;
            let mut g = cyclic_rotation_group(order, geometry).map_err(|e| e.to_string())?;
            if matches!(cfg.task, TaskConfig::Ising { .. }) {
                g = g.with_labels_like_inputs();
            }
            GroupMaps {
                rx: g.rho_x.clone(),
                ry: g.rho_y.clone(),
                action: Some(g),
            }
        }
        GroupConfig::Interpolated { order } => {
            let g = interpolated_image_rotations(order).map_err(|e| e.to_string())?;
            GroupMaps {
                rx: g.rho_x,
                ry: g.rho_y,
                action: None,
            }
        }
        GroupConfig::RandomRotations { count } => {
            let rots = haar_so3(count, derive_seed(cfg.seed, &[stream::GROUP]));
            GroupMaps {
                rx: rots.iter().map(|r| vector_block_map(r, 2)).collect(),
                ry: rots.iter().map(|r| vector_block_map(r, 1)).collect(),
                action: None,
            }
        }
    })
}

/// Column layout shared by every evaluation batch.
#[derive(Debug, Clone)]
pub struct EvalDesign {
    /// Columns `i * orbit + h` for `h < orbit` hold each point's image under
    /// group element `h`.
    pub orbit: usize,
    pub orbit_input_maps: Vec<SampleMap>,
    pub orbit_label_maps: Vec<SampleMap>,
    /// After the orbit block, each point followed by `haar` transformed
    /// copies (0 when unused).
    pub haar: usize,
    pub haar_input_maps: Vec<SampleMap>,
    pub haar_label_maps: Vec<SampleMap>,
}

pub fn eval_design(cfg: &ExperimentConfig) -> Result<EvalDesign, String> {
    let g = group_maps(cfg)?;
    let orbit_exact = !matches!(cfg.group, GroupConfig::RandomRotations { .. });
    let (orbit_input_maps, orbit_label_maps) = if orbit_exact {
        (g.rx[1..].to_vec(), g.ry[1..].to_vec())
    } else {
        (vec![], vec![])
    };
    let haar = if cfg.reports().iter().any(|r| r.uses_haar()) {
        cfg.metrics.haar_samples
    } else {
        0
    };
    let seed = derive_seed(cfg.seed, &[stream::HAAR_EVAL]);
    let (haar_input_maps, haar_label_maps) = match cfg.task {
        _ if haar == 0 => (vec![], vec![]),
        TaskConfig::CrossProduct { .. } => {
            let rots = haar_so3(haar, seed);
            (
                rots.iter().map(|r| vector_block_map(r, 2)).collect(),
                rots.iter().map(|r| vector_block_map(r, 1)).collect(),
            )
        }
        _ => (
            haar_so2(haar, seed)
                .into_iter()
                .map(|angle| SampleMap::ImageRotation { angle })
                .collect(),
            vec![SampleMap::Identity; haar],
        ),
    };
    Ok(EvalDesign {
        orbit: orbit_input_maps.len() + 1,
        orbit_input_maps,
        orbit_label_maps,
        haar,
        haar_input_maps,
        haar_label_maps,
    })
}

impl EvalDesign {
    pub fn columns_per_point(&self) -> usize {
        self.orbit + if self.haar > 0 { self.haar + 1 } else { 0 }
    }

    pub fn batch(&self, base: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
        let orbit = transformed_inputs(base, &self.orbit_input_maps).map_err(|e| e.to_string())?;
        if self.haar == 0 {
            return Ok(orbit);
        }
        let haar = transformed_inputs(base, &self.haar_input_maps).map_err(|e| e.to_string())?;
        let mut out = DMatrix::zeros(base.nrows(), orbit.ncols() + haar.ncols());
        out.columns_mut(0, orbit.ncols()).copy_from(&orbit);
        out.columns_mut(orbit.ncols(), haar.ncols()).copy_from(&haar);
        Ok(out)
    }

    /// Orbit block of a prediction table.
    pub fn orbit_block(&self, preds: &DMatrix<f64>) -> DMatrix<f64> {
        let points = preds.ncols() / self.columns_per_point();
        preds.columns(0, points * self.orbit).into_owned()
    }

    /// Haar block of a prediction table.
    pub fn haar_block(&self, preds: &DMatrix<f64>) -> DMatrix<f64> {
        let points = preds.ncols() / self.columns_per_point();
        let start = points * self.orbit;
        preds.columns(start, preds.ncols() - start).into_owned()
    }
}

/// Evaluation inputs per tag.
pub fn eval_sets(dir: &RunDir, design: &EvalDesign) -> Result<Vec<EvalSet>, PipelineError> {
    let cfg = dir.config();
    let mut out = Vec::new();
    for tag in SplitTag::ALL {
        let path = dir.path(&format!("datasets/{}.oldata", tag.as_str()));
        if !path.exists() {
            continue;
        }
        let data = load_dataset(&path).map_err(|e| stage_err(Stage::Dynamics)(&e))?;
        let mut inputs = data.inputs;
        if tag == SplitTag::Train {
            if let Some(m) = cfg.metrics.max_train_points {
                let m = m.min(inputs.ncols());
                inputs = inputs.columns(0, m).into_owned();
            }
        }
        out.push(EvalSet {
            tag,
            inputs: design.batch(&inputs).map_err(|e| stage_err(Stage::Dynamics)(&e))?,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Stages

fn generate_datasets(cfg: &ExperimentConfig) -> Vec<LabeledDataset> {
    let seed = |tag: SplitTag| derive_seed(cfg.seed, &[stream::DATA, tag as u64]);
    match &cfg.task {
        TaskConfig::Ising {
            side,
            train,
            test,
            ood,
            ood_spins,
        } => {
            let mut v = vec![
                ising_generate(*side, *train, seed(SplitTag::Train), SpinDistribution::Uniform, SplitTag::Train),
                ising_generate(*side, *test, seed(SplitTag::Test), SpinDistribution::Uniform, SplitTag::Test),
            ];
            if *ood > 0 {
                v.push(ising_generate(*side, *ood, seed(SplitTag::Ood), *ood_spins, SplitTag::Ood));
            }
            v
        }
        TaskConfig::CrossProduct {
            train,
            test,
            ood,
            ood_poisson_mean,
        } => {
            let mut v = vec![
                cross_product_generate(*train, seed(SplitTag::Train), VectorDistribution::Normal, SplitTag::Train),
                cross_product_generate(*test, seed(SplitTag::Test), VectorDistribution::Normal, SplitTag::Test),
            ];
            if *ood > 0 {
                let dist = VectorDistribution::Poisson {
                    mean: *ood_poisson_mean,
                };
                v.push(cross_product_generate(*ood, seed(SplitTag::Ood), dist, SplitTag::Ood));
            }
            v
        }
        TaskConfig::SyntheticImage {
            side,
            classes,
            train,
            test,
        } => {
            let model = ImageModel::new(*side, *classes, derive_seed(cfg.seed, &[stream::IMAGE_RULE]));
            vec![
                model.generate(*train, seed(SplitTag::Train), SplitTag::Train),
                model.generate(*test, seed(SplitTag::Test), SplitTag::Test),
            ]
        }
    }
}

fn stage_generate(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Generate;
    fs::create_dir_all(dir.path("datasets")).map_err(io_err(stage, "datasets"))?;
    for d in generate_datasets(dir.config()) {
        let path = dir.path(&format!("datasets/{}.oldata", d.tag.as_str()));
        save_dataset(&d, &path).map_err(|e| stage_err(stage)(&e))?;
    }
    Ok(())
}

fn load_augmented(dir: &RunDir, stage: Stage) -> Result<AugmentedDataset, PipelineError> {
    let data = load_dataset(&dir.path("datasets/train_augmented.oldata")).map_err(|e| stage_err(stage)(&e))?;
    AugmentedDataset::from_dataset(data).ok_or_else(|| PipelineError::Stage {
        stage,
        message: "augmented training set lacks its orbit index".into(),
    })
}

fn stage_augment(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Augment;
    let err = stage_err(stage);
    let base = load_dataset(&dir.path("datasets/train.oldata")).map_err(|e| err(&e))?;
    let maps = group_maps(dir.config()).map_err(|e| err(&e))?;
    let aug = augment_with_maps(&base, &maps.rx, &maps.ry).map_err(|e| err(&e))?;
    save_dataset(&aug.data, &dir.path("datasets/train_augmented.oldata")).map_err(|e| err(&e))?;
    if let Some(action) = &maps.action {
        let table = permutation_table(&aug, action).map_err(|e| err(&e))?;
        fs::create_dir_all(dir.path("augment")).map_err(io_err(stage, "augment"))?;
        let mut w = csv::Writer::from_path(dir.path("augment/permutations.csv")).map_err(|e| err(&e))?;
        w.write_record(["element", "index", "image"]).map_err(|e| err(&e))?;
        for (g, perm) in table.iter().enumerate() {
            for (j, &p) in perm.iter().enumerate() {
                w.write_record([g.to_string(), j.to_string(), p.to_string()]).map_err(|e| err(&e))?;
            }
        }
        w.flush().map_err(io_err(stage, "permutations.csv"))?;
    }
    Ok(())
}

fn load_gram(dir: &RunDir, stage: Stage) -> Result<GramSystem, PipelineError> {
    let path = dir.path("gram/train.olgram");
    let file = fs::File::open(&path).map_err(io_err(stage, path.display()))?;
    GramSystem::read_from(std::io::BufReader::new(file)).map_err(|e| stage_err(stage)(&e))
}

fn stage_gram(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Gram;
    let err = stage_err(stage);
    let aug = load_augmented(dir, stage)?;
    let maps = group_maps(dir.config()).map_err(|e| err(&e))?;
    let perms = match &maps.action {
        Some(a) => permutation_table(&aug, a).map_err(|e| err(&e))?,
        None => vec![],
    };
    let engine = KernelEngine::new(&dir.config().spec).map_err(|e| err(&e))?;
    let gram = GramSystem::build(&engine, &aug.data.inputs, perms).map_err(|e| err(&e))?;
    fs::create_dir_all(dir.path("gram")).map_err(io_err(stage, "gram"))?;
    let path = dir.path("gram/train.olgram");
    let file = fs::File::create(&path).map_err(io_err(stage, path.display()))?;
    gram.write_to(std::io::BufWriter::new(file)).map_err(|e| err(&e))?;
    let mut w = csv::Writer::from_path(dir.path("gram/spectrum.csv")).map_err(|e| err(&e))?;
    w.write_record(["index", "eigenvalue"]).map_err(|e| err(&e))?;
    for (i, l) in gram.eigenvalues.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()]).map_err(|e| err(&e))?;
    }
    w.flush().map_err(io_err(stage, "spectrum.csv"))?;
    Ok(())
}

/// Time points evaluated by the dynamics stage: configured times plus the
/// time equivalent of every ensemble checkpoint.
pub fn dynamics_times(cfg: &ExperimentConfig, train_size: usize) -> Vec<(String, DynamicsConfig)> {
    let mut out = Vec::new();
    if let Some(d) = &cfg.dynamics {
        for &t in &d.times {
            out.push((format!("t={t}"), DynamicsConfig { eta: d.eta, time: t }));
        }
    }
    if let Some(e) = &cfg.ensemble {
        for &s in &e.checkpoints {
            let cfg = DynamicsConfig::after_gd_steps(e.eta, s, train_size).expect("validated learning rate");
            out.push((step_label(s), cfg));
        }
    }
    out
}

pub fn step_label(step: u64) -> String {
    format!("step={step}")
}

fn stage_dynamics(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Dynamics;
    let err = stage_err(stage);
    let cfg = dir.config();
    let gram = load_gram(dir, stage)?;
    let aug = load_augmented(dir, stage)?;
    let engine = KernelEngine::new(&cfg.spec).map_err(|e| err(&e))?;
    let positions = engine.output_positions();
    let y = labels_to_rows(&aug.data.labels, positions);
    let design = eval_design(cfg).map_err(|e| err(&e))?;
    let evals = eval_sets(dir, &design)?;
    fs::create_dir_all(dir.path("dynamics")).map_err(io_err(stage, "dynamics"))?;
    let mut w = csv::Writer::from_path(dir.path("dynamics/ntk.csv")).map_err(|e| err(&e))?;
    w.write_record(["tag", "time", "point_id", "channel", "mean", "variance"])
        .map_err(|e| err(&e))?;
    let times = dynamics_times(cfg, aug.len());
    for e in &evals {
        let (k_test, theta_test) = engine.cross(&e.inputs, &aug.data.inputs).map_err(|e| err(&e))?;
        let k_self: Vec<f64> = (0..e.inputs.ncols())
            .map(|c| {
                let x = e.inputs.column(c);
                engine.compute(x.as_slice(), x.as_slice()).map(|p| p.nngp.diagonal().iter().copied().collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| err(&e))?
            .concat();
        for (label, dc) in &times {
            let dynm = Dynamics::new(&gram, *dc).map_err(|e| err(&e))?;
            let mean = rows_to_labels(&dynm.mean(&y, &theta_test).map_err(|e| err(&e))?, positions);
            let var = dynm.variance(&k_self, &theta_test, &k_test).map_err(|e| err(&e))?;
            let channels = mean.nrows() / positions;
            for p in 0..mean.ncols() {
                for f in 0..mean.nrows() {
                    w.write_record([
                        e.tag.as_str(),
                        label,
                        &p.to_string(),
                        &f.to_string(),
                        &mean[(f, p)].to_string(),
                        &var[p * positions + f / channels].to_string(),
                    ])
                    .map_err(|e| err(&e))?;
                }
            }
        }
    }
    w.flush().map_err(io_err(stage, "ntk.csv"))?;
    Ok(())
}

#[derive(Serialize)]
struct EnsembleManifest<'a> {
    width: usize,
    members: usize,
    eta: f64,
    steps: u64,
    checkpoints: &'a [u64],
    run_seed: u64,
    readout: Readout,
    spec: crate::netspec::NetworkSpec,
    seeds: &'a [u64],
}

pub fn ensemble_seed(cfg: &ExperimentConfig, width: usize) -> u64 {
    derive_seed(cfg.seed, &[stream::ENSEMBLE, width as u64])
}

fn stage_train(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Train;
    let err = stage_err(stage);
    let cfg = dir.config();
    let block = cfg.ensemble.as_ref().expect("train stage planned only with an ensemble block");
    let aug = load_augmented(dir, stage)?;
    let design = eval_design(cfg).map_err(|e| err(&e))?;
    let evals = eval_sets(dir, &design)?;
    for &width in &block.widths {
        let ec = EnsembleConfig {
            width,
            members: block.max_members(),
            eta: block.eta,
            steps: block.steps,
            checkpoints: block.checkpoints.clone(),
            seed: ensemble_seed(cfg, width),
            readout: cfg.readout(),
        };
        let run = train_ensemble(&cfg.spec, &ec, &aug.data.inputs, &aug.data.labels, &evals).map_err(|e| err(&e))?;
        let wdir = dir.path(&format!("ensemble/w{width}"));
        fs::create_dir_all(&wdir).map_err(io_err(stage, wdir.display()))?;
        for ((step, tag), members) in &run.predictions {
            let path = wdir.join(format!("step-{step}_{}.csv", tag.as_str()));
            let mut w = csv::Writer::from_path(&path).map_err(|e| err(&e))?;
            w.write_record(["member_id", "point_id", "channel", "value"]).map_err(|e| err(&e))?;
            for (m, p) in members.iter().enumerate() {
                for point in 0..p.ncols() {
                    for ch in 0..p.nrows() {
                        w.write_record([m.to_string(), point.to_string(), ch.to_string(), p[(ch, point)].to_string()])
                            .map_err(|e| err(&e))?;
                    }
                }
            }
            w.flush().map_err(io_err(stage, path.display()))?;
        }
        let mut w = csv::Writer::from_path(wdir.join("members.csv")).map_err(|e| err(&e))?;
        w.write_record(["member_id", "seed", "final_loss"]).map_err(|e| err(&e))?;
        for (m, (seed, loss)) in run.seeds.iter().zip(&run.final_losses).enumerate() {
            w.write_record([m.to_string(), seed.to_string(), loss.to_string()]).map_err(|e| err(&e))?;
        }
        w.flush().map_err(io_err(stage, "members.csv"))?;
        let manifest = EnsembleManifest {
            width,
            members: ec.members,
            eta: ec.eta,
            steps: ec.steps,
            checkpoints: &ec.checkpoints,
            run_seed: ec.seed,
            readout: ec.readout,
            spec: cfg.spec.with_hidden_width(width),
            seeds: &run.seeds,
        };
        let text = toml::to_string(&manifest).map_err(|e| err(&e))?;
        fs::write(wdir.join("manifest.toml"), text).map_err(io_err(stage, "ensemble manifest"))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reading artifacts back

/// NTK means per `(tag, time label)` as `channels x points`.
pub fn read_ntk_means(dir: &RunDir) -> Result<BTreeMap<(SplitTag, String), DMatrix<f64>>, PipelineError> {
    let err = stage_err(Stage::Metrics);
    let mut rdr = csv::Reader::from_path(dir.path("dynamics/ntk.csv")).map_err(|e| err(&e))?;
    let mut cells: BTreeMap<(SplitTag, String), Vec<(usize, usize, f64)>> = BTreeMap::new();
    for rec in rdr.deserialize() {
        let (tag, time, p, ch, mean, _var): (String, String, usize, usize, f64, f64) = rec.map_err(|e| err(&e))?;
        let tag = parse_tag(&tag).ok_or_else(|| err(&format!("unknown tag {tag}")))?;
        cells.entry((tag, time)).or_default().push((p, ch, mean));
    }
    Ok(cells.into_iter().map(|(k, v)| (k, table(&v))).collect())
}

fn parse_tag(s: &str) -> Option<SplitTag> {
    SplitTag::ALL.into_iter().find(|t| t.as_str() == s)
}

fn table(entries: &[(usize, usize, f64)]) -> DMatrix<f64> {
    let points = entries.iter().map(|e| e.0).max().map_or(0, |m| m + 1);
    let channels = entries.iter().map(|e| e.1).max().map_or(0, |m| m + 1);
    let mut m = DMatrix::zeros(channels, points);
    for &(p, c, v) in entries {
        m[(c, p)] = v;
    }
    m
}

/// Member predictions (`channels x points` each) for one width, checkpoint
/// and tag.
pub fn read_member_predictions(dir: &RunDir, width: usize, step: u64, tag: SplitTag) -> Result<Vec<DMatrix<f64>>, PipelineError> {
    let err = stage_err(Stage::Metrics);
    let path = dir.path(&format!("ensemble/w{width}/step-{step}_{}.csv", tag.as_str()));
    let mut rdr = csv::Reader::from_path(&path).map_err(|e| err(&e))?;
    let mut members: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    for rec in rdr.deserialize() {
        let (m, p, c, v): (usize, usize, usize, f64) = rec.map_err(|e| err(&e))?;
        if members.len() <= m {
            members.resize_with(m + 1, Vec::new);
        }
        members[m].push((p, c, v));
    }
    Ok(members.iter().map(|e| table(e)).collect())
}

// ---------------------------------------------------------------------------
// Metrics

/// One aggregate line of `metrics/summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub metric: String,
    pub tag: SplitTag,
    pub time: String,
    /// `ntk`, `w<width>-m<members>`.
    pub cell: String,
    /// `ntk-mean`, `ensemble-mean` or `member-median`.
    pub evaluator: String,
    /// Median over points for deviation-type metrics, mean for OSP-type.
    pub value: f64,
    #[serde(default)]
    pub aggregate: Option<AggregateRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

impl From<Aggregate> for AggregateRecord {
    fn from(a: Aggregate) -> Self {
        AggregateRecord {
            count: a.count,
            mean: a.mean,
            median: a.median,
            q25: a.q25,
            q75: a.q75,
        }
    }
}

fn headline(kind: ReportKind, values: &[f64]) -> f64 {
    match kind {
        ReportKind::Osp | ReportKind::ContinuousOsp => Aggregate::of(values).mean,
        _ => median(values),
    }
}

struct MetricContext<'a> {
    design: &'a EvalDesign,
    readout: Readout,
    scale: f64,
}

impl MetricContext<'_> {
    /// Per-point values of a report from a raw-output prediction table, or
    /// `None` for reports that need a reference prediction.
    fn per_point(&self, kind: ReportKind, raw: &DMatrix<f64>) -> Result<Option<Vec<f64>>, String> {
        let s = |e: crate::metrics::MetricsError| e.to_string();
        Ok(Some(match kind {
            ReportKind::OrbitRsd => {
                let r = self.readout.apply(&self.design.orbit_block(raw));
                orbit_rsd(r.row(0).transpose().as_slice(), self.design.orbit, self.scale).map_err(s)?
            }
            ReportKind::Osp => orbit_same_prediction(&self.design.orbit_block(raw), self.design.orbit).map_err(s)?,
            ReportKind::ContinuousOsp => {
                continuous_osp_from_predictions(&self.design.haar_block(raw), self.design.haar, Agreement::Argmax).map_err(s)?
            }
            ReportKind::OrbitMse => orbit_mse(&self.design.haar_block(raw), &self.design.haar_label_maps).map_err(s)?,
            ReportKind::NtkDeviation => return Ok(None),
        }))
    }
}

/// Computes every configured report from the persisted predictions.
pub fn compute_metrics(dir: &RunDir) -> Result<(Vec<SummaryEntry>, BTreeMap<ReportKind, Vec<MetricRow>>), PipelineError> {
    let err = stage_err(Stage::Metrics);
    let cfg = dir.config();
    let design = eval_design(cfg).map_err(|e| err(&e))?;
    // Ensemble files store readout values; raw-output reports on them are
    // only meaningful when the readout is the identity.
    let ctx = MetricContext {
        design: &design,
        readout: cfg.readout(),
        scale: cfg.normalizer(),
    };
    let reports = cfg.reports();
    let ntk = if needs_dynamics(cfg) {
        read_ntk_means(dir)?
    } else {
        BTreeMap::new()
    };
    let tags: Vec<SplitTag> = SplitTag::ALL
        .into_iter()
        .filter(|t| dir.path(&format!("datasets/{}.oldata", t.as_str())).exists())
        .collect();
    let mut summary = Vec::new();
    let mut rows: BTreeMap<ReportKind, Vec<MetricRow>> = BTreeMap::new();
    // Exact ensemble means.
    for ((tag, time), mean) in &ntk {
        for &kind in &reports {
            if let Some(v) = ctx.per_point(kind, mean).map_err(|e| err(&e))? {
                push_report(&mut rows, &mut summary, kind, *tag, time, "ntk", "ntk-mean", &v);
            }
        }
    }

    // Finite ensembles; stored predictions are already reduced by the readout.
    let stored = MetricContext {
        readout: Readout::Outputs,
        ..ctx
    };
    if let Some(block) = &cfg.ensemble {
        for &width in &block.widths {
            for &step in &block.checkpoints {
                let time = step_label(step);
                for &tag in &tags {
                    let members = read_member_predictions(dir, width, step, tag)?;
                    for &kind in &reports {
                        let member_values: Vec<Vec<f64>> = if kind == ReportKind::NtkDeviation {
                            vec![]
                        } else {
                            members
                                .iter()
                                .map(|m| stored.per_point(kind, m).map(|v| v.unwrap_or_default()))
                                .collect::<Result<_, _>>()
                                .map_err(|e| err(&e))?
                        };
                        for (mi, v) in member_values.iter().enumerate() {
                            push_rows(rows.entry(kind).or_default(), kind, tag, &time, &format!("w{width}"), &format!("member-{mi}"), v);
                        }
                        for &m in &block.members {
                            let cell = format!("w{width}-m{m}");
                            let mean = ensemble_mean(&members[..m]);
                            let values = match kind {
                                ReportKind::NtkDeviation => {
                                    let mu = ntk.get(&(tag, time.clone())).ok_or_else(|| {
                                        err(&format!("no exact mean for {tag} at {time}"))
                                    })?;
                                    let mu = ctx.readout.apply(&design.orbit_block(mu));
                                    let ens = design.orbit_block(&mean);
                                    ntk_deviation_vectors(&ens, &mu, ctx.scale).map_err(|e| err(&e))?
                                }
                                _ => stored.per_point(kind, &mean).map_err(|e| err(&e))?.unwrap_or_default(),
                            };
                            push_report(&mut rows, &mut summary, kind, tag, &time, &cell, "ensemble-mean", &values);
                            if kind != ReportKind::NtkDeviation {
                                let heads: Vec<f64> = member_values[..m].iter().map(|v| headline(kind, v)).collect();
                                summary.push(SummaryEntry {
                                    metric: kind.as_str().to_string(),
                                    tag,
                                    time: time.clone(),
                                    cell,
                                    evaluator: "member-median".into(),
                                    value: median(&heads),
                                    aggregate: None,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((summary, rows))
}

fn push_rows(out: &mut Vec<MetricRow>, kind: ReportKind, tag: SplitTag, time: &str, cell: &str, evaluator: &str, values: &[f64]) {
    out.extend(values.iter().enumerate().map(|(i, v)| MetricRow {
        metric: kind.as_str().to_string(),
        tag,
        time: time.to_string(),
        cell: cell.to_string(),
        evaluator: evaluator.to_string(),
        point_id: i,
        value: *v,
    }));
}

#[allow(clippy::too_many_arguments)]
fn push_report(
    rows: &mut BTreeMap<ReportKind, Vec<MetricRow>>,
    summary: &mut Vec<SummaryEntry>,
    kind: ReportKind,
    tag: SplitTag,
    time: &str,
    cell: &str,
    evaluator: &str,
    values: &[f64],
) {
    push_rows(rows.entry(kind).or_default(), kind, tag, time, cell, evaluator, values);
    summary.push(SummaryEntry {
        metric: kind.as_str().to_string(),
        tag,
        time: time.to_string(),
        cell: cell.to_string(),
        evaluator: evaluator.to_string(),
        value: headline(kind, values),
        aggregate: Some(Aggregate::of(values).into()),
    });
}

/// One row of a metric CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub tag: SplitTag,
    pub time: String,
    pub cell: String,
    pub evaluator: String,
    pub point_id: usize,
    pub value: f64,
}

fn stage_metrics(dir: &RunDir) -> Result<(), PipelineError> {
    let stage = Stage::Metrics;
    let err = stage_err(stage);
    let (summary, rows) = compute_metrics(dir)?;
    fs::create_dir_all(dir.path("metrics")).map_err(io_err(stage, "metrics"))?;
    for (kind, rows) in &rows {
        let path = dir.path(&format!("metrics/{}.csv", kind.as_str()));
        let mut w = csv::Writer::from_path(&path).map_err(|e| err(&e))?;
        w.write_record(["metric", "tag", "time", "cell", "evaluator", "point_id", "value"])
            .map_err(|e| err(&e))?;
        for r in rows {
            w.write_record([
                r.metric.as_str(),
                r.tag.as_str(),
                &r.time,
                &r.cell,
                &r.evaluator,
                &r.point_id.to_string(),
                &r.value.to_string(),
            ])
            .map_err(|e| err(&e))?;
        }
        w.flush().map_err(io_err(stage, path.display()))?;
    }
    let text = serde_json::to_string_pretty(&summary).map_err(|e| err(&e))?;
    fs::write(dir.path("metrics/summary.json"), text + "\n").map_err(io_err(stage, "summary.json"))
}

/// Reads `metrics/summary.json`.
pub fn read_summary(dir: &Path) -> Result<Vec<SummaryEntry>, PipelineError> {
    let path = dir.join("metrics/summary.json");
    let text = fs::read_to_string(&path).map_err(io_err(Stage::Metrics, path.display()))?;
    serde_json::from_str(&text).map_err(|e| stage_err(Stage::Metrics)(&e))
}

/// SHA-256 of every CSV under `root`, keyed by relative path.
pub fn csv_checksums(root: &Path) -> std::io::Result<BTreeMap<String, String>> {
    use sha2::{Digest, Sha256};
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                let digest = Sha256::digest(fs::read(&p)?);
                let rel = p.strip_prefix(root).expect("under root").to_string_lossy().into_owned();
                out.insert(rel, hex::encode(digest));
            }
        }
    }
    Ok(out)
}
