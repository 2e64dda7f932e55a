use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use orbitlab::config::{ConfigError, ExperimentConfig};
use orbitlab::dynamics::{DynamicsConfig, TrainingTime};
use orbitlab::pipeline::{
    csv_checksums, dynamics_times, read_summary, run_experiment, step_label, Overwrite, PipelineError, RunDir, Stage,
};

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.toml"));
    ExperimentConfig::load(&path).unwrap()
}

fn header(path: &Path) -> Vec<String> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    rdr.headers().unwrap().iter().map(str::to_string).collect()
}

fn csv_files(root: &Path, sub: &str) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(root.join(sub))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    out.sort();
    out
}

#[test]
fn smoke_runs_are_reproducible_across_thread_counts() {
    let cfg = config("smoke");
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_experiment(&cfg, a.path(), Overwrite::Refuse).unwrap();
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| run_experiment(&cfg, b.path(), Overwrite::Refuse))
        .unwrap();
    let sums = csv_checksums(a.path()).unwrap();
    assert!(sums.keys().any(|k| k.starts_with("ensemble/")));
    assert!(sums.keys().any(|k| k.starts_with("metrics/")));
    assert!(sums.contains_key("dynamics/ntk.csv"));
    assert_eq!(sums, csv_checksums(b.path()).unwrap());
    assert_eq!(read_summary(a.path()).unwrap(), read_summary(b.path()).unwrap());
}

#[test]
fn csv_columns_follow_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&config("smoke"), dir.path(), Overwrite::Refuse).unwrap();
    let root = dir.path();
    assert_eq!(header(&root.join("dynamics/ntk.csv")), ["tag", "time", "point_id", "channel", "mean", "variance"]);
    for w in ["w32", "w64"] {
        let files = csv_files(root, &format!("ensemble/{w}"));
        // three checkpoints x three tags plus the member list
        assert_eq!(files.len(), 10, "{files:?}");
        for f in files {
            if f.ends_with("members.csv") {
                assert_eq!(header(&f), ["member_id", "seed", "final_loss"]);
            } else {
                assert_eq!(header(&f), ["member_id", "point_id", "channel", "value"]);
            }
        }
    }
    let metric_files = csv_files(root, "metrics");
    assert!(!metric_files.is_empty());
    for f in metric_files {
        assert_eq!(header(&f), ["metric", "tag", "time", "cell", "evaluator", "point_id", "value"]);
    }
}

/// Orbit RSD of the ensemble mean, recomputed straight from the member CSV.
fn recomputed_rsd(path: &Path, members: usize, order: usize, normalizer: f64) -> Vec<f64> {
    let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(path).unwrap();
    for rec in rdr.records() {
        let rec = rec.unwrap();
        let member: usize = rec[0].parse().unwrap();
        let column: usize = rec[1].parse().unwrap();
        assert_eq!(&rec[2], "0", "energy readout has one channel");
        if member < members {
            *sums.entry(column).or_default() += rec[3].parse::<f64>().unwrap();
        }
    }
    let means: Vec<f64> = sums.values().map(|s| s / members as f64).collect();
    means
        .chunks(order)
        .map(|o| {
            let m = o.iter().sum::<f64>() / order as f64;
            (o.iter().map(|v| (v - m).powi(2)).sum::<f64>() / order as f64).sqrt() / normalizer
        })
        .collect()
}

fn metric_values(path: &Path, tag: &str, time: &str, cell: &str, evaluator: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let mut rows: Vec<(usize, f64)> = rdr
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[1] == tag && &r[2] == time && &r[3] == cell && &r[4] == evaluator)
        .map(|r| (r[5].parse().unwrap(), r[6].parse().unwrap()))
        .collect();
    rows.sort_by_key(|r| r.0);
    rows.into_iter().map(|r| r.1).collect()
}

#[test]
fn metrics_are_recomputable_from_persisted_predictions() {
    let cfg = config("smoke");
    let dir = tempfile::tempdir().unwrap();
    let mut run = run_experiment(&cfg, dir.path(), Overwrite::Refuse).unwrap();
    let root = dir.path();
    let before = csv_checksums(&root.join("metrics")).unwrap();
    let summary = std::fs::read(root.join("metrics/summary.json")).unwrap();

    let order = cfg.group_order();
    for (tag, step, width, members) in [("ood", 50, 64, 8), ("test", 25, 32, 4), ("train", 0, 64, 4)] {
        let want = recomputed_rsd(
            &root.join(format!("ensemble/w{width}/step-{step}_{tag}.csv")),
            members,
            order,
            cfg.normalizer(),
        );
        let got = metric_values(
            &root.join("metrics/orbit_rsd.csv"),
            tag,
            &format!("step={step}"),
            &format!("w{width}-m{members}"),
            "ensemble-mean",
        );
        assert_eq!(got.len(), want.len());
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() <= 1e-12 * (1.0 + w.abs()), "{tag} step {step}: {g} vs {w}");
        }
    }

    run.run_stage(Stage::Metrics, Overwrite::Replace).unwrap();
    assert_eq!(before, csv_checksums(&root.join("metrics")).unwrap());
    assert_eq!(summary, std::fs::read(root.join("metrics/summary.json")).unwrap());
}

#[test]
fn unknown_config_key_is_reported_with_its_location() {
    let text = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")).unwrap();
    let bad = text.replace("eta = 1.0\nsteps", "eta = 1.0\nlearning_rate = 3\nsteps");
    let err = ExperimentConfig::from_toml_str(&bad, "bad.toml").unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, ConfigError::Parse { .. }));
    assert!(msg.contains("learning_rate") && msg.contains("bad.toml"), "{msg}");
    assert!(msg.contains("line"), "{msg}");
}

#[test]
fn minimal_config_finishes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let run = run_experiment(&config("minimal"), dir.path(), Overwrite::Refuse).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "{elapsed:?}");
    assert!(run.planned_stages().iter().all(|s| run.is_complete(*s)));
    assert!(!run.planned_stages().contains(&Stage::Train));
    let summary = read_summary(dir.path()).unwrap();
    assert!(summary.iter().all(|e| e.cell == "ntk"));
    // the exact ensemble mean is equivariant on every split
    for e in summary.iter().filter(|e| e.metric == "orbit_rsd") {
        assert!(e.value < 1e-8, "{e:?}");
    }
}

#[test]
fn existing_output_and_stage_order_are_enforced() {
    let cfg = config("smoke");
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path(), Overwrite::Refuse).unwrap();
    assert!(matches!(
        run_experiment(&cfg, dir.path(), Overwrite::Refuse),
        Err(PipelineError::OutputExists { .. })
    ));

    let fresh = tempfile::tempdir().unwrap();
    let mut run = RunDir::create(fresh.path(), &cfg, Overwrite::Refuse).unwrap();
    assert!(run.run_stage(Stage::Gram, Overwrite::Refuse).is_err());
    run.run_stage(Stage::Generate, Overwrite::Refuse).unwrap();
    assert!(run.run_stage(Stage::Generate, Overwrite::Refuse).is_err());
    run.run_stage(Stage::Generate, Overwrite::Replace).unwrap();
    assert!(run.incomplete_stages().is_empty());
}

#[test]
fn exact_means_at_checkpoints_use_the_gd_time_mapping() {
    // eta != 1 so that counting the learning rate twice would show
    let mut cfg = config("smoke");
    cfg.ensemble.as_mut().unwrap().eta = 2.5;
    let n = 16;
    let times = dynamics_times(&cfg, n);
    for step in [0u64, 25, 50] {
        let (_, dc) = times.iter().find(|(label, _)| *label == step_label(step)).unwrap();
        assert_eq!(*dc, DynamicsConfig::after_gd_steps(2.5, step, n).unwrap());
        assert_eq!(dc.time, TrainingTime::Finite(step as f64 / n as f64));
    }
}
