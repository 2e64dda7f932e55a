use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn orbitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orbitlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn unknown_config_key_is_rejected_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("smoke.toml")).unwrap() + "\nlearning_rate = 3\n";
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = orbitlab(&["run", "--config", cfg.to_str().unwrap(), "--output", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("learning_rate"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&orbitlab(&["frobnicate"])), 1);
    assert_eq!(code(&orbitlab(&["run", "--no-such-flag"])), 1);
    assert_eq!(code(&orbitlab(&["--help"])), 0);
    assert_eq!(code(&orbitlab(&["--version"])), 0);
}

#[test]
fn run_smoke_and_refuse_existing_output() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = config("smoke.toml");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--output", run.to_str().unwrap()];
    let out = orbitlab(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for rel in [
        "manifest.toml",
        "datasets/train.oldata",
        "gram/train.olgram",
        "dynamics/ntk.csv",
        "ensemble/w32/members.csv",
        "metrics/summary.json",
    ] {
        assert!(run.join(rel).is_file(), "missing {rel}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("orbit_rsd"));

    let again = orbitlab(&args);
    assert_eq!(code(&again), 1);
    assert!(stderr(&again).contains("--overwrite"));

    let mut replace = args.to_vec();
    replace.push("--overwrite");
    assert_eq!(code(&orbitlab(&replace)), 0);
}

#[test]
fn stages_enforce_order_and_detect_partial_runs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let cfg = config("smoke.toml");
    let (c, o) = (cfg.to_str().unwrap(), run.to_str().unwrap());

    let early = orbitlab(&["gram", "--config", c, "--output", o]);
    assert_eq!(code(&early), 1);
    assert!(stderr(&early).contains("augment"));

    for stage in ["generate", "augment", "gram", "dynamics", "train"] {
        let out = orbitlab(&[stage, "--output", o]);
        assert_eq!(code(&out), 0, "{stage}: {}", stderr(&out));
    }
    assert_eq!(code(&orbitlab(&["train", "--output", o])), 1);

    // Mark an upstream stage as interrupted.
    let manifest = run.join("manifest.toml");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken = text.replacen("status = \"complete\"", "status = \"running\"", 1);
    assert_ne!(text, broken);
    std::fs::write(&manifest, broken).unwrap();
    let partial = orbitlab(&["metrics", "--output", o]);
    assert_eq!(code(&partial), 1);
    assert!(stderr(&partial).contains("never finished"), "{}", stderr(&partial));

    assert_eq!(code(&orbitlab(&["generate", "--output", o, "--overwrite"])), 0);
    let out = orbitlab(&["metrics", "--output", o]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn verify_passes_and_writes_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = orbitlab(&["verify", "--output", dir.path().to_str().unwrap(), "--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    let json = std::fs::read_to_string(dir.path().join("verify.json")).unwrap();
    assert!(json.contains("\"passed\": true"));
    assert!(!json.contains("\"passed\": false"));
}

#[test]
fn verify_negative_control_exits_three() {
    let out = orbitlab(&["verify", "--conv-padding", "one-sided"]);
    assert_eq!(code(&out), 3);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.contains("conv") && l.ends_with("FAIL")), "{stdout}");
}
