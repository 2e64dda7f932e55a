use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use orbitlab::config::ExperimentConfig;
use orbitlab::pipeline::{read_summary, run_experiment, Overwrite, PipelineError, RunDir, Stage};
use orbitlab::verify::{verify_suite, VerifySettings};
use orbitlab::ConvPadding;

const EXIT_VALIDATION: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_PROPERTY: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "orbitlab", version, about = "Exact NTK ensembles, deep ensembles and equivariance diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Run directory; overrides the config's `output` key.
    #[arg(long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Replace existing outputs instead of refusing.
    #[arg(long, global = true)]
    overwrite: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate base datasets.
    Generate,
    /// Orbit-augment the training set.
    Augment,
    /// Build the training Gram system.
    Gram,
    /// Exact ensemble mean and variance at the configured times.
    Dynamics,
    /// Train the finite-width ensembles.
    Train,
    /// Compute metric reports from recorded predictions.
    Metrics,
    /// Run the property suites.
    Verify {
        /// Convolution boundary handling used by the kernel suites.
        #[arg(long, value_enum, default_value_t = PaddingArg::Circular, hide = true)]
        conv_padding: PaddingArg,
    },
    /// Run every stage into a fresh run directory.
    Run,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PaddingArg {
    Circular,
    OneSided,
}

enum Failure {
    Validation(String),
    Runtime(String),
    Property(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Stage { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<Option<ExperimentConfig>, Failure> {
    path.as_deref()
        .map(|p| ExperimentConfig::load(p).map_err(|e| Failure::Validation(e.to_string())))
        .transpose()
}

fn output_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Failure> {
    cli.output
        .clone()
        .or_else(|| cfg.and_then(|c| c.output.clone()))
        .ok_or_else(|| Failure::Validation("no run directory: pass --output or set `output` in the config".into()))
}

fn overwrite(cli: &Cli) -> Overwrite {
    if cli.overwrite {
        Overwrite::Replace
    } else {
        Overwrite::Refuse
    }
}

fn print_summary(root: &Path) {
    match read_summary(root) {
        Ok(entries) => {
            for e in entries {
                println!(
                    "{:<15} {:<5} {:<10} {:<12} {:<14} {:.6e}",
                    e.metric,
                    e.tag.as_str(),
                    e.time,
                    e.cell,
                    e.evaluator,
                    e.value
                );
            }
        }
        Err(e) => eprintln!("warning: {e}"),
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(&cli.config)?;
    let stage = match &cli.command {
        Command::Run => {
            let cfg = cfg.ok_or_else(|| Failure::Validation("run needs --config".into()))?;
            let out = output_dir(cli, Some(&cfg))?;
            let dir = run_experiment(&cfg, &out, overwrite(cli))?;
            for (stage, rec) in &dir.manifest.stages {
                eprintln!("{:<9} {:.2}s", stage.as_str(), rec.wall_seconds.unwrap_or(0.0));
            }
            print_summary(&dir.root);
            println!("run directory: {}", dir.root.display());
            return Ok(());
        }
        Command::Verify { conv_padding } => {
            let settings = VerifySettings {
                seed: cfg.as_ref().map_or(0, |c| c.seed),
                padding: match conv_padding {
                    PaddingArg::Circular => ConvPadding::Circular,
                    PaddingArg::OneSided => ConvPadding::OneSided,
                },
                ..VerifySettings::default()
            };
            let report = verify_suite(&settings).map_err(Failure::Runtime)?;
            print!("{}", report.table());
            if let Some(out) = &cli.output {
                std::fs::create_dir_all(out).map_err(|e| Failure::Runtime(e.to_string()))?;
                let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
                std::fs::write(out.join("verify.json"), json).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            return if report.passed() {
                Ok(())
            } else {
                Err(Failure::Property("property suite failed".into()))
            };
        }
        Command::Generate => Stage::Generate,
        Command::Augment => Stage::Augment,
        Command::Gram => Stage::Gram,
        Command::Dynamics => Stage::Dynamics,
        Command::Train => Stage::Train,
        Command::Metrics => Stage::Metrics,
    };
    let out = output_dir(cli, cfg.as_ref())?;
    let mut dir = match &cfg {
        Some(cfg) => RunDir::prepare(&out, cfg, overwrite(cli))?,
        None => RunDir::open(&out)?,
    };
    dir.run_stage(stage, overwrite(cli))?;
    if stage == Stage::Metrics {
        print_summary(&dir.root);
    }
    eprintln!("{stage} complete in {}", dir.root.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.workers {
        if n == 0 {
            eprintln!("error: --workers must be positive");
            return ExitCode::from(EXIT_VALIDATION);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Property(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_PROPERTY)
        }
    }
}
