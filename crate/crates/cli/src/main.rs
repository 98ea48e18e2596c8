use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use gatedepth::pipeline::{calibrate_signal_level, run_stage, RunConfig, Stage};
use gatedepth::Error;
use log::{error, info};

/// Simulate, fit and fuse time-gated single-photon depth data.
#[derive(Debug, Parser)]
#[command(name = "gatedepth", version)]
struct Cli {
    /// TOML run configuration. Without it the reference configuration is
    /// used and --seed is required.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Overrides the output directory.
    #[arg(long)]
    out: Option<PathBuf>,

    /// simulate, preprocess, fit, fuse, eval or full.
    #[arg(long, default_value = "full")]
    stage: String,

    /// Replaces the configured scan fractions; repeatable.
    #[arg(long = "fraction")]
    fractions: Vec<f64>,

    /// Print the reference configuration as TOML and exit.
    #[arg(long)]
    print_default_config: bool,

    /// Search for the signal level giving this mean patch spread (cm) and
    /// print it instead of running a stage.
    #[arg(long, value_name = "TARGET_CM")]
    calibrate: Option<f64>,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        _ => 3,
    }
}

fn resolve_config(cli: &Cli) -> gatedepth::Result<RunConfig> {
    let mut cfg = match (&cli.config, cli.seed) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(seed)) => RunConfig::reference(seed),
        (None, None) => return Err(Error::Config("a seed is required: pass --seed or --config".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if !cli.fractions.is_empty() {
        cfg.fractions = cli.fractions.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> gatedepth::Result<()> {
    if cli.print_default_config {
        print!("{}", RunConfig::reference(cli.seed.unwrap_or(42)).to_toml_string()?);
        return Ok(());
    }
    let stage: Stage = cli.stage.parse()?;
    let cfg = resolve_config(cli)?;
    if let Some(target) = cli.calibrate {
        let cal = calibrate_signal_level(&cfg, target, 8)?;
        println!(
            "mean_signal_pp = {:.4}  # mean patch spread {:.3} cm after {} rounds",
            cal.mean_signal_pp,
            cal.mean_stddev_cm(),
            cal.rounds
        );
        return Ok(());
    }
    for manifest in run_stage(stage, &cfg)? {
        info!("{}: wrote {} files", manifest.stage, manifest.outputs.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            error!("{err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
