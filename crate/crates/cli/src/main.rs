//! Command-line driver: simulate, train, estimate, evaluate, compare.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use consensus_kf::config::ModelKind;
use consensus_kf::pipeline::{
    compare, evaluate_files, observed_truth, run_pipeline, train_koopman, train_rff, training_data, write_outputs,
    KOOPMAN_FORMAT, RFF_FORMAT, STATE_NAMES,
};
use consensus_kf::simulator::export_csv;
use consensus_kf::{persist, Error, RunConfig};

#[derive(Parser)]
#[command(name = "consensus-kf", version, about = "Consensus multi-model Kalman filter for vehicle state estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory or file; defaults to `output_dir` from the configuration.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the scenario and write `truth.csv` (states, controls, observations).
    Simulate(Common),
    /// Fit a random-feature regressor and save it as JSON.
    TrainRff {
        #[command(flatten)]
        common: Common,
        /// Model entry to train; the first `rff` model by default.
        #[arg(long)]
        model: Option<String>,
    },
    /// Fit a bilinear Koopman model and save it as JSON.
    TrainKoopman {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<String>,
    },
    /// Run the consensus filter and write estimates, weights, report and plot data.
    Estimate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of model names, in fusion order.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
    /// Score an estimate CSV against a truth CSV.
    Evaluate {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        estimate: PathBuf,
    },
    /// Single-model baselines against the fused filter.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<String>>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::Config(_) | Error::InvalidScenario(_) | Error::Infeasible { .. } => 2,
        Error::Io(_) | Error::Csv { .. } | Error::Serialization(_) => 4,
        _ => 3,
    }
}

fn load(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: &RunConfig) -> PathBuf {
    common.out.clone().unwrap_or_else(|| cfg.output_dir.clone())
}

fn pick<'a>(cfg: &'a RunConfig, name: Option<&str>, kind: ModelKind) -> Result<&'a consensus_kf::config::ModelConfig, Error> {
    let found = match name {
        Some(n) => cfg.model(n),
        None => cfg.models.iter().find(|m| m.kind == kind),
    };
    match found {
        Some(m) if m.kind == kind => Ok(m),
        Some(m) => Err(Error::Config(format!("model `{}` is not of kind {kind:?}", m.name))),
        None => Err(Error::Config(format!("no {kind:?} model in configuration"))),
    }
}

fn model_path(common: &Common, cfg: &RunConfig, name: &str) -> PathBuf {
    common
        .out
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(format!("{name}.json")))
}

fn ensure_parent(path: &Path) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn restrict(cfg: &mut RunConfig, names: &[String]) -> Result<(), Error> {
    let mut picked = Vec::with_capacity(names.len());
    for n in names {
        let m = cfg
            .model(n)
            .ok_or_else(|| Error::Config(format!("unknown model `{n}` in --models")))?;
        picked.push(m.clone());
    }
    cfg.models = picked;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = load(&common)?;
            let (truth, _) = observed_truth(&cfg)?;
            let dir = out_dir(&common, &cfg);
            fs::create_dir_all(&dir)?;
            let path = dir.join("truth.csv");
            export_csv(&truth, &path)?;
            println!("wrote {} ({} samples)", path.display(), truth.len());
        }
        Command::TrainRff { common, model } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            let m = pick(&cfg, model.as_deref(), ModelKind::Rff)?;
            let data = training_data(&cfg)?;
            let r = train_rff(m, &data)?;
            let path = model_path(&common, &cfg, &m.name);
            ensure_parent(&path)?;
            persist::save(RFF_FORMAT, &r, &path)?;
            println!("wrote {} ({} features)", path.display(), r.features());
        }
        Command::TrainKoopman { common, model } => {
            let cfg = load(&common)?;
            cfg.validate()?;
            let m = pick(&cfg, model.as_deref(), ModelKind::Koopman)?;
            let data = training_data(&cfg)?;
            let k = train_koopman(m, &data, cfg.fusion.eigen_floor)?;
            let path = model_path(&common, &cfg, &m.name);
            ensure_parent(&path)?;
            persist::save(KOOPMAN_FORMAT, &k, &path)?;
            println!("wrote {} (lifted dimension {})", path.display(), k.lifted_dim());
        }
        Command::Estimate { common, models } => {
            let mut cfg = load(&common)?;
            if let Some(names) = &models {
                restrict(&mut cfg, names)?;
            }
            let out = run_pipeline(&cfg)?;
            let dir = out_dir(&common, &cfg);
            write_outputs(&out, &dir)?;
            print!("{}", out.report.to_toml()?);
            eprintln!("outputs in {}", dir.display());
        }
        Command::Evaluate { truth, estimate } => {
            let m = evaluate_files(&truth, &estimate)?;
            for (i, s) in STATE_NAMES.iter().enumerate().take(m.rmse.len()) {
                println!("{s:<10} rmse {:.6e}  peak {:.6e}", m.rmse[i], m.peak_abs_error[i]);
            }
            println!("nees_mean  {:.4}", m.nees_mean);
        }
        Command::Compare { common, models } => {
            let cfg = load(&common)?;
            let c = compare(&cfg, models.as_deref())?;
            print!("{}", c.table());
            if let Some(path) = &common.out {
                ensure_parent(path)?;
                fs::write(path, c.to_toml()?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
