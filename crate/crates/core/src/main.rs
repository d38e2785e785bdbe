use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dsgld::data::{synth_generate, write_ratings, write_truth};
use dsgld::experiment::{run_experiment, serve_worker, summarize, RunConfig};
use dsgld::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dsgld",
    version,
    about = "Distributed Bayesian matrix factorization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment. Any config key may be overridden as `--key value`.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Further `--key value` or `--key=value` overrides.
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Generate a synthetic rating file plus a `.truth` sidecar.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the final RMSE of a metrics file, optionally against a baseline.
    Summarize {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Serve one block over TCP for a socket-transport run.
    Worker {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        listen: String,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_file(p),
        None => Ok(RunConfig::default()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg.strip_prefix("--").ok_or_else(|| Error::Config {
            key: arg.clone(),
            message: "expected --key value".into(),
        })?;
        match key.split_once('=') {
            Some((k, v)) => cfg.set(k, v)?,
            None => {
                let v = it.next().ok_or_else(|| Error::Config {
                    key: key.into(),
                    message: "missing value".into(),
                })?;
                cfg.set(key, v)?;
            }
        }
    }
    Ok(())
}

fn synth_config(path: &PathBuf) -> Result<RunConfig> {
    // Accepts either the synth_* keys of a run config or their short forms.
    let text = std::fs::read_to_string(path)?;
    let mut cfg = RunConfig::default();
    for (k, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: k + 1,
            message: format!("expected key = value, got {line:?}"),
        })?;
        let key = key.trim();
        let key = match key {
            "users" | "L" => "synth_users",
            "items" | "M" => "synth_items",
            "dim_true" | "D_true" => "synth_dim",
            "noise_sd" => "synth_noise_sd",
            "density" => "synth_density",
            "seed" => "synth_seed",
            other => other,
        };
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            algorithm,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(a) = algorithm {
                cfg.set("algorithm", &a)?;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            apply_overrides(&mut cfg, &overrides)?;
            let summary = run_experiment(&cfg)?;
            print!("{}", summary.render());
        }
        Command::Synth { spec, out } => {
            let cfg = synth_config(&spec)?;
            let mut spec = cfg.synth_spec();
            spec.test_fraction = 0.0;
            let data = synth_generate(&spec)?;
            write_ratings(
                &out,
                &data.dataset.train,
                &data.dataset.user_ids,
                &data.dataset.item_ids,
            )?;
            let mut truth = out.clone().into_os_string();
            truth.push(".truth");
            write_truth(PathBuf::from(truth), &data.truth)?;
            println!(
                "wrote {} ratings to {}",
                data.dataset.train.len(),
                out.display()
            );
        }
        Command::Summarize { metrics, baseline } => {
            print!("{}", summarize(&metrics, baseline.as_deref())?);
        }
        Command::Worker {
            config,
            block,
            listen,
        } => {
            let cfg = load_config(config.as_ref())?;
            serve_worker(&cfg, block, &listen)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
