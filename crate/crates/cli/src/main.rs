use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aru_cli::config::ExperimentConfig;
use aru_cli::report::RunReport;
use aru_cli::{exit_code, load_dataset_arg, runner};
use aru_core::attack::{attack_forget_set, export_noises};
use aru_core::data::export_directory;
use aru_core::eval::evaluate;
use aru_core::nn::persist;
use aru_core::unlearn::{run_unlearning, strategy_mask, MaskStrategy, Method, UnlearnRequest};
use aru_core::{Error, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aru", version, about = "Attack-and-reset machine unlearning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured method for every seed and write report.json / report.csv.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Print the default configuration as TOML.
    DefaultConfig,
    /// Write a config's dataset to a directory (images/*.png + labels.csv).
    Generate { config: PathBuf, out: PathBuf },
    /// Train an original model on the train split.
    Train {
        dataset: PathBuf,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Takes `[arch]` and `[original]` from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Unlearn the forget split from a model with one method.
    Unlearn {
        model: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        method: String,
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Takes `[defaults]` from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print utility, forgetting and NoMUS of a model as JSON.
    Evaluate {
        model: PathBuf,
        dataset: PathBuf,
        #[arg(long, default_value_t = aru_core::eval::DEFAULT_LAMBDA)]
        lambda: f64,
    },
    /// Compute PGD noise for the forget split and write it as PNGs + noises.json.
    Attack {
        model: PathBuf,
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Takes `[defaults.adv]` from this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print (or write) a filter mask as one bitstring line per conv layer.
    Mask {
        model: PathBuf,
        dataset: PathBuf,
        /// aru, random, top_grad or random_noise.
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-method table of a finished run and check its aggregates.
    Report { dir: PathBuf },
}

fn config_or_default(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(d) = output_dir {
                cfg.output_dir = d;
            }
            let report = runner::run(&cfg)?;
            print!("{}", report.table());
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default_toml()),
        Command::Generate { config, out } => {
            let bundle = ExperimentConfig::load(&config)?.dataset.load()?;
            let labels = export_directory(&bundle, &out)?;
            println!("wrote {}", labels.display());
        }
        Command::Train {
            dataset,
            out,
            seed,
            config,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let bundle = load_dataset_arg(&dataset)?;
            let model = runner::train_original(&cfg, &bundle, seed, None)?;
            persist::save(&model, &out)?;
            println!("{}", model.checksum());
        }
        Command::Unlearn {
            model,
            dataset,
            method,
            out,
            seed,
            config,
        } => {
            let method: Method = method.parse()?;
            let cfg = config_or_default(config.as_deref())?;
            let theta = persist::load(&model)?;
            let bundle = load_dataset_arg(&dataset)?;
            let request = UnlearnRequest {
                method,
                params: cfg.defaults.clone(),
                seed,
            };
            let r = run_unlearning(&request, &theta, &bundle)?;
            persist::save(&r.model, &out)?;
            println!("{}", serde_json::to_string_pretty(&r.provenance).expect("provenance serialises"));
        }
        Command::Evaluate { model, dataset, lambda } => {
            let theta = persist::load(&model)?;
            let bundle = load_dataset_arg(&dataset)?;
            let ev = evaluate(&theta, &bundle, lambda)?;
            println!("{}", serde_json::to_string_pretty(&ev.metrics).expect("metrics serialise"));
        }
        Command::Attack {
            model,
            dataset,
            out,
            config,
        } => {
            let cfg = config_or_default(config.as_deref())?;
            let theta = persist::load(&model)?;
            let bundle = load_dataset_arg(&dataset)?;
            let noises = attack_forget_set(&theta, &bundle, &cfg.defaults.adv)?;
            let n = export_noises(&noises, cfg.defaults.adv.epsilon, &out)?;
            println!("wrote {n} noise images to {}", out.display());
        }
        Command::Mask {
            model,
            dataset,
            strategy,
            ratio,
            seed,
            config,
            out,
        } => {
            let strategy: MaskStrategy = strategy.parse()?;
            let mut params = config_or_default(config.as_deref())?.defaults;
            if let Some(r) = ratio {
                params.ratio = r;
            }
            let theta = persist::load(&model)?;
            let bundle = load_dataset_arg(&dataset)?;
            let text = strategy_mask(&theta, &bundle, strategy, &params, seed)?.to_text();
            match out {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
        }
        Command::Report { dir } => {
            let report = RunReport::read(&dir)?;
            print!("{}", report.table());
            let drift = report.aggregate_drift();
            if drift > 1e-12 {
                return Err(Error::Format {
                    what: "report",
                    message: format!("aggregates differ from the per-seed rows by {drift}"),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
