//! `qsr`: angular super-resolution of diffusion MRI at the command line.
//!
//! The pipeline is phantom -> preprocess -> train -> infer / baseline-sh ->
//! eval; every subcommand is reproducible given the same config and seeds.

mod bundle;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qsr_core::config::RunConfig;
use qsr_core::error::{Error, Result};

const EXIT_CODE_HELP: &str = "EXIT CODES:
    0  success
    2  configuration or argument error
    3  missing file / io error
    4  malformed or unsupported file format
    5  shape or checkpoint mismatch
    6  numeric failure (non-finite values, ill-conditioned fit)

ENVIRONMENT:
    QSR_LOG={error,info,debug}   log verbosity (default error)";

#[derive(Parser)]
#[command(
    name = "qsr",
    about = "Angular (q-space) super-resolution of diffusion MRI volumes",
    after_help = EXIT_CODE_HELP,
    version
)]
struct Cli {
    /// Run configuration file (TOML); command-line flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed override: phantom seed, train data/model seeds, or the
    /// inference split seed, depending on the subcommand
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Model variant
    #[arg(long, global = true, value_parser = ["rcnn3d", "rcnn1d", "cnn3d"])]
    variant: Option<String>,

    /// Context set size (q-space samples fed to the encoder)
    #[arg(long, global = true)]
    qin: Option<usize>,

    /// Target set size (q-space samples predicted by the decoder)
    #[arg(long, global = true)]
    qout: Option<usize>,

    /// Maximum (even) spherical-harmonic order for the baseline
    #[arg(long, global = true)]
    lmax: Option<usize>,

    /// Shell b-value to operate on
    #[arg(long, global = true)]
    shell: Option<i64>,

    /// Worker threads for parallel stages (0 = all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-tensor phantom dataset
    Phantom,
    /// Denoise, normalize and bundle a dataset for training/inference
    Preprocess {
        /// Directory holding data.nii, bvecs, bvals, mask.nii (phantom
        /// layout); individual path flags override its entries
        #[arg(long)]
        r#in: Option<PathBuf>,
        /// 4D signal NIfTI
        #[arg(long)]
        data: Option<PathBuf>,
        /// FSL bvecs file
        #[arg(long)]
        bvecs: Option<PathBuf>,
        /// FSL bvals file
        #[arg(long)]
        bvals: Option<PathBuf>,
        /// Binary brain mask NIfTI
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Skip the self-supervised denoiser
        #[arg(long)]
        no_denoise: bool,
    },
    /// Train a model on preprocessed bundles
    Train {
        /// Training bundle directories (repeatable)
        #[arg(long = "train", required = true)]
        train_dirs: Vec<PathBuf>,
        /// Validation bundle directories (repeatable)
        #[arg(long = "val", required = true)]
        val_dirs: Vec<PathBuf>,
        /// Number of training epochs
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Super-resolve a bundle with a trained checkpoint
    Infer {
        /// Checkpoint written by `train`
        #[arg(long)]
        checkpoint: PathBuf,
        /// Preprocessed bundle to super-resolve
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Super-resolve a bundle with spherical-harmonic interpolation
    BaselineSh {
        /// Preprocessed bundle to super-resolve
        #[arg(long)]
        bundle: PathBuf,
    },
    /// Compare predictions against the bundle's measured ground truth
    Eval {
        /// Prediction directories written by `infer`/`baseline-sh`
        /// (repeatable; a comparison table covers all of them)
        #[arg(long = "pred", required = true)]
        pred_dirs: Vec<PathBuf>,
        /// Bundle holding the ground truth
        #[arg(long)]
        bundle: PathBuf,
        /// White-matter mask NIfTI for tissue-masked metrics
        #[arg(long)]
        wm: Option<PathBuf>,
        /// Grey-matter mask NIfTI for tissue-masked metrics
        #[arg(long)]
        gm: Option<PathBuf>,
        /// Non-diffusion-weighted magnitude for the DTI/FA metrics
        /// (defaults to the masked mean of b=0 volumes when present)
        #[arg(long)]
        s0: Option<f64>,
    },
    /// Print the model layer table
    Describe,
    /// Inspect configuration
    Config {
        /// Print the full default configuration as TOML
        #[arg(long)]
        defaults: bool,
    },
}

/// Loads the config file (or defaults) and applies flag overrides.
fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.phantom.seed = seed;
        cfg.train.data_seed = seed;
        cfg.train.model_seed = seed;
        cfg.infer.split_seed = seed;
    }
    if let Some(variant) = &cli.variant {
        cfg.model.variant = variant.parse()?;
    }
    if let Some(qin) = cli.qin {
        cfg.train.q_in = qin;
    }
    if let Some(qout) = cli.qout {
        cfg.train.q_out = qout;
    }
    if let Some(lmax) = cli.lmax {
        cfg.sh.l_max = lmax;
    }
    if let Some(shell) = cli.shell {
        cfg.infer.shell = shell;
        cfg.train.shells = vec![shell];
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &cli.out {
        cfg.output = out.display().to_string();
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    if cfg.output.is_empty() {
        return Err(Error::Config(
            "no output directory (pass --out or set `output` in the config)".into(),
        ));
    }
    Ok(PathBuf::from(&cfg.output))
}

fn run(cli: &Cli) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Phantom => commands::cmd_phantom(&cfg, &out_dir(&cfg)?),
        Command::Preprocess {
            r#in,
            data,
            bvecs,
            bvals,
            mask,
            no_denoise,
        } => {
            if let Some(dir) = r#in {
                cfg.dataset.data = dir.join("data.nii").display().to_string();
                cfg.dataset.bvecs = dir.join("bvecs").display().to_string();
                cfg.dataset.bvals = dir.join("bvals").display().to_string();
                cfg.dataset.mask = dir.join("mask.nii").display().to_string();
            }
            if let Some(p) = data {
                cfg.dataset.data = p.display().to_string();
            }
            if let Some(p) = bvecs {
                cfg.dataset.bvecs = p.display().to_string();
            }
            if let Some(p) = bvals {
                cfg.dataset.bvals = p.display().to_string();
            }
            if let Some(p) = mask {
                cfg.dataset.mask = p.display().to_string();
            }
            let denoise = cfg.preprocess.denoise && !no_denoise;
            commands::cmd_preprocess(&cfg, denoise, &out_dir(&cfg)?)
        }
        Command::Train {
            train_dirs,
            val_dirs,
            epochs,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            commands::cmd_train(&cfg, train_dirs, val_dirs, &out_dir(&cfg)?)
        }
        Command::Infer { checkpoint, bundle } => {
            commands::cmd_infer(&cfg, checkpoint, bundle, &out_dir(&cfg)?)
        }
        Command::BaselineSh { bundle } => {
            commands::cmd_baseline_sh(&cfg, bundle, &out_dir(&cfg)?)
        }
        Command::Eval {
            pred_dirs,
            bundle,
            wm,
            gm,
            s0,
        } => commands::cmd_eval(
            &cfg,
            pred_dirs,
            bundle,
            wm.as_deref(),
            gm.as_deref(),
            *s0,
            &out_dir(&cfg)?,
        ),
        Command::Describe => commands::cmd_describe(&cfg),
        Command::Config { defaults } => {
            if *defaults {
                commands::cmd_config_defaults()
            } else {
                Err(Error::Config(
                    "nothing to do; pass --defaults to print the default config".into(),
                ))
            }
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        "config" | "invalid-argument" => 2,
        "io" => 3,
        "format" | "unsupported" => 4,
        "shape" | "checkpoint" => 5,
        _ => 6,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("QSR_LOG", "error"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!(
                "error: category={} exit={} msg={:?}",
                e.category(),
                exit_code(&e),
                e.to_string()
            );
            ExitCode::from(exit_code(&e))
        }
    }
}
