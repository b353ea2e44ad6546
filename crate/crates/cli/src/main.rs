//! Command-line front end: two-stage training, generation, evaluation,
//! interpolation and spectrum dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info};

use freqcloud::metrics::write_report;
use freqcloud::pipeline::{
    ddpm_log_csv, generate_with, interpolate, rectify_viz, train_ddpm, train_vae, vae_log_csv, write_cloud_dir,
    LatentPrior, ModelCheckpoint, RunConfig,
};
use freqcloud::{Error, PointCloud, Result};

#[derive(Parser)]
#[command(name = "freqcloud", version, about = "Frequency-rectified point-cloud generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Run configuration plus `section.key=value` overrides.
#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set freq.eta=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml_with_overrides("", &self.overrides),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PriorArg {
    Diffusion,
    Gaussian,
}

#[derive(Subcommand)]
enum Command {
    /// Stage 1: fit encoder and decoder.
    TrainVae {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "vae.ckpt")]
        out: PathBuf,
        /// Per-epoch CSV log; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Stage 2: fit the latent diffusion prior with the VAE frozen.
    TrainDdpm {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        seed: Option<u64>,
        /// Stage-1 checkpoint.
        #[arg(long)]
        vae: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sample shapes and write one text file per cloud.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        shapes: usize,
        #[arg(long)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_enum, default_value = "diffusion")]
        prior: PriorArg,
    },
    /// Score generated clouds against reference clouds.
    Evaluate {
        #[arg(long)]
        gen: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode a straight line between two clouds' latent codes.
    Interpolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value_t = 2048)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Dump a cloud's spectrum, rectified spectrum and sphere function.
    RectifyViz {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_prefix: String,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn default_log(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.csv");
    PathBuf::from(s)
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::TrainVae { cfg, seed, out, log } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (ck, rows) = train_vae(&cfg)?;
            ck.save(&out)?;
            write_file(&log.unwrap_or_else(|| default_log(&out)), &vae_log_csv(&rows))?;
            info!("wrote {}", out.display());
        }
        Command::TrainDdpm { cfg, seed, vae, out, log } => {
            let mut cfg = cfg.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let stage1 = ModelCheckpoint::load(&vae)?;
            let (ck, rows) = train_ddpm(&cfg, &stage1)?;
            ck.save(&out)?;
            write_file(&log.unwrap_or_else(|| default_log(&out)), &ddpm_log_csv(&rows))?;
            info!("wrote {}", out.display());
        }
        Command::Generate { ckpt, shapes, points, seed, out_dir, prior } => {
            let ck = ModelCheckpoint::load(&ckpt)?;
            let prior = match prior {
                PriorArg::Diffusion => LatentPrior::Diffusion,
                PriorArg::Gaussian => LatentPrior::Gaussian,
            };
            let clouds = generate_with(&ck, prior, shapes, points, seed)?;
            write_cloud_dir(&out_dir, &clouds)?;
            info!("wrote {} clouds to {}", clouds.len(), out_dir.display());
        }
        Command::Evaluate { gen, reference, out, cfg } => {
            let cfg = cfg.load()?;
            let rows = freqcloud::pipeline::evaluate(&gen, &reference, &cfg.metrics)?;
            write_report(&rows, &out)?;
            info!("wrote {}", out.display());
        }
        Command::Interpolate { ckpt, a, b, steps, points, seed, out_dir } => {
            let ck = ModelCheckpoint::load(&ckpt)?;
            let (a, b) = (PointCloud::read_text(&a)?, PointCloud::read_text(&b)?);
            let clouds = interpolate(&ck, &a, &b, steps, points, seed)?;
            write_cloud_dir(&out_dir, &clouds)?;
            info!("wrote {} clouds to {}", clouds.len(), out_dir.display());
        }
        Command::RectifyViz { input, out_prefix, cfg } => {
            let cfg = cfg.load()?;
            let cloud = PointCloud::read_text(&input)?;
            rectify_viz(&cloud, &cfg.freq)?.write(&out_prefix)?;
            info!("wrote {out_prefix}_*.csv");
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
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(if e.is_numeric() { 2 } else { 1 })
        }
    }
}
