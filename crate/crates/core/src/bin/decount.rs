//! Command line entry point for the decoupled counting pipeline: dataset
//! generation and preparation, two-stage training, evaluation, the GMP
//! ablation, and qualitative visualization.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use sha2::{Digest, Sha256};

use decount::config::load_run_config;
use decount::data::{
    dataset_content_hash, generate_synthetic, load_dataset, pad_and_tile, save_dataset,
    DatasetLayout, ImageSample, Split, SynthConfig,
};
use decount::evaluation::{evaluate, run_ablation};
use decount::training::{load_counter, load_localizer, train_counter, train_localizer, RunConfig};
use decount::viz::{export_visuals, VisualInputs};
use decount::{Error, Result};

#[derive(Parser)]
#[command(name = "decount", version, about = "Decoupled cell counting and localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key overrides, e.g. `optim.epochs=30 counter.backbone=tiny_cnn`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        load_run_config(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic fluorescence-microscopy dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        num_images: usize,
        /// Square image side in pixels.
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 174.0)]
        count_mean: f64,
        #[arg(long, default_value_t = 64.0)]
        count_std: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pad, resize and tile a dataset so every sample is `tile` x `tile`.
    Prep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 256)]
        tile: usize,
        /// Split-assignment seed used when loading the input dataset.
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Stage one: train the counting network.
    TrainCounter {
        #[arg(long)]
        data: PathBuf,
        /// Parent directory; each run gets a fresh subdirectory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stage two: train the localizer against a frozen counter checkpoint.
    TrainLocalizer {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        counter: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Report per-image counts and MAE/MSE on one split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        counter: PathBuf,
        #[arg(long)]
        localizer: Option<PathBuf>,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Paired with/without-GMP comparison over several seeds.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds, one paired run each.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Export four-panel PNGs (input, coarse, fine, overlay) for a split.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        counter: PathBuf,
        #[arg(long)]
        localizer: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 8)]
        limit: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        "val" => Ok(Split::Val),
        other => Err(format!("unknown split '{other}' (expected train, test or val)")),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err}", err.class());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn load(data: &Path, split_seed: u64) -> Result<(Vec<ImageSample>, String)> {
    let samples = load_dataset(data, &DatasetLayout { split_seed })?;
    let hash = dataset_content_hash(data)?;
    Ok((samples, hash))
}

/// Fresh run directory under `parent`: unix timestamp plus a short hash of
/// the effective configuration.
fn run_dir(parent: &Path, cfg: &RunConfig) -> Result<PathBuf> {
    let toml = toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let hash = hex::encode(Sha256::digest(toml.as_bytes()));
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let dir = parent.join(format!("run-{stamp}-{}", &hash[..8]));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, num_images, size, count_mean, count_std, seed } => {
            let cfg = SynthConfig {
                num_images,
                image_size: (size, size),
                count_mean,
                count_std,
                seed,
                ..Default::default()
            };
            let samples = generate_synthetic(&cfg)?;
            let manifest = save_dataset(&samples, &out, Some(&cfg))?;
            println!(
                "wrote {} images to {} (content hash {})",
                manifest.num_samples,
                out.display(),
                &manifest.content_hash[..12]
            );
        }
        Command::Prep { data, out, tile, split_seed } => {
            let (samples, _) = load(&data, split_seed)?;
            let mut tiles = Vec::new();
            for sample in &samples {
                tiles.extend(pad_and_tile(sample, tile)?);
            }
            let manifest = save_dataset(&tiles, &out, None)?;
            println!(
                "tiled {} images into {} patches at {}",
                samples.len(),
                manifest.num_samples,
                out.display()
            );
        }
        Command::TrainCounter { data, out, config } => {
            let cfg = config.load()?;
            let (samples, hash) = load(&data, cfg.seed)?;
            let dir = run_dir(&out, &cfg)?;
            let manifest = train_counter(&cfg, &samples, &hash, &dir)?;
            println!(
                "counter run {} finished: best val metric {:.4} at epoch {}",
                dir.display(),
                manifest.best_val_metric,
                manifest.best_epoch
            );
        }
        Command::TrainLocalizer { data, counter, out, config } => {
            let cfg = config.load()?;
            let (samples, hash) = load(&data, cfg.seed)?;
            let dir = run_dir(&out, &cfg)?;
            let manifest = train_localizer(&cfg, &samples, &hash, &counter, &dir)?;
            println!(
                "localizer run {} finished: best val metric {:.6} at epoch {}",
                dir.display(),
                manifest.best_val_metric,
                manifest.best_epoch
            );
        }
        Command::Eval { data, counter, localizer, split, out, batch_size, split_seed } => {
            let (samples, _) = load(&data, split_seed)?;
            let (counter, _) = load_counter(&counter)?;
            let localizer = localizer.map(|d| load_localizer(&d)).transpose()?;
            let report = evaluate(
                &counter,
                localizer.as_ref().map(|(l, _)| l),
                &samples,
                split,
                batch_size,
            )?;
            report.write(&out)?;
            println!(
                "{:?} split: {} images, MAE {:.3}, MSE {:.3}",
                split,
                report.rows.len(),
                report.mae,
                report.mse
            );
        }
        Command::Ablate { data, out, seeds, config } => {
            let cfg = config.load()?;
            let (samples, hash) = load(&data, cfg.seed)?;
            let report = run_ablation(&cfg, &samples, &hash, &seeds, &out)?;
            println!("variant,mae,mse");
            print!("{}", report.to_csv().lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
        }
        Command::Viz { data, counter, localizer, out, split, limit, split_seed } => {
            let (samples, _) = load(&data, split_seed)?;
            let (counter, _) = load_counter(&counter)?;
            let (localizer, _) = load_localizer(&localizer)?;
            let device = candle_core::Device::Cpu;
            let chosen: Vec<&ImageSample> =
                samples.iter().filter(|s| s.split == split).take(limit).collect();
            if chosen.is_empty() {
                return Err(Error::Input(format!("no samples in the {split:?} split")));
            }
            for sample in chosen {
                let images = decount::training::images_to_tensor(&[sample], &device)?;
                let coarse = counter.forward(&images)?;
                let cond = decount::localizer::condition_inputs(&images, &coarse.values.detach())?;
                let fine = localizer.forward(&cond)?;
                let coarse_arr = tensor_to_array2(&coarse.values)?;
                let fine_arr = tensor_to_array2(&fine)?;
                let fine_map = decount::data::DensityMap::new(fine_arr.mapv(|v| v.max(0.0)))?;
                let predicted = coarse.count_values()?[0];
                export_visuals(
                    &VisualInputs {
                        sample,
                        coarse: &coarse_arr,
                        fine: &fine_map,
                        predicted_count: predicted,
                    },
                    &out.join(format!("{}.png", sample.source_id.replace(['#', '/'], "_"))),
                )?;
            }
            println!("wrote visual panels to {}", out.display());
        }
    }
    Ok(())
}

/// `(1, 1, H, W)` tensor to an H x W array.
fn tensor_to_array2(t: &candle_core::Tensor) -> Result<Array2<f64>> {
    let (_, _, h, w) = t.dims4()?;
    let data = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Array2::from_shape_vec((h, w), data)
        .map_err(|e| Error::Shape(format!("tensor did not reshape to ({h}, {w}): {e}")))
}
