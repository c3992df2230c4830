use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use eviscrib::data::{derive_seed, generate_dataset, load_dataset, make_scribble, save_dataset, GenSpec};
use eviscrib::harness::{self, TrainConfig};
use eviscrib::Tensor;

#[derive(Parser)]
#[command(
    name = "eviscrib",
    version,
    about = "Scribble-supervised segmentation with evidence-guided dual branches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic speckled dataset with dense masks and scribbles.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        /// Image size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Standard deviation of the multiplicative speckle.
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
    },
    /// Re-derive the scribbles of an existing dataset from its dense masks.
    MakeScribbles {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train both branches from a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a CNN checkpoint on a dataset; prints per-class metrics as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        /// Also write the labels of every image as PNGs into this directory.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Evaluate a CNN checkpoint under additive Gaussian noise.
    Robustness {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.15")]
        sigmas: Vec<f64>,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write uncertainty maps per noise level under this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Write the CNN's uncertainty map of every image as an 8-bit PNG.
    ExportUncertainty {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got `{s}`"))?;
    let n = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((n(h)?, n(w)?))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            out,
            count,
            classes,
            size,
            seed,
            noise,
        } => {
            if count == 0 {
                bail!("--count must be positive");
            }
            let mut spec = GenSpec::new(size.0, size.1, classes);
            spec.noise = noise;
            let samples = generate_dataset(count, &spec, seed)?;
            save_dataset(&samples, &out)?;
            log::info!("wrote {count} samples to {}", out.display());
        }
        Command::MakeScribbles { data, seed } => {
            let manifest = load_dataset(&data)?;
            let mut samples = manifest.samples()?;
            for (i, s) in samples.iter_mut().enumerate() {
                s.scribble = make_scribble(&s.mask, s.h, s.w, s.num_classes, derive_seed(seed, i as u64));
            }
            save_dataset(&samples, &data)?;
            log::info!("rewrote {} scribbles in {}", samples.len(), data.display());
        }
        Command::Train { config } => {
            let cfg = TrainConfig::load(&config)?;
            let (_, rows) = harness::train(&cfg)?;
            if let Some(last) = rows.last() {
                log::info!("finished: loss {:.4}, outputs in {}", last.total, cfg.out_dir.display());
            }
        }
        Command::Eval {
            checkpoint,
            data,
            tau,
            predictions,
        } => {
            let manifest = load_dataset(&data)?;
            let samples = manifest.samples()?;
            let (cnn, store) = harness::load_cnn(&checkpoint, manifest.num_classes)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let eval = harness::evaluate_cnn(&cnn, &store, &samples, tau)?;
            print!("{}", eval.mean.to_csv());
            println!("mean_uncertainty,{:.6}", eval.mean_uncertainty());
            if let Some(dir) = predictions {
                fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                for s in &samples {
                    let x = Tensor::from_vec(&[1, 1, s.h, s.w], s.image.clone());
                    let labels = harness::infer(&cnn, &store, &x)?;
                    let path = dir.join(format!("{}.png", s.id));
                    image::GrayImage::from_raw(s.w as u32, s.h as u32, labels)
                        .expect("buffer matches image size")
                        .save(&path)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
            }
        }
        Command::Robustness {
            checkpoint,
            data,
            sigmas,
            tau,
            seed,
            export,
        } => {
            let manifest = load_dataset(&data)?;
            let samples = manifest.samples()?;
            let (cnn, store) = harness::load_cnn(&checkpoint, manifest.num_classes)?;
            let points = harness::robustness_sweep(&cnn, &store, &samples, &sigmas, tau, seed, export.as_deref())?;
            print!("{}", harness::sweep_csv(&points));
        }
        Command::ExportUncertainty {
            checkpoint,
            data,
            out,
            tau,
        } => {
            let manifest = load_dataset(&data)?;
            let samples = manifest.samples()?;
            let (cnn, store) = harness::load_cnn(&checkpoint, manifest.num_classes)?;
            harness::export_uncertainty(&cnn, &store, &samples, tau, &out)?;
            log::info!("wrote {} maps to {}", samples.len(), out.display());
        }
    }
    Ok(())
}
