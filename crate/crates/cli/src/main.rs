mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use candle_core::DType;
use clap::{Args, Parser, Subcommand, ValueEnum};
use haze_client::{Client, RestoreRequest};
use haze_core::checkpoint::{self, Checkpoint};
use haze_core::data::{load_paired, load_unpaired, DatasetLayout, UnpairedDatasetSpec};
use haze_core::grid::{self, GridPlan, ReportedManifest, LR_GRID};
use haze_core::synth::{self, DegradationKind, ToyDatasetSpec};
use haze_core::training::{self, GanInit, Phase, TrainConfig, ALLOWED_K};
use haze_core::{imageio, metrics};

const HOME_ENV: &str = "HAZE_RESTORE_HOME";

#[derive(Parser)]
#[command(name = "haze-restore", version, about = "Train, evaluate and run weather-degradation restoration models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised pretraining of the restoration network on paired/
    Pretrain {
        #[command(flatten)]
        train: TrainArgs,
        /// Checkpoint to resume from [default: none]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Unpaired adversarial training from a pretrained checkpoint
    TrainGan {
        #[command(flatten)]
        train: TrainArgs,
        /// Pretrained checkpoint for the hazy-to-clean generator [default: fresh networks]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune an adversarial checkpoint with K paired images
    Finetune {
        #[command(flatten)]
        train: TrainArgs,
        /// Adversarial checkpoint to start from
        #[arg(long)]
        checkpoint: PathBuf,
        /// Number of paired images; values outside 25/20/10/5/0 are accepted with a warning [default: 25]
        #[arg(long)]
        k_paired: Option<usize>,
    },
    /// Fine-tune every K (or pretrain every learning rate) and tabulate the results
    Grid {
        #[command(flatten)]
        train: TrainArgs,
        /// Adversarial checkpoint to fine-tune from [default: pretrain and train one first]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Which table to produce
        #[arg(long, value_enum, default_value_t = Table::K)]
        table: Table,
    },
    /// Restore a directory of images and score them against references
    Evaluate {
        /// Checkpoint whose hazy-to-clean generator is evaluated
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root; its evaluation split is used unless --input is given [default: data]
        #[arg(long)]
        data_root: Option<PathBuf>,
        /// Directory of degraded images [default: evaluation split of --data-root]
        #[arg(long)]
        input: Option<PathBuf>,
        /// Directory of clean references matched by file stem [default: evaluation split of --data-root]
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Directory for restored PNGs and metrics.csv/metrics.json [default: none]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Square working resolution [default: native size]
        #[arg(long)]
        size: Option<usize>,
        #[command(flatten)]
        device: DeviceArg,
    },
    /// Restore one image locally or through a running service
    Restore {
        /// Degraded input image
        #[arg(long)]
        input: PathBuf,
        /// Checkpoint [default: newest finetune_k<K> checkpoint in $HAZE_RESTORE_HOME/checkpoints]
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output PNG [default: <input stem>_restored.png next to the input]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Clean reference; when given SSIM and PSNR are printed [default: none]
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Variant to use [default: 25]
        #[arg(long)]
        k_paired: Option<usize>,
        /// Service root URL, e.g. http://127.0.0.1:8080 [default: restore locally]
        #[arg(long)]
        server: Option<String>,
        #[command(flatten)]
        device: DeviceArg,
    },
    /// Write synthetic degraded images, or a complete toy dataset
    Synthesize {
        /// Output directory
        #[arg(long)]
        out: PathBuf,
        /// Directory of clean images to degrade [default: write a toy dataset instead]
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Kind::Haze)]
        kind: Kind,
        /// Severity in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        severity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Toy dataset image side
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Toy dataset paired count
        #[arg(long, default_value_t = 25)]
        paired: usize,
    },
}

#[derive(Args, Clone)]
struct DeviceArg {
    /// Compute device; only "cpu" is built in
    #[arg(long, default_value = "cpu")]
    device: String,
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// Dataset root with paired/, unpaired_hazy/, unpaired_clean/ and optional test/ [default: data]
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Output directory [default: $HAZE_RESTORE_HOME/checkpoints, else ./checkpoints]
    #[arg(long)]
    out: Option<PathBuf>,
    /// Learning rate [default: 0.001 pretraining, 0.0002 adversarial phases]
    #[arg(long)]
    lr: Option<f64>,
    /// Epochs [default: 50; smoke profile 20 pretraining, 3 adversarial]
    #[arg(long)]
    epochs: Option<usize>,
    /// Seed for initialization, data order and augmentation [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Stop after this many optimizer steps [default: no limit]
    #[arg(long)]
    max_steps: Option<u64>,
    /// Flat key = value file; flags take precedence over it [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// full: 256x256 default networks; smoke: 32x32 tiny networks
    #[arg(long, value_enum, default_value_t = Profile::Full)]
    profile: Profile,
    #[command(flatten)]
    device: DeviceArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Full,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    /// Number of Images, SSIM, PSNR (dB)
    K,
    /// Learning Rate, SSIM, PSNR (dB)
    Lr,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Haze,
    Rain,
    Snow,
}

impl From<Kind> for DegradationKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Haze => DegradationKind::Haze,
            Kind::Rain => DegradationKind::Rain,
            Kind::Snow => DegradationKind::Snow,
        }
    }
}

/// Failure with its exit code.
enum Failure {
    /// Unreadable input (exit 2).
    Input(anyhow::Error),
    /// Checkpoint missing, corrupt or inconsistent with the request (exit 3).
    Checkpoint(anyhow::Error),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Other(e)
    }
}

impl From<haze_core::Error> for Failure {
    fn from(e: haze_core::Error) -> Self {
        Failure::Other(e.into())
    }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(f) => {
            let (code, e) = match f {
                Failure::Input(e) => (2, e),
                Failure::Checkpoint(e) => (3, e),
                Failure::Other(e) => (1, e),
            };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}

fn default_checkpoint_dir() -> PathBuf {
    std::env::var_os(HOME_ENV).map_or_else(|| PathBuf::from("checkpoints"), |h| PathBuf::from(h).join("checkpoints"))
}

/// Default, then profile, then config file, then flags.
fn train_config(phase: Phase, args: &TrainArgs) -> anyhow::Result<(TrainConfig, PathBuf)> {
    haze_core::device(&args.device.device)?;
    let mut cfg = match args.profile {
        Profile::Full => TrainConfig::new(phase),
        Profile::Smoke => TrainConfig::smoke(phase),
    };
    cfg.checkpoint_dir = default_checkpoint_dir();
    let mut data_root = PathBuf::from("data");
    if let Some(path) = &args.config {
        if let Some(root) = config::apply(&mut cfg, &config::load(path)?)? {
            data_root = root;
        }
    }
    if let Some(root) = &args.data_root {
        data_root = root.clone();
    }
    if let Some(out) = &args.out {
        cfg.checkpoint_dir = out.clone();
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.max_steps.is_some() {
        cfg.max_steps = args.max_steps;
    }
    if phase != Phase::Finetune {
        cfg.k_paired = 0;
    }
    Ok((cfg, data_root))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Pretrain { train, checkpoint } => {
            let (cfg, root) = train_config(Phase::FfaPretrain, &train)?;
            let layout = DatasetLayout::new(&root);
            let data = load_paired(&layout.paired(None), &cfg.paired_augmentation(), cfg.seed)?;
            let val = validation(&layout, &cfg)?;
            let out = training::train_ffa(&cfg, &data, val.as_ref(), checkpoint.as_deref())?;
            report_training(&out);
        }
        Command::TrainGan { train, checkpoint } => {
            let (cfg, root) = train_config(Phase::Cyclegan, &train)?;
            let layout = DatasetLayout::new(&root);
            let (hazy, clean) = unpaired(&layout, &cfg)?;
            let init = match checkpoint {
                Some(p) => GanInit::Pretrained(p),
                None => {
                    tracing::warn!("no --checkpoint given; starting from freshly initialized networks");
                    GanInit::Fresh
                }
            };
            let val = validation(&layout, &cfg)?;
            let out = training::train_cyclegan(&cfg, &init, &hazy, &clean, None, val.as_ref(), None)?;
            report_training(&out);
        }
        Command::Finetune {
            train,
            checkpoint,
            k_paired,
        } => {
            let (mut cfg, root) = train_config(Phase::Finetune, &train)?;
            if let Some(k) = k_paired {
                cfg.k_paired = k;
            } else if train.config.is_none() {
                cfg.k_paired = 25;
            }
            if !ALLOWED_K.contains(&cfg.k_paired) {
                tracing::warn!("K={} is not one of {ALLOWED_K:?}; continuing", cfg.k_paired);
                cfg.allow_any_k = true;
            }
            let layout = DatasetLayout::new(&root);
            let (hazy, clean) = unpaired(&layout, &cfg)?;
            let paired = if cfg.k_paired > 0 {
                Some(load_paired(&layout.paired(Some(cfg.k_paired)), &cfg.paired_augmentation(), cfg.seed)?)
            } else {
                None
            };
            let val = validation(&layout, &cfg)?;
            let out = training::finetune(&cfg, &checkpoint, &hazy, &clean, paired.as_ref(), val.as_ref())?;
            report_training(&out);
        }
        Command::Grid {
            train,
            checkpoint,
            table,
        } => return grid(&train, checkpoint, table),
        Command::Evaluate {
            checkpoint,
            data_root,
            input,
            reference,
            out,
            size,
            device,
        } => {
            haze_core::device(&device.device)?;
            let generator = load_generator(&checkpoint)?;
            let spec = DatasetLayout::new(data_root.unwrap_or_else(|| PathBuf::from("data"))).evaluation();
            let hazy_dir = input.unwrap_or(spec.hazy_dir);
            let clean_dir = reference.unwrap_or(spec.clean_dir);
            let variant = variant_label(&checkpoint);
            let eval = training::evaluate_dir(&generator, &variant, &hazy_dir, Some(&clean_dir), size, out.as_deref())?;
            if let Some(dir) = &out {
                metrics::write_reports_csv(&dir.join("metrics.csv"), &eval.reports)?;
                metrics::write_reports_json(&dir.join("metrics.json"), &eval.reports)?;
            }
            for r in &eval.reports {
                println!("{}\tSSIM {:.4}\tPSNR {:.2} dB", r.image_id, r.ssim, r.psnr_db);
            }
            for id in &eval.unreferenced {
                println!("{id}\tno reference");
            }
            match eval.summary() {
                Some(s) => println!("mean over {}: SSIM {:.4}\tPSNR {:.2} dB", s.count, s.ssim, s.psnr_db),
                None => println!("no references found; restorations only"),
            }
        }
        Command::Restore {
            input,
            checkpoint,
            out,
            reference,
            k_paired,
            server,
            device,
        } => {
            haze_core::device(&device.device)?;
            let k = k_paired.unwrap_or(25);
            let out = out.unwrap_or_else(|| {
                let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                input.with_file_name(format!("{stem}_restored.png"))
            });
            match server {
                Some(url) => restore_remote(&url, &input, reference.as_deref(), k, &out)?,
                None => restore_local(&input, checkpoint, reference.as_deref(), k_paired, &out)?,
            }
            println!("{}", out.display());
        }
        Command::Synthesize {
            out,
            input,
            kind,
            severity,
            seed,
            size,
            paired,
        } => match input {
            None => {
                let spec = ToyDatasetSpec {
                    paired,
                    size,
                    seed,
                    ..ToyDatasetSpec::default()
                };
                synth::write_toy_dataset(&out, &spec)?;
                println!("{}", out.display());
            }
            Some(dir) => {
                std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
                let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
                    .with_context(|| format!("reading {}", dir.display()))
                    .map_err(Failure::Input)?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| imageio::is_image_path(p))
                    .collect();
                files.sort();
                for (i, path) in files.iter().enumerate() {
                    let img = imageio::load_rgb(path).map_err(|e| Failure::Input(e.into()))?;
                    let clean = imageio::rgb_to_tensor(&img)?;
                    let degraded = synth::synthesize_degradation(&clean, kind.into(), severity, seed + i as u64)?;
                    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
                    imageio::save_png(&out.join(format!("{stem}.png")), &degraded)?;
                }
                println!("{} images written to {}", files.len(), out.display());
            }
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn validation(layout: &DatasetLayout, cfg: &TrainConfig) -> anyhow::Result<Option<haze_core::data::PairedDataset>> {
    if !(layout.test_hazy().is_dir() && layout.test_clean().is_dir()) {
        return Ok(None);
    }
    let aug = haze_core::data::AugmentationConfig::plain(cfg.image_size);
    Ok(Some(load_paired(&layout.evaluation(), &aug, cfg.seed)?))
}

fn unpaired(
    layout: &DatasetLayout,
    cfg: &TrainConfig,
) -> anyhow::Result<(haze_core::data::ImageDataset, haze_core::data::ImageDataset)> {
    let aug = cfg.unpaired_augmentation();
    let spec = |dir| UnpairedDatasetSpec {
        image_dir: dir,
        sample_count: cfg.unpaired_samples,
    };
    Ok((
        load_unpaired(&spec(layout.unpaired_hazy()), &aug, cfg.seed)?,
        load_unpaired(&spec(layout.unpaired_clean()), &aug, cfg.seed + 1)?,
    ))
}

fn report_training(out: &training::TrainOutcome) {
    if let Some(last) = out.history.last() {
        println!("epoch {}\tstep {}\tloss {:.5}", last.epoch, last.step, last.train_loss);
    }
    println!("{}", out.checkpoint.display());
}

fn grid(args: &TrainArgs, gan_init: Option<PathBuf>, table: Table) -> Outcome {
    let (pretrain, root) = train_config(Phase::FfaPretrain, args)?;
    let (cyclegan, _) = train_config(Phase::Cyclegan, args)?;
    let (mut finetune, _) = train_config(Phase::Finetune, args)?;
    finetune.k_paired = 0;
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("grid"));
    let ckpt_dir = out_dir.join("checkpoints");
    let plan = GridPlan {
        data_root: root,
        gan_init,
        pretrain: TrainConfig {
            checkpoint_dir: ckpt_dir.clone(),
            ..pretrain
        },
        cyclegan: TrainConfig {
            checkpoint_dir: ckpt_dir.clone(),
            ..cyclegan
        },
        finetune: TrainConfig {
            checkpoint_dir: ckpt_dir.clone(),
            ..finetune
        },
        ks: ALLOWED_K.to_vec(),
        out_dir,
    };
    let report = match table {
        Table::K => {
            let r = grid::run_k_grid(&plan)?;
            ReportedManifest::default().write(&ckpt_dir)?;
            r
        }
        Table::Lr => {
            if args.lr.is_some() {
                tracing::warn!("--lr is ignored by the learning-rate table");
            }
            grid::run_lr_grid(&plan, &LR_GRID)?
        }
    };
    let md = std::fs::read_to_string(report.table.with_extension("md")).context("reading the table")?;
    print!("{md}");
    println!("{}", report.table.display());
    if report.is_complete() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &report.failures {
            eprintln!("cell {} failed: {}", f.label, f.error);
        }
        Ok(ExitCode::FAILURE)
    }
}

fn variant_label(path: &Path) -> String {
    Checkpoint::load(path).map_or_else(|_| "unknown".into(), |c| c.meta.variant)
}

fn load_generator(path: &Path) -> Result<haze_core::ffa::Ffa, Failure> {
    Checkpoint::load(path)
        .and_then(|c| c.generator(DType::F32))
        .map_err(|e| Failure::Checkpoint(e.into()))
}

fn load_input(path: &Path) -> Result<(image::RgbImage, candle_core::Tensor), Failure> {
    let img = imageio::load_rgb(path).map_err(|e| Failure::Input(e.into()))?;
    let t = imageio::rgb_to_tensor(&img)?;
    haze_core::ffa::check_image(&t).map_err(|e| Failure::Input(anyhow::anyhow!("{}: {e}", path.display())))?;
    Ok((img, t))
}

fn load_reference(path: &Path, height: u32, width: u32) -> Result<candle_core::Tensor, Failure> {
    let img = imageio::load_rgb(path).map_err(|e| Failure::Input(e.into()))?;
    Ok(imageio::rgb_to_tensor(&imageio::resize(&img, height as usize, width as usize))?)
}

fn print_metrics(ssim: f64, psnr_db: f64) {
    println!("SSIM {ssim:.4}\tPSNR {psnr_db:.2} dB");
}

fn restore_local(
    input: &Path,
    checkpoint: Option<PathBuf>,
    reference: Option<&Path>,
    k: Option<usize>,
    out: &Path,
) -> Result<(), Failure> {
    let (img, x) = load_input(input)?;
    let path = match checkpoint {
        Some(p) => p,
        None => {
            let dir = default_checkpoint_dir();
            let k = k.unwrap_or(25);
            checkpoint::latest(&dir, Phase::Finetune, &format!("k{k}")).ok_or_else(|| {
                Failure::Checkpoint(anyhow::anyhow!("no finetune_k{k} checkpoint in {}", dir.display()))
            })?
        }
    };
    let ckpt = Checkpoint::load(&path).map_err(|e| Failure::Checkpoint(e.into()))?;
    if let Some(k) = k {
        let want = format!("k{k}");
        if ckpt.meta.phase == Phase::Finetune && ckpt.meta.variant != want {
            return Err(Failure::Checkpoint(anyhow::anyhow!(
                "{} holds variant {}, not {want}",
                path.display(),
                ckpt.meta.variant
            )));
        }
    }
    let generator = ckpt
        .generator(DType::F32)
        .map_err(|e| Failure::Checkpoint(anyhow::anyhow!("{}: {e}", path.display())))?;
    let restored = generator.restore(&x)?;
    imageio::save_png(out, &restored)?;
    if let Some(r) = reference {
        let r = load_reference(r, img.height(), img.width())?;
        print_metrics(metrics::ssim(&restored, &r, 1.0)?, metrics::psnr(&restored, &r, 1.0)?);
    }
    Ok(())
}

fn restore_remote(url: &str, input: &Path, reference: Option<&Path>, k: usize, out: &Path) -> Result<(), Failure> {
    let (img, _) = load_input(input)?;
    let bytes = std::fs::read(input).map_err(|e| Failure::Input(e.into()))?;
    let mut req = RestoreRequest::new(bytes, k);
    req.file_name = input.file_name().and_then(|n| n.to_str()).unwrap_or("upload").to_string();
    if let Some(r) = reference {
        req = req.with_reference(std::fs::read(r).map_err(|e| Failure::Input(e.into()))?);
    }
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .context("starting the runtime")?;
    let client = Client::new(url);
    let (resp, png) = rt
        .block_on(async {
            let resp = client.restore(req).await?;
            let png = client.artifact(&resp.restored_image_url).await?;
            Ok::<_, haze_client::ClientError>((resp, png))
        })
        .map_err(|e| match e.status() {
            Some(404 | 503) => Failure::Checkpoint(e.into()),
            Some(400) => Failure::Input(e.into()),
            _ => Failure::Other(e.into()),
        })?;
    let restored = imageio::decode_rgb(&png)?;
    let restored = imageio::resize(&restored, img.height() as usize, img.width() as usize);
    restored.save(out).with_context(|| format!("writing {}", out.display()))?;
    if let (Some(ssim), Some(psnr)) = (resp.ssim, resp.psnr_db) {
        print_metrics(ssim, psnr);
    }
    Ok(())
}
