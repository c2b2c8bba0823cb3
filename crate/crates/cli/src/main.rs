//! `timgan`: dataset generation, training, evaluation, editing and serving.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

mod config;

use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use timgan_core::checkpoint;
use timgan_core::editor::{Model, Variant};
use timgan_core::eval::{evaluate, export_routes, run_ablation, EvalReport};
use timgan_core::image_io::{encode_gray_png, read_png, upsample_nearest, write_png};
use timgan_core::routing::write_routes_csv;
use timgan_core::scenegen::{build_dataset, load_split, Split};
use timgan_core::training::{pretrain_autoencoder, train, unique_images};
use timgan_service::ServiceConfig;

use config::{dataset_config, eval_config, train_config, write_run_manifest, UsageError};

pub const VERSION: &str = env!("TIMGAN_BUILD_VERSION");

#[derive(Parser, Debug)]
#[command(name = "timgan", version = VERSION, about = "Text-guided image manipulation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic edit dataset.
    GenData(GenDataArgs),
    /// Pretrain the image autoencoder on every training image.
    Pretrain(PretrainArgs),
    /// Train the full editor on top of a pretrained autoencoder.
    Train(TrainArgs),
    /// Score a checkpoint with the Fréchet distance and retrieval score.
    Eval(EvalArgs),
    /// Train and evaluate ablated variants under one seed and config.
    Ablate(AblateArgs),
    /// Apply one instruction to one image.
    Edit(EditArgs),
    /// Write the routing weights of every sample as CSV.
    ExportRoutes(ExportRoutesArgs),
    /// Serve the editing REST API.
    Serve(ServeArgs),
}

#[derive(Args, Debug)]
struct DataArg {
    /// Dataset root.
    #[arg(long, env = "TIMGAN_DATA_ROOT", default_value = "data")]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Dataset config JSON (train, test, seed, canvas, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArg,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Training config JSON with flat keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArg,
    /// Pretrained autoencoder checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<Variant>,
    /// Gumbel-softmax temperature.
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Evaluation config JSON (pool_size, ns, seed).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for drawing retrieval distractors; defaults to the checkpoint's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Directory for report.json; defaults to the checkpoint directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    data: DataArg,
    /// Pretrained autoencoder checkpoint shared by every variant.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output directory; each variant gets a subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Variants to run; all of them when omitted.
    #[arg(long, value_delimiter = ',')]
    variant: Vec<Variant>,
    #[arg(long)]
    pool_size: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct EditArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PNG.
    #[arg(long)]
    image: PathBuf,
    /// Instruction text.
    #[arg(long)]
    text: String,
    /// Output PNG; the mask goes next to it as `<stem>.mask.png`.
    #[arg(long)]
    out: PathBuf,
    /// Sample routing with Gumbel noise from this seed instead of routing deterministically.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Args, Debug)]
struct ExportRoutesArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    data: DataArg,
    #[arg(long, default_value = "test")]
    split: Split,
    /// CSV file to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    /// Directory of static UI assets served under `/`.
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Maximum number of live sessions.
    #[arg(long, default_value_t = 256)]
    capacity: usize,
}

fn load_model(dir: &Path) -> anyhow::Result<Model<f32>> {
    checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

fn load(data: &Path, split: Split) -> anyhow::Result<Vec<timgan_core::scenegen::EditSample>> {
    load_split(data, split).with_context(|| format!("loading the {split} split from {}", data.display()))
}

fn print_report(report: &EvalReport) {
    println!("frechet {:.6}", report.frechet);
    for (n, v) in &report.rs {
        println!("RS@{n} {v:.4}");
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let cfg = dataset_config(a.config.as_deref(), a.seed)?;
            build_dataset(&cfg, &a.data.data)?;
            write_run_manifest(&a.data.data, "gen-data", cfg.seed, &cfg)?;
            println!("wrote {} train and {} test samples to {}", cfg.train, cfg.test, a.data.data.display());
        }
        Command::Pretrain(a) => {
            let cfg = train_config(a.config.as_deref(), a.seed, None, None)?;
            let samples = load(&a.data.data, Split::Train)?;
            let images = unique_images(&samples);
            let outcome = pretrain_autoencoder(&images, &cfg, Some(&a.out))?;
            write_run_manifest(&a.out, "pretrain", cfg.seed()?, &cfg)?;
            println!(
                "pretrained on {} images, final loss {:.5}",
                images.len(),
                outcome.losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Train(a) => {
            let cfg = train_config(a.config.as_deref(), a.seed, a.variant, a.tau)?;
            let pretrained = load_model(&a.ckpt)?;
            let samples = load(&a.data.data, Split::Train)?;
            let outcome = train(&samples, &cfg, &pretrained, Some(&a.out))?;
            write_run_manifest(&a.out, "train", cfg.seed()?, &cfg)?;
            if let Some(last) = outcome.epochs.last() {
                println!("final epoch: l1_img {:.5} l1_attn {:.5} d_loss {:.5}", last.l1_img, last.l1_attn, last.d_loss);
            }
        }
        Command::Eval(a) => {
            let trained_seed = checkpoint::read_manifest(&a.ckpt)
                .ok()
                .and_then(|m| m.metadata.get("seed").and_then(serde_json::Value::as_u64));
            let cfg = eval_config(a.config.as_deref(), a.seed, a.pool_size, trained_seed)?;
            let model = load_model(&a.ckpt)?;
            let samples = load(&a.data.data, a.split)?;
            let report = evaluate(&model, &samples, &cfg)?;
            let out = a.out.unwrap_or_else(|| a.ckpt.clone());
            std::fs::create_dir_all(&out)?;
            report.write(&out.join("report.json"))?;
            write_run_manifest(&out, "eval", cfg.seed, &cfg)?;
            print_report(&report);
        }
        Command::Ablate(a) => {
            let mut cfg = train_config(a.config.as_deref(), a.seed, None, a.tau)?;
            let eval = eval_config(None, Some(cfg.seed()?), a.pool_size, None)?;
            let pretrained = load_model(&a.ckpt)?;
            let train_samples = load(&a.data.data, Split::Train)?;
            let test_samples = load(&a.data.data, Split::Test)?;
            let variants = if a.variant.is_empty() { Variant::ALL.to_vec() } else { a.variant };
            let mut summary = serde_json::Map::new();
            for v in variants {
                cfg.model.variant = v;
                let dir = a.out.join(v.as_str());
                let (_, report) = run_ablation(v, &train_samples, &test_samples, &cfg, &pretrained, &eval, Some(&dir))?;
                println!("{v}:");
                print_report(&report);
                summary.insert(v.to_string(), serde_json::to_value(&report)?);
            }
            let path = a.out.join("ablation.json");
            std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")?;
            write_run_manifest(&a.out, "ablate", cfg.seed()?, &cfg)?;
        }
        Command::Edit(a) => {
            let mut model = load_model(&a.ckpt)?;
            if let Some(tau) = a.tau {
                model.config.tau = tau;
                model.config.validate()?;
            }
            let image = read_png(&a.image)?;
            let output = match a.seed {
                Some(seed) => model.edit(&image, &a.text, Some(&mut ChaCha8Rng::seed_from_u64(seed)))?,
                None => model.edit(&image, &a.text, None)?,
            };
            if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_png(&a.out, &output.image)?;
            let factor = model.config.image_size / output.mask.nrows();
            let mask_path = mask_path(&a.out);
            std::fs::write(&mask_path, encode_gray_png(&upsample_nearest(&output.mask, factor))?)?;
            let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
            let run = serde_json::json!({
                "ckpt": a.ckpt,
                "image": a.image,
                "text": a.text,
                "sampled": a.seed.is_some(),
                "model": model.config,
            });
            write_run_manifest(dir, "edit", a.seed.unwrap_or(0), &run)?;
            println!("wrote {} and {}", a.out.display(), mask_path.display());
        }
        Command::ExportRoutes(a) => {
            let model = load_model(&a.ckpt)?;
            let samples = load(&a.data.data, a.split)?;
            let records = export_routes(&model, &samples)?;
            if let Some(dir) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            write_routes_csv(&a.out, &records)?;
            println!("wrote {} routing records to {}", records.len(), a.out.display());
        }
        Command::Serve(a) => {
            let model = load_model(&a.ckpt)?;
            let config = ServiceConfig {
                capacity: a.capacity,
                static_dir: a.static_dir,
                ..ServiceConfig::default()
            };
            let addr = SocketAddr::new(a.host, a.port);
            tokio::runtime::Runtime::new()?.block_on(timgan_service::serve(model, config, addr))?;
        }
    }
    Ok(())
}

/// `out/y.png` to `out/y.mask.png`.
fn mask_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.mask.png"))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            eprintln!("run with --help for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
