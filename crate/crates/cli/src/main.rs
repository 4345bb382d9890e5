mod config;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rescale_core::data::{load_png, save_png, synth, Corpus, ImageRGB};
use rescale_core::gradcheck::{check_all, CheckKind, GradCheckOptions};
use rescale_core::inn::{sample_latent, LatentMode, RescaleModel};
use rescale_core::metrics::{evaluate_pair, mean_report, write_csv, MetricReport};
use rescale_core::tensor::{Shape, Tensor};
use rescale_core::trainer::{
    ablate, baseline_grid, downscale_image, table1_grid, train, upscale_tensor, write_ablation_csv,
};
use rescale_core::{Checkpoint, LatentFile};

use crate::config::ConfigArgs;

#[derive(Parser, Debug)]
#[command(
    name = "rescale",
    version,
    about = "Invertible image rescaling with dual latent variables"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and logs to --out
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for checkpoints and CSV logs
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Print the resolved configuration as TOML and exit
        #[arg(long)]
        print_config: bool,
    },
    /// Run the forward model: HR PNG in, LR PNG out
    Downscale {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// HR input image
        #[arg(long = "in", value_name = "PNG")]
        input: PathBuf,
        /// LR output image
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Also write the upscaling latent z to this file
        #[arg(long, value_name = "FILE")]
        save_z: Option<PathBuf>,
        /// Store the unrounded LR in the --save-z file as well, for an exact inverse
        #[arg(long, requires = "save_z")]
        no_quantize: bool,
        /// Seed for sampled latents
        #[arg(long, env = "RESCALE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run the inverse model: LR PNG in, HR PNG out
    Upscale {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// LR input image
        #[arg(long = "in", value_name = "PNG")]
        input: PathBuf,
        /// HR output image
        #[arg(long, value_name = "PNG")]
        out: PathBuf,
        /// Upscaling latent distribution; defaults to the checkpoint's setting
        #[arg(long, value_enum)]
        zhat: Option<Mode>,
        /// Use the latent saved by `downscale --save-z` instead of sampling one
        #[arg(long, value_name = "FILE", conflicts_with = "zhat")]
        zblob: Option<PathBuf>,
        /// Seed for sampled latents
        #[arg(long, env = "RESCALE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Downscale, upscale and score against the input
    Roundtrip {
        /// Model checkpoint
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// A PNG or a directory of PNGs
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// CSV report path; the report goes to stdout when omitted
        #[arg(long, value_name = "CSV")]
        report: Option<PathBuf>,
        /// Latent for the inverse: the true z, or a sampled one
        #[arg(long, value_enum, default_value_t = ZSource::True)]
        z: ZSource,
        /// Keep the LR unrounded between the two passes
        #[arg(long)]
        no_quantize: bool,
        /// Seed for sampled latents
        #[arg(long, env = "RESCALE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Train a grid of latent settings from one base configuration
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory; each variant gets a subdirectory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Which latent settings to train
        #[arg(long, value_enum, default_value_t = Grid::Table1)]
        grid: Grid,
    },
    /// PSNR and SSIM on luma between two PNGs or two directories
    Metrics {
        /// Ground-truth PNG or directory
        #[arg(long, value_name = "PATH")]
        reference: PathBuf,
        /// PNG or directory to score; directories are matched by file name
        #[arg(long, value_name = "PATH")]
        test: PathBuf,
        /// Pixels cropped from every side before scoring
        #[arg(long, default_value_t = 0)]
        border: usize,
        /// CSV report path; the report goes to stdout when omitted
        #[arg(long, value_name = "CSV")]
        report: Option<PathBuf>,
    },
    /// Finite-difference checks of every gradient
    Gradcheck {
        /// Model size for the composite checks
        #[arg(long, value_enum, default_value_t = Size::Tiny)]
        size: Size,
        /// Scale analytic gradients by 1 + X before comparing (harness self-test)
        #[arg(long, default_value_t = 0.0, value_name = "X")]
        perturb: f64,
        /// Seed for the random test inputs
        #[arg(long, env = "RESCALE_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Write synthetic natural-looking PNGs for quick experiments
    Synth {
        /// Output directory
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Number of images
        #[arg(long, default_value_t = 20)]
        count: usize,
        /// Side length in pixels
        #[arg(long, default_value_t = 128)]
        size: usize,
        /// Seed for image generation
        #[arg(long, env = "RESCALE_SEED", default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    Zero,
    Gaussian,
}

impl From<Mode> for LatentMode {
    fn from(m: Mode) -> LatentMode {
        match m {
            Mode::Zero => LatentMode::Zero,
            Mode::Gaussian => LatentMode::Gaussian,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ZSource {
    True,
    Zero,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Grid {
    /// The seven latent settings with C_w = 2
    Table1,
    /// The C_w = 0 baseline with zero and gaussian z
    Baseline,
    /// Baseline then table1
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Size {
    Tiny,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train {
            config,
            out,
            print_config,
        } => cmd_train(&config, &out, print_config)?,
        Command::Downscale {
            ckpt,
            input,
            out,
            save_z,
            no_quantize,
            seed,
        } => cmd_downscale(&ckpt, &input, &out, save_z.as_deref(), no_quantize, seed)?,
        Command::Upscale {
            ckpt,
            input,
            out,
            zhat,
            zblob,
            seed,
        } => cmd_upscale(&ckpt, &input, &out, zhat, zblob.as_deref(), seed)?,
        Command::Roundtrip {
            ckpt,
            input,
            report,
            z,
            no_quantize,
            seed,
        } => cmd_roundtrip(&ckpt, &input, report.as_deref(), z, no_quantize, seed)?,
        Command::Ablate { config, out, grid } => cmd_ablate(&config, &out, grid)?,
        Command::Metrics {
            reference,
            test,
            border,
            report,
        } => cmd_metrics(&reference, &test, border, report.as_deref())?,
        Command::Gradcheck { size: _, perturb, seed } => return cmd_gradcheck(perturb, seed),
        Command::Synth { out, count, size, seed } => cmd_synth(&out, count, size, seed)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn load_model(path: &Path) -> Result<RescaleModel<f32>> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(ckpt.to_model()?)
}

/// A single PNG, or every PNG in a directory.
fn load_images(path: &Path) -> Result<Corpus> {
    if path.is_dir() {
        let corpus = Corpus::load_dir(path)?;
        ensure!(!corpus.is_empty(), "{} contains no PNG files", path.display());
        Ok(corpus)
    } else {
        let name = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        Ok(Corpus::from_images(vec![name], vec![load_png(path)?]))
    }
}

fn crop_for_scale(img: &ImageRGB, scale: usize, name: &str) -> Result<ImageRGB> {
    let cropped = img.center_crop_to_multiple(scale)?;
    if cropped.width() != img.width() || cropped.height() != img.height() {
        log::warn!(
            "{name}: {}x{} is not divisible by {scale}; center-cropped to {}x{}",
            img.width(),
            img.height(),
            cropped.width(),
            cropped.height()
        );
    }
    Ok(cropped)
}

fn write_report(path: Option<&Path>, rows: &[(String, MetricReport)]) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = File::create(p).with_context(|| format!("creating {}", p.display()))?;
            write_csv(&mut file, rows)?;
        }
        None => write_csv(&mut std::io::stdout().lock(), rows)?,
    }
    if let Some(mean) = mean_report(rows) {
        log::info!(
            "mean over {} image(s): PSNR {:.4} dB, SSIM {:.6}",
            rows.len(),
            mean.psnr_capped(),
            mean.ssim
        );
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs, out: &Path, print_config: bool) -> Result<()> {
    let config = args.resolve()?;
    if print_config {
        print!("{}", config.to_toml()?);
        return Ok(());
    }
    let train_dir = config
        .train_dir
        .as_deref()
        .context("no training images: pass --train-dir or set train_dir in the config file")?;
    let train_set = load_images(train_dir)?;
    let eval_set = config.eval_dir.as_deref().map(load_images).transpose()?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), config.to_toml()?)?;
    let run = train(&config, &train_set, eval_set.as_ref(), Some(out))?;
    if let Some(report) = run.final_eval {
        println!(
            "final: PSNR {:.4} dB, SSIM {:.6}, LR SSIM {:.6}",
            report.psnr_db, report.ssim, report.mean_lr_ssim
        );
    }
    log::info!("wrote {}", out.join("final.ckpt").display());
    Ok(())
}

fn cmd_downscale(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    save_z: Option<&Path>,
    no_quantize: bool,
    seed: u64,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let img = load_png(input)?;
    let img = crop_for_scale(&img, model.config().scale, &input.display().to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = downscale_image(&model, &img, &mut rng)?;
    save_png(out, &lr.image)?;
    if let Some(path) = save_z {
        LatentFile {
            z: lr.z,
            exact_lr: no_quantize.then_some(lr.exact),
        }
        .save(path)?;
    }
    Ok(())
}

fn cmd_upscale(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    zhat: Option<Mode>,
    zblob: Option<&Path>,
    seed: u64,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let cfg = *model.config();
    let lr = load_png(input)?;
    let hr_shape = Shape::new(1, 3, lr.height() * cfg.scale, lr.width() * cfg.scale)?;
    let (_, _, z_shape) = model.latent_shapes(hr_shape)?;
    let mut lr_tensor: Tensor<f32> = lr.to_tensor();
    let z = match zblob {
        Some(path) => {
            let file = LatentFile::load(path)?;
            if file.z.shape() != z_shape {
                bail!(
                    "{}: latent has shape {}, but a {}x{} LR image needs {}",
                    path.display(),
                    file.z.shape(),
                    lr.width(),
                    lr.height(),
                    z_shape
                );
            }
            if let Some(exact) = file.exact_lr {
                ensure!(
                    exact.shape() == lr_tensor.shape(),
                    "{}: stored LR has shape {}, input has {}",
                    path.display(),
                    exact.shape(),
                    lr_tensor.shape()
                );
                log::info!("using the unrounded LR stored in {}", path.display());
                lr_tensor = exact;
            }
            file.z
        }
        None => {
            let mode = zhat.map(LatentMode::from).unwrap_or(cfg.latent.zhat_mode);
            sample_latent(mode, z_shape, &mut ChaCha8Rng::seed_from_u64(seed))
        }
    };
    save_png(out, &upscale_tensor(&model, &lr_tensor, &z)?)?;
    Ok(())
}

fn cmd_roundtrip(
    ckpt: &Path,
    input: &Path,
    report: Option<&Path>,
    z_source: ZSource,
    no_quantize: bool,
    seed: u64,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let scale = model.config().scale;
    let corpus = load_images(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(corpus.len());
    for (name, img) in corpus.names.iter().zip(&corpus.images) {
        let img = crop_for_scale(img, scale, name)?;
        let lr = downscale_image(&model, &img, &mut rng)?;
        let y = if no_quantize { lr.exact } else { lr.image.to_tensor() };
        let z = match z_source {
            ZSource::True => lr.z,
            ZSource::Zero => sample_latent(LatentMode::Zero, lr.z.shape(), &mut rng),
            ZSource::Gaussian => sample_latent(LatentMode::Gaussian, lr.z.shape(), &mut rng),
        };
        let xhat = upscale_tensor(&model, &y, &z)?;
        rows.push((name.clone(), evaluate_pair(&img, &xhat, scale)?));
    }
    write_report(report, &rows)
}

fn cmd_ablate(args: &ConfigArgs, out: &Path, grid: Grid) -> Result<()> {
    let base = args.resolve()?;
    let train_dir = base.train_dir.as_deref().context("ablation needs --train-dir")?;
    let eval_dir = base.eval_dir.as_deref().context("ablation needs --eval-dir")?;
    let train_set = load_images(train_dir)?;
    let eval_set = load_images(eval_dir)?;
    let entries = match grid {
        Grid::Table1 => table1_grid(),
        Grid::Baseline => baseline_grid(),
        Grid::All => baseline_grid().into_iter().chain(table1_grid()).collect(),
    };
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    std::fs::write(out.join("config.toml"), base.to_toml()?)?;
    let rows = ablate(&base, &entries, &train_set, &eval_set, Some(out))?;
    write_ablation_csv(&mut std::io::stdout().lock(), &rows)?;
    Ok(())
}

fn cmd_metrics(reference: &Path, test: &Path, border: usize, report: Option<&Path>) -> Result<()> {
    let refs = load_images(reference)?;
    let tests = load_images(test)?;
    let single = !reference.is_dir() && !test.is_dir();
    let mut rows = Vec::with_capacity(refs.len());
    for (name, img) in refs.names.iter().zip(&refs.images) {
        let other = if single {
            &tests.images[0]
        } else {
            let i = tests
                .names
                .iter()
                .position(|n| n == name)
                .with_context(|| format!("{name} has no counterpart in {}", test.display()))?;
            &tests.images[i]
        };
        rows.push((name.clone(), evaluate_pair(img, other, border)?));
    }
    write_report(report, &rows)
}

fn cmd_gradcheck(perturb: f64, seed: u64) -> Result<ExitCode> {
    let opts = GradCheckOptions {
        perturb,
        seed,
        ..GradCheckOptions::default()
    };
    let results = check_all(&opts)?;
    let mut out = std::io::stdout().lock();
    let mut failed = 0;
    for r in &results {
        let kind = match r.kind {
            CheckKind::Primitive => "primitive",
            CheckKind::Composite => "composite",
        };
        let verdict = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        writeln!(
            out,
            "{verdict} {kind:<9} {:<18} max_rel_err {:.3e} (tol {:.0e})",
            r.name, r.max_rel_error, r.tolerance
        )?;
    }
    writeln!(out, "{} checks, {failed} failed", results.len())?;
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        let img = synth::natural_image(&mut rng, size, size)?;
        save_png(out.join(format!("img{i:03}.png")), &img)?;
    }
    Ok(())
}
