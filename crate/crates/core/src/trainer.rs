//! Training loop, optimizer, evaluation, ablation grid and the latent
//! sensitivity probe.
//!
//! Randomness comes from independent ChaCha8 streams of one seed: model
//! initialization, patch sampling, training latents and evaluation latents.
//! Keeping patch sampling on its own stream means every variant of an
//! ablation sees the same crops in the same order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{bicubic_downsample, random_crop_batch, Corpus, ImageRGB};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Tape};
use crate::inn::{sample_latent, LatentMode, LatentSpec, ModelConfig, RescaleModel};
use crate::losses::{invariance_weight, total_loss, LossWeights};
use crate::metrics::{evaluate_pair, mean_report, MetricReport};
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

const STREAM_INIT: u64 = 0;
const STREAM_DATA: u64 = 1;
const STREAM_LATENT: u64 = 2;
const STREAM_EVAL: u64 = 3;

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `base * 2^-floor(iter / period)`.
pub fn lr_at(iter: usize, base: f64, period: usize) -> f64 {
    let halvings = (iter / period.max(1)).min(1074) as i32;
    base * 2f64.powi(-halvings)
}

/// Everything a training run depends on besides the images themselves.
///
/// Optional fields mean "derive from the scale": `patch` is 64 at `s = 2`
/// and 96 at `s = 4`, `lambda_guide` is `s^2`, `lambda_inv` is `s^2 / 4`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub scale: usize,
    pub c_w: usize,
    pub w_mode: LatentMode,
    pub zhat_mode: LatentMode,
    pub blocks: usize,
    pub growth: usize,
    pub clamp: f64,
    pub batch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    pub iterations: usize,
    pub lr: f64,
    pub halving_period: usize,
    pub lambda_recon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_guide: Option<f64>,
    pub lambda_dist: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_inv: Option<f64>,
    pub samples: usize,
    pub quantize: bool,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_dir: Option<PathBuf>,
    /// Evaluate every this many iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Write a checkpoint every this many iterations; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainConfig {
            scale: model.scale,
            c_w: model.latent.c_w,
            w_mode: model.latent.w_mode,
            zhat_mode: model.latent.zhat_mode,
            blocks: model.blocks,
            growth: model.growth,
            clamp: model.clamp,
            batch: 4,
            patch: None,
            iterations: 5000,
            lr: 2e-4,
            halving_period: 1000,
            lambda_recon: 1.0,
            lambda_guide: None,
            lambda_dist: 0.01,
            lambda_inv: None,
            samples: 3,
            quantize: true,
            seed: 0,
            train_dir: None,
            eval_dir: None,
            eval_every: 500,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    /// Every key the config file accepts, in declaration order.
    pub const KEYS: [&'static str; 23] = [
        "scale",
        "c_w",
        "w_mode",
        "zhat_mode",
        "blocks",
        "growth",
        "clamp",
        "batch",
        "patch",
        "iterations",
        "lr",
        "halving_period",
        "lambda_recon",
        "lambda_guide",
        "lambda_dist",
        "lambda_inv",
        "samples",
        "quantize",
        "seed",
        "train_dir",
        "eval_dir",
        "eval_every",
        "checkpoint_every",
    ];

    pub fn from_toml(text: &str) -> Result<TrainConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            scale: self.scale,
            blocks: self.blocks,
            growth: self.growth,
            clamp: self.clamp,
            latent: LatentSpec {
                c_w: self.c_w,
                w_mode: self.w_mode,
                zhat_mode: self.zhat_mode,
            },
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch.unwrap_or(if self.scale >= 4 { 96 } else { 64 })
    }

    pub fn loss_weights(&self) -> LossWeights {
        let s2 = (self.scale * self.scale) as f64;
        LossWeights {
            recon: self.lambda_recon,
            guide: self.lambda_guide.unwrap_or(s2),
            dist: self.lambda_dist,
            inv: self.lambda_inv.unwrap_or_else(|| invariance_weight(self.scale)),
            samples: self.samples,
            quantize: self.quantize,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        if self.halving_period == 0 {
            return Err(Error::Config("halving_period must be positive".into()));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        let p = self.patch_size();
        if p == 0 || !p.is_multiple_of(self.scale) {
            return Err(Error::Config(format!(
                "patch {p} must be a positive multiple of scale {}",
                self.scale
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Adam moments and step count, one moment tensor per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update from the gradients held in `params`.
/// Arithmetic is carried out in `f64` and rounded back to `T`.
pub fn adam_step<T: Element>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Invalid(format!(
            "optimizer holds {} moments for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let shape = p.value.shape();
        if m.shape() != shape || v.shape() != shape || p.grad.shape() != shape {
            return Err(Error::shape(
                "adam_step",
                format!("moments shaped like {}", p.name),
                m.shape(),
            ));
        }
        let n = shape.numel();
        let (mut pv, mut mv, mut vv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
        for i in 0..n {
            let g = p.grad.data()[i].to_f64();
            let mi = ADAM_BETA1 * m.data()[i].to_f64() + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v.data()[i].to_f64() + (1.0 - ADAM_BETA2) * g * g;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            pv.push(T::from_f64(p.value.data()[i].to_f64() - update));
            mv.push(T::from_f64(mi));
            vv.push(T::from_f64(vi));
        }
        p.value = Tensor::new(shape, pv)?;
        *m = Tensor::new(shape, mv)?;
        *v = Tensor::new(shape, vv)?;
    }
    Ok(())
}

/// Seed and positions of the two training streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub data_word_pos: u128,
    pub latent_word_pos: u128,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    /// Iterations completed, counting this one.
    pub iteration: usize,
    pub lr: f64,
    /// `[L_r, L_g, L_d, L_i]`, unweighted.
    pub components: [f64; 4],
    pub total: f64,
    pub grad_norm: f64,
}

pub const TRAIN_LOG_HEADER: &str = "iter,lr,L_r,L_g,L_d,L_i,total";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let [r, g, d, i] = self.components;
        format!("{},{},{},{},{},{},{}", self.iteration, self.lr, r, g, d, i, self.total)
    }
}

/// The optimization state of a run in progress.
#[derive(Clone, Debug)]
pub struct Trainer {
    config: TrainConfig,
    weights: LossWeights,
    model: RescaleModel<f32>,
    optimizer: AdamState<f32>,
    iteration: usize,
    data_rng: ChaCha8Rng,
    latent_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let model = RescaleModel::new(config.model_config(), &mut stream_rng(config.seed, STREAM_INIT))?;
        let optimizer = AdamState::new(model.params());
        Ok(Trainer {
            weights: config.loss_weights(),
            data_rng: stream_rng(config.seed, STREAM_DATA),
            latent_rng: stream_rng(config.seed, STREAM_LATENT),
            config,
            model,
            optimizer,
            iteration: 0,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ckpt: &Checkpoint) -> Result<Trainer> {
        let missing = |what: &str| Error::Checkpoint(format!("checkpoint has no {what}; it cannot resume training"));
        let config = ckpt.train.clone().ok_or_else(|| missing("training config"))?;
        let rng = ckpt.rng.ok_or_else(|| missing("rng state"))?;
        let optimizer = ckpt.optimizer.clone().ok_or_else(|| missing("optimizer state"))?;
        config.validate()?;
        if config.model_config() != ckpt.model {
            return Err(Error::Checkpoint(
                "training config disagrees with the stored architecture".into(),
            ));
        }
        let model = ckpt.to_model()?;
        let mut data_rng = stream_rng(rng.seed, STREAM_DATA);
        data_rng.set_word_pos(rng.data_word_pos);
        let mut latent_rng = stream_rng(rng.seed, STREAM_LATENT);
        latent_rng.set_word_pos(rng.latent_word_pos);
        Ok(Trainer {
            weights: config.loss_weights(),
            config,
            model,
            optimizer,
            iteration: ckpt.iteration,
            data_rng,
            latent_rng,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &RescaleModel<f32> {
        &self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One optimization step on a freshly sampled batch.
    pub fn step(&mut self, corpus: &[ImageRGB]) -> Result<StepLog> {
        let lr = lr_at(self.iteration, self.config.lr, self.config.halving_period);
        let batch = random_crop_batch::<f32, _>(
            corpus,
            self.config.batch,
            self.config.patch_size(),
            self.config.scale,
            &mut self.data_rng,
        )?;
        let mut tape = Tape::new();
        let loss = total_loss(
            &self.model,
            &mut tape,
            &batch.patches,
            &self.weights,
            &mut self.latent_rng,
        )?;
        let total = tape.value(&loss.total).item()?.to_f64();
        let grads = tape.backward(loss.total)?;
        drop(tape);
        let params = self.model.params_mut();
        params.zero_grad();
        grads.accumulate_into(params)?;
        let grad_norm = params.grad_norm();
        let components = loss.components();
        if !total.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration + 1,
                diagnostic: self.diagnostic(total, components),
            });
        }
        adam_step(params, &mut self.optimizer, lr)?;
        self.iteration += 1;
        Ok(StepLog {
            iteration: self.iteration,
            lr,
            components,
            total,
            grad_norm,
        })
    }

    fn diagnostic(&self, total: f64, c: [f64; 4]) -> String {
        let mut out = format!(
            "total={total} L_r={} L_g={} L_d={} L_i={}\ngradient norms:",
            c[0], c[1], c[2], c[3]
        );
        for p in self.model.params().iter() {
            let norm = p
                .grad
                .data()
                .iter()
                .map(|v| v.to_f64() * v.to_f64())
                .sum::<f64>()
                .sqrt();
            let _ = write!(out, "\n  {} {norm}", p.name);
        }
        out
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.config.seed,
            data_word_pos: self.data_rng.get_word_pos(),
            latent_word_pos: self.latent_rng.get_word_pos(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        ckpt.iteration = self.iteration;
        ckpt.train = Some(self.config.clone());
        ckpt.rng = Some(self.rng_state());
        ckpt.optimizer = Some(self.optimizer.clone());
        ckpt
    }

    /// Evaluates the current model with the run's seed.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<EvalReport> {
        evaluate(&self.model, corpus, self.config.seed)
    }
}

/// Per-image and mean results of an evaluation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Reconstruction `x_hat` vs `x`, Y channel, border crop `s`.
    pub images: Vec<(String, MetricReport)>,
    /// Learned LR `y` vs bicubic `y_bar`, Y channel SSIM.
    pub lr_ssim: Vec<(String, f64)>,
    pub psnr_db: f64,
    pub ssim: f64,
    pub mean_lr_ssim: f64,
}

pub const EVAL_LOG_HEADER: &str = "iter,psnr_db,ssim,lr_ssim";

/// Downscale, round the LR image to 8 bits, upscale with `z_hat` per the
/// model's `zhat_mode`, then score against the input.
///
/// Latents come from a stream seeded by `seed` and reset on each call, so
/// repeated evaluations of the same model agree exactly. Images are center
/// cropped to a multiple of the scale.
pub fn evaluate(model: &RescaleModel<f32>, corpus: &Corpus, seed: u64) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let cfg = *model.config();
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let mut images = Vec::with_capacity(corpus.len());
    let mut lr_ssim = Vec::with_capacity(corpus.len());
    for (name, img) in corpus.names.iter().zip(&corpus.images) {
        let img = img.center_crop_to_multiple(cfg.scale)?;
        let lr = downscale_image(model, &img, &mut rng)?;
        let ybar = bicubic_downsample(&img, cfg.scale)?;
        lr_ssim.push((name.clone(), evaluate_pair(&ybar, &lr.image, 0)?.ssim));
        let zhat = sample_latent(cfg.latent.zhat_mode, lr.z.shape(), &mut rng);
        let xhat = upscale_image(model, &lr.image, &zhat)?;
        images.push((name.clone(), evaluate_pair(&img, &xhat, cfg.scale)?));
    }
    let mean = mean_report(&images).expect("non-empty");
    let mut sorted: Vec<&(String, f64)> = lr_ssim.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mean_lr_ssim = sorted.iter().map(|r| r.1).sum::<f64>() / sorted.len() as f64;
    Ok(EvalReport {
        images,
        lr_ssim,
        psnr_db: mean.psnr_db,
        ssim: mean.ssim,
        mean_lr_ssim,
    })
}

/// Output of [`downscale_image`].
#[derive(Clone, Debug)]
pub struct LowRes {
    /// Display-range LR image, quantized to 8 bits.
    pub image: ImageRGB,
    /// The same LR before quantization, still in display units.
    pub exact: Tensor<f32>,
    pub z: Tensor<f32>,
}

/// Runs the forward model on one image, drawing `w` from `rng` per the
/// model's `w_mode`. Dimensions must already be multiples of the scale.
pub fn downscale_image<R: Rng + ?Sized>(model: &RescaleModel<f32>, img: &ImageRGB, rng: &mut R) -> Result<LowRes> {
    let cfg = model.config();
    let x = img.to_tensor::<f32>();
    let (w_shape, _, _) = model.latent_shapes(x.shape())?;
    let w = w_shape.map(|s| sample_latent(cfg.latent.w_mode, s, rng));
    let (y, z) = model.downscale(&x, w.as_ref())?;
    let inv_gain = (1.0 / cfg.lf_gain()) as f32;
    let exact = y.map(|v| v * inv_gain);
    Ok(LowRes {
        image: ImageRGB::from_tensor(&exact, 0)?.quantized(),
        exact,
        z,
    })
}

/// Inverts from a display-range LR image and a latent `z_hat`, returning the
/// HR reconstruction clipped and rounded to 8 bits.
pub fn upscale_image(model: &RescaleModel<f32>, lr: &ImageRGB, zhat: &Tensor<f32>) -> Result<ImageRGB> {
    upscale_tensor(model, &lr.to_tensor::<f32>(), zhat)
}

pub fn upscale_tensor(model: &RescaleModel<f32>, lr: &Tensor<f32>, zhat: &Tensor<f32>) -> Result<ImageRGB> {
    let gain = model.lf_gain() as f32;
    let (xhat, _) = model.upscale(&lr.map(|v| v * gain), zhat)?;
    Ok(ImageRGB::from_tensor(&xhat, 0)?.quantized())
}

/// Everything a finished run produced.
#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    /// Periodic evaluations, keyed by iteration.
    pub evals: Vec<(usize, EvalReport)>,
    /// Evaluation of the final model, when an eval set was given.
    pub final_eval: Option<EvalReport>,
}

/// Writes the training log CSV.
pub fn write_train_log(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut text = String::from(TRAIN_LOG_HEADER);
    text.push('\n');
    for row in log {
        text.push_str(&row.csv_row());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_eval_log(path: &Path, evals: &[(usize, EvalReport)]) -> Result<()> {
    let mut text = String::from(EVAL_LOG_HEADER);
    text.push('\n');
    for (iter, r) in evals {
        let _ = writeln!(
            text,
            "{iter},{},{},{}",
            r.psnr_db.min(crate::metrics::PSNR_CAP_DB),
            r.ssim,
            r.mean_lr_ssim
        );
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Runs `trainer` until `config.iterations` and returns the logs.
///
/// With `out_dir`, writes `train_log.csv`, `eval_log.csv`, periodic
/// `ckpt_<iter>.ckpt` files and `final.ckpt`.
pub fn run(mut trainer: Trainer, train: &Corpus, eval: Option<&Corpus>, out_dir: Option<&Path>) -> Result<TrainRun> {
    if train.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let cfg = trainer.config().clone();
    let mut log = Vec::with_capacity(cfg.iterations.saturating_sub(trainer.iteration()));
    let mut evals = Vec::new();
    while trainer.iteration() < cfg.iterations {
        let row = trainer.step(&train.images)?;
        log::debug!("{}", row.csv_row());
        let it = row.iteration;
        log.push(row);
        if let Some(eval) = eval {
            if cfg.eval_every > 0 && it % cfg.eval_every == 0 && it < cfg.iterations {
                let report = trainer.evaluate(eval)?;
                log::info!("iter {it}: eval PSNR {:.3} dB, SSIM {:.4}", report.psnr_db, report.ssim);
                evals.push((it, report));
            }
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0 && it < cfg.iterations {
                trainer.checkpoint().save(dir.join(format!("ckpt_{it:07}.ckpt")))?;
            }
        }
        if it % 100 == 0 {
            log::info!("iter {it}: loss {:.6} lr {:e}", row.total, row.lr);
        }
    }
    let final_eval = match eval {
        Some(eval) => {
            let report = trainer.evaluate(eval)?;
            evals.push((trainer.iteration(), report.clone()));
            Some(report)
        }
        None => None,
    };
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save(dir.join("final.ckpt"))?;
        write_train_log(&dir.join("train_log.csv"), &log)?;
        write_eval_log(&dir.join("eval_log.csv"), &evals)?;
    }
    Ok(TrainRun {
        checkpoint,
        log,
        evals,
        final_eval,
    })
}

/// Trains from scratch under `config`.
pub fn train(config: &TrainConfig, train: &Corpus, eval: Option<&Corpus>, out_dir: Option<&Path>) -> Result<TrainRun> {
    run(Trainer::new(config.clone())?, train, eval, out_dir)
}

/// One ablation setting: the only knobs a grid may turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub label: String,
    pub c_w: usize,
    pub w_mode: LatentMode,
    pub zhat_mode: LatentMode,
    /// Whether the LR-invariance term is on.
    pub invariance: bool,
}

impl GridEntry {
    pub fn new(c_w: usize, w_mode: LatentMode, zhat_mode: LatentMode, invariance: bool) -> GridEntry {
        let sym = |m: LatentMode| if m == LatentMode::Zero { "0" } else { "N" };
        let mut label = format!("Cw{c_w}_z{}", sym(zhat_mode));
        if c_w > 0 {
            let _ = write!(label, "_w{}", sym(w_mode));
        }
        if invariance {
            label.push_str("_Li");
        }
        GridEntry {
            label,
            c_w,
            w_mode,
            zhat_mode,
            invariance,
        }
    }

    /// `base` with this entry's settings applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.c_w = self.c_w;
        cfg.w_mode = self.w_mode;
        cfg.zhat_mode = self.zhat_mode;
        cfg.lambda_inv = if self.invariance {
            base.lambda_inv.filter(|&v| v > 0.0)
        } else {
            Some(0.0)
        };
        cfg
    }
}

/// The seven settings of the ablation table, in its row order.
pub fn table1_grid() -> Vec<GridEntry> {
    use LatentMode::{Gaussian as N, Zero as Z};
    vec![
        GridEntry::new(2, N, N, false),
        GridEntry::new(2, Z, N, false),
        GridEntry::new(2, Z, Z, false),
        GridEntry::new(1, N, Z, false),
        GridEntry::new(2, N, Z, false),
        GridEntry::new(3, N, Z, false),
        GridEntry::new(2, N, Z, true),
    ]
}

/// The single-latent baselines with both `z_hat` modes.
pub fn baseline_grid() -> Vec<GridEntry> {
    vec![
        GridEntry::new(0, LatentMode::Zero, LatentMode::Gaussian, false),
        GridEntry::new(0, LatentMode::Zero, LatentMode::Zero, false),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub entry: GridEntry,
    pub config: TrainConfig,
    pub run: TrainRun,
}

impl AblationRow {
    pub fn eval(&self) -> &EvalReport {
        self.run.final_eval.as_ref().expect("ablation runs always evaluate")
    }
}

/// Trains every grid entry from the same seed and data order and evaluates
/// each on `eval`. With `out_dir`, each variant writes into a subdirectory
/// named by its label and `ablation.csv` collects the table.
pub fn ablate(
    base: &TrainConfig,
    grid: &[GridEntry],
    train: &Corpus,
    eval: &Corpus,
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(grid.len());
    for entry in grid {
        let config = entry.apply(base);
        log::info!("ablation variant {}", entry.label);
        let dir = out_dir.map(|d| d.join(&entry.label));
        let run = self::train(&config, train, Some(eval), dir.as_deref())?;
        rows.push(AblationRow {
            entry: entry.clone(),
            config,
            run,
        });
    }
    if let Some(dir) = out_dir {
        let path = dir.join("ablation.csv");
        let mut file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_ablation_csv(&mut file, &rows).map_err(|e| Error::io(&path, e))?;
    }
    Ok(rows)
}

pub fn write_ablation_csv<W: std::io::Write>(out: &mut W, rows: &[AblationRow]) -> std::io::Result<()> {
    writeln!(out, "label,c_w,zhat,w,L_i,psnr_db,ssim,lr_ssim")?;
    for row in rows {
        let e = &row.entry;
        let r = row.eval();
        writeln!(
            out,
            "{},{},{},{},{},{:.4},{:.6},{:.6}",
            e.label,
            e.c_w,
            e.zhat_mode,
            e.w_mode,
            e.invariance,
            r.psnr_db.min(crate::metrics::PSNR_CAP_DB),
            r.ssim,
            r.mean_lr_ssim
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    /// Max-abs distance for each pair `(i, j)`, `i < j`, in row-major order.
    pub distances: Vec<f64>,
    pub min: f64,
    pub max: f64,
}

/// Upscales `y` from `k` latents `z_i = z_0 + i * delta * u`, where `z_0` is
/// drawn per the model's `zhat_mode` and `u` is a random unit direction, and
/// measures how far apart the reconstructions land.
pub fn sensitivity_probe<T: Element, R: Rng + ?Sized>(
    model: &RescaleModel<T>,
    y: &Tensor<T>,
    k: usize,
    delta: f64,
    rng: &mut R,
) -> Result<ProbeReport> {
    if k < 2 {
        return Err(Error::Invalid(format!("sensitivity probe needs k >= 2, got {k}")));
    }
    let z_shape = y.shape().with_channels(model.z_channels())?;
    let base: Tensor<f64> = sample_latent::<f64, _>(model.config().latent.zhat_mode, z_shape, rng);
    let dir: Vec<f64> = (0..z_shape.numel()).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    let outputs = (0..k)
        .map(|i| {
            let step = i as f64 * delta / norm;
            let z = Tensor::from_fn(z_shape, |j| T::from_f64(base.data()[j] + step * dir[j]));
            Ok(model.upscale(y, &z)?.0)
        })
        .collect::<Result<Vec<Tensor<T>>>>()?;
    let mut distances = Vec::with_capacity(k * (k - 1) / 2);
    for i in 0..k {
        for j in i + 1..k {
            distances.push(outputs[i].max_abs_diff(&outputs[j])?);
        }
    }
    let min = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let max = distances.iter().copied().fold(0.0, f64::max);
    Ok(ProbeReport { distances, min, max })
}
