//! Training flags and their merge with a config file.
//!
//! Every key of [`TrainConfig`] has a flag of the same name with dashes. A
//! flag that is given overrides the file, and the file overrides the
//! built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rescale_core::trainer::TrainConfig;
use toml::{Table, Value};

/// A number, or `auto` to derive it from the scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Auto<T> {
    Auto,
    Value(T),
}

impl<T: std::str::FromStr> std::str::FromStr for Auto<T> {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.eq_ignore_ascii_case("auto") {
            return Ok(Auto::Auto);
        }
        s.parse()
            .map(Auto::Value)
            .map_err(|_| format!("expected a number or `auto`, got {s:?}"))
    }
}

// Defaults in the help text are checked against `TrainConfig::default()` by
// the CLI tests.
#[derive(Args, Clone, Debug, Default)]
pub struct ConfigArgs {
    /// TOML file with any subset of the keys below
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Upscaling factor, 2 or 4 [default: 2]
    #[arg(long)]
    pub scale: Option<usize>,
    /// Downscaling latent channels per HR pixel; 0 disables w [default: 2]
    #[arg(long)]
    pub c_w: Option<usize>,
    /// Distribution of w: zero or gaussian [default: gaussian]
    #[arg(long, value_name = "MODE")]
    pub w_mode: Option<String>,
    /// Distribution of the upscaling latent: zero or gaussian [default: zero]
    #[arg(long, value_name = "MODE")]
    pub zhat_mode: Option<String>,
    /// Coupling blocks per scale stage [default: 8]
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Dense block growth channels [default: 16]
    #[arg(long)]
    pub growth: Option<usize>,
    /// Bound on the coupling log-scale [default: 1]
    #[arg(long)]
    pub clamp: Option<f64>,
    /// Patches per step [default: 4]
    #[arg(long)]
    pub batch: Option<usize>,
    /// HR patch side; auto is 64 at scale 2 and 96 at scale 4 [default: auto]
    #[arg(long, value_name = "N|auto")]
    pub patch: Option<Auto<usize>>,
    /// Training steps [default: 5000]
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Initial Adam learning rate [default: 0.0002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Halve the learning rate every this many steps [default: 1000]
    #[arg(long)]
    pub halving_period: Option<usize>,
    /// Reconstruction loss weight [default: 1]
    #[arg(long)]
    pub lambda_recon: Option<f64>,
    /// Guidance loss weight; auto is scale^2 [default: auto]
    #[arg(long, value_name = "X|auto")]
    pub lambda_guide: Option<Auto<f64>>,
    /// Latent distribution loss weight [default: 0.01]
    #[arg(long)]
    pub lambda_dist: Option<f64>,
    /// LR invariance loss weight; auto is scale^2/4, 0 disables it [default: auto]
    #[arg(long, value_name = "X|auto")]
    pub lambda_inv: Option<Auto<f64>>,
    /// Draws of w for the invariance loss [default: 3]
    #[arg(long)]
    pub samples: Option<usize>,
    /// Round the LR to 8 bits during training [default: true]
    #[arg(long, value_name = "BOOL")]
    pub quantize: Option<bool>,
    /// Seed for initialization, data order and latents [default: 0]
    #[arg(long, env = "RESCALE_SEED")]
    pub seed: Option<u64>,
    /// Directory of training PNGs [default: none]
    #[arg(long, value_name = "DIR")]
    pub train_dir: Option<PathBuf>,
    /// Directory of held-out PNGs [default: none]
    #[arg(long, value_name = "DIR")]
    pub eval_dir: Option<PathBuf>,
    /// Evaluate every this many steps, 0 for only at the end [default: 500]
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Checkpoint every this many steps, 0 for only the final one [default: 1000]
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn path(p: &Path) -> Result<Value> {
    Ok(Value::String(
        p.to_str()
            .with_context(|| format!("path {} is not valid UTF-8", p.display()))?
            .to_owned(),
    ))
}

fn set_auto<T>(table: &mut Table, key: &str, v: Option<Auto<T>>, to_value: impl Fn(T) -> Value) {
    match v {
        None => {}
        Some(Auto::Auto) => {
            table.remove(key);
        }
        Some(Auto::Value(v)) => {
            table.insert(key.into(), to_value(v));
        }
    }
}

impl ConfigArgs {
    /// Defaults, then the config file, then the flags.
    pub fn resolve(&self) -> Result<TrainConfig> {
        let mut table = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing {}", p.display()))?
            }
            None => Table::new(),
        };
        let mut set = |key: &str, v: Option<Value>| {
            if let Some(v) = v {
                table.insert(key.into(), v);
            }
        };
        set("scale", self.scale.map(int));
        set("c_w", self.c_w.map(int));
        set("w_mode", self.w_mode.clone().map(Value::String));
        set("zhat_mode", self.zhat_mode.clone().map(Value::String));
        set("blocks", self.blocks.map(int));
        set("growth", self.growth.map(int));
        set("clamp", self.clamp.map(Value::Float));
        set("batch", self.batch.map(int));
        set("iterations", self.iterations.map(int));
        set("lr", self.lr.map(Value::Float));
        set("halving_period", self.halving_period.map(int));
        set("lambda_recon", self.lambda_recon.map(Value::Float));
        set("lambda_dist", self.lambda_dist.map(Value::Float));
        set("samples", self.samples.map(int));
        set("quantize", self.quantize.map(Value::Boolean));
        set("train_dir", self.train_dir.as_deref().map(path).transpose()?);
        set("eval_dir", self.eval_dir.as_deref().map(path).transpose()?);
        set("eval_every", self.eval_every.map(int));
        set("checkpoint_every", self.checkpoint_every.map(int));
        if let Some(seed) = self.seed {
            // TOML integers are signed; the config parser maps them back.
            if seed > i64::MAX as u64 {
                bail!("--seed {seed} is larger than {}", i64::MAX);
            }
            table.insert("seed".into(), Value::Integer(seed as i64));
        }
        set_auto(&mut table, "patch", self.patch, int);
        set_auto(&mut table, "lambda_guide", self.lambda_guide, Value::Float);
        set_auto(&mut table, "lambda_inv", self.lambda_inv, Value::Float);

        let text = toml::to_string(&table)?;
        let config = TrainConfig::from_toml(&text)?;
        config.validate()?;
        Ok(config)
    }
}
