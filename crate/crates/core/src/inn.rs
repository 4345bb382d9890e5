//! The invertible rescaling network.
//!
//! The HR image `x` (3 channels) is concatenated with the downscaling latent
//! `w` (`C_w` channels). Each of the `log2(s)` stages applies one Haar level to
//! the whole tensor and then `K` coupling blocks that split it into a 3-channel
//! low-frequency branch and a mixture branch holding everything else. After
//! the last stage the low-frequency branch is the LR image `y` and the mixture
//! branch is the upscaling latent `z`.
//!
//! The Haar transform is orthonormal, so with identity couplings `y` equals
//! `2^n` times the `s x s` mean-pooled image; [`RescaleModel::lf_gain`]
//! reports that factor.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, ParamId, ParamStore};
use crate::tensor::{Element, Shape, Tensor};

pub const LEAKY_SLOPE: f64 = 0.2;

/// How a latent is drawn: constant zero or i.i.d. standard normal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentMode {
    Zero,
    Gaussian,
}

impl std::str::FromStr for LatentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" | "0" => Ok(LatentMode::Zero),
            "gaussian" | "normal" | "n" => Ok(LatentMode::Gaussian),
            other => Err(Error::Config(format!(
                "unknown latent mode {other:?} (expected zero or gaussian)"
            ))),
        }
    }
}

impl std::fmt::Display for LatentMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LatentMode::Zero => "zero",
            LatentMode::Gaussian => "gaussian",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentSpec {
    /// Channels of `w` per HR pixel; 0 is the single-latent baseline.
    pub c_w: usize,
    pub w_mode: LatentMode,
    pub zhat_mode: LatentMode,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale: usize,
    /// Coupling blocks per stage.
    pub blocks: usize,
    /// Dense block growth channels.
    pub growth: usize,
    /// Clamp on the affine log-scale.
    pub clamp: f64,
    pub latent: LatentSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            scale: 2,
            blocks: 8,
            growth: 16,
            clamp: 1.0,
            latent: LatentSpec {
                c_w: 2,
                w_mode: LatentMode::Gaussian,
                zhat_mode: LatentMode::Zero,
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 4) {
            return Err(Error::Config(format!("scale must be 2 or 4, got {}", self.scale)));
        }
        if self.blocks == 0 || self.growth == 0 {
            return Err(Error::Config("blocks and growth must be positive".into()));
        }
        if !(self.clamp >= 0.0 && self.clamp.is_finite()) {
            return Err(Error::Config(format!(
                "clamp must be finite and >= 0, got {}",
                self.clamp
            )));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.scale.trailing_zeros() as usize
    }

    /// Channels of `z`: `(3 + C_w) s^2 - 3`.
    pub fn z_channels(&self) -> usize {
        (3 + self.latent.c_w) * self.scale * self.scale - 3
    }

    pub fn lf_gain(&self) -> f64 {
        (1u64 << self.stages()) as f64
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
}

impl ConvLayer {
    fn forward<T: Element, G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, x: &G::Var) -> Result<G::Var> {
        let w = g.param(params.get(self.weight));
        let b = g.param(params.get(self.bias));
        g.conv2d(x, &w, &b, 1)
    }
}

/// Five 3x3 convolutions with dense skip connections. The last layer starts
/// at exactly zero, so a fresh block outputs zero for any input.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    layers: [ConvLayer; 5],
    out_channels: usize,
}

impl DenseBlock {
    fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        growth: usize,
    ) -> Self {
        let layers = std::array::from_fn(|i| {
            let fan_in_ch = in_channels + i * growth;
            let out = if i == 4 { out_channels } else { growth };
            let shape = Shape::new(out, fan_in_ch, 3, 3).expect("positive extents");
            let weight = if i == 4 {
                Tensor::zeros(shape)
            } else {
                // Kaiming-uniform for a leaky ReLU of slope 0.2.
                let fan_in = (fan_in_ch * 9) as f64;
                let bound = (6.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
            };
            let bias = Tensor::zeros(Shape::new(out, 1, 1, 1).expect("positive extents"));
            ConvLayer {
                weight: params.register(format!("{name}.conv{}.weight", i + 1), weight),
                bias: params.register(format!("{name}.conv{}.bias", i + 1), bias),
            }
        });
        DenseBlock { layers, out_channels }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward<T: Element, G: Graph<T>>(&self, g: &mut G, params: &ParamStore<T>, x: &G::Var) -> Result<G::Var> {
        let mut features = vec![x.clone()];
        for layer in &self.layers[..4] {
            let input = if features.len() == 1 {
                features[0].clone()
            } else {
                let refs: Vec<&G::Var> = features.iter().collect();
                g.concat(&refs)?
            };
            let h = layer.forward(g, params, &input)?;
            features.push(g.leaky_relu(&h, LEAKY_SLOPE)?);
        }
        let refs: Vec<&G::Var> = features.iter().collect();
        let input = g.concat(&refs)?;
        self.layers[4].forward(g, params, &input)
    }

    fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|l| [l.weight, l.bias])
    }
}

/// Additive coupling on the low-frequency branch followed by clamped affine
/// coupling on the mixture branch:
///
/// ```text
/// h1' = h1 + phi(h2)
/// h2' = h2 * exp(clamp * (2 sigmoid(rho(h1')) - 1)) + eta(h1')
/// ```
#[derive(Clone, Debug)]
pub struct InvBlock {
    phi: DenseBlock,
    rho: DenseBlock,
    eta: DenseBlock,
    clamp: f64,
    mixture_channels: usize,
}

impl InvBlock {
    pub const LF_CHANNELS: usize = 3;

    fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        mixture_channels: usize,
        growth: usize,
        clamp: f64,
    ) -> Self {
        let lf = Self::LF_CHANNELS;
        InvBlock {
            phi: DenseBlock::new(params, rng, &format!("{name}.phi"), mixture_channels, lf, growth),
            rho: DenseBlock::new(params, rng, &format!("{name}.rho"), lf, mixture_channels, growth),
            eta: DenseBlock::new(params, rng, &format!("{name}.eta"), lf, mixture_channels, growth),
            clamp,
            mixture_channels,
        }
    }

    pub fn mixture_channels(&self) -> usize {
        self.mixture_channels
    }

    /// `sign * clamp * (2 sigmoid(rho(h1)) - 1)`, bounded by `clamp` in magnitude.
    fn log_scale<T: Element, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParamStore<T>,
        h1: &G::Var,
        sign: f64,
    ) -> Result<G::Var> {
        let r = self.rho.forward(g, params, h1)?;
        let s = g.sigmoid(&r)?;
        let s = g.scale(&s, 2.0)?;
        let s = g.shift(&s, -1.0)?;
        g.scale(&s, sign * self.clamp)
    }

    pub fn forward<T: Element, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParamStore<T>,
        h1: &G::Var,
        h2: &G::Var,
    ) -> Result<(G::Var, G::Var)> {
        let f = self.phi.forward(g, params, h2)?;
        let h1 = g.add(h1, &f)?;
        let log_s = self.log_scale(g, params, &h1, 1.0)?;
        let s = g.exp(&log_s)?;
        let scaled = g.mul(h2, &s)?;
        let t = self.eta.forward(g, params, &h1)?;
        let h2 = g.add(&scaled, &t)?;
        Ok((h1, h2))
    }

    pub fn inverse<T: Element, G: Graph<T>>(
        &self,
        g: &mut G,
        params: &ParamStore<T>,
        h1: &G::Var,
        h2: &G::Var,
    ) -> Result<(G::Var, G::Var)> {
        let t = self.eta.forward(g, params, h1)?;
        let shifted = g.sub(h2, &t)?;
        let neg_log_s = self.log_scale(g, params, h1, -1.0)?;
        let inv_s = g.exp(&neg_log_s)?;
        let h2 = g.mul(&shifted, &inv_s)?;
        let f = self.phi.forward(g, params, &h2)?;
        let h1 = g.sub(h1, &f)?;
        Ok((h1, h2))
    }

    /// Elementwise scale `s` the forward pass applies to the mixture branch.
    pub fn coupling_scale<T: Element>(&self, params: &ParamStore<T>, h1_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Eager;
        let log_s = self.log_scale(&mut g, params, h1_out, 1.0)?;
        g.exp(&log_s)
    }

    fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.phi
            .param_ids()
            .chain(self.rho.param_ids())
            .chain(self.eta.param_ids())
    }

    fn final_layer_ids(&self) -> [ParamId; 6] {
        [
            self.phi.layers[4].weight,
            self.phi.layers[4].bias,
            self.rho.layers[4].weight,
            self.rho.layers[4].bias,
            self.eta.layers[4].weight,
            self.eta.layers[4].bias,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct RescaleModel<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    stages: Vec<Vec<InvBlock>>,
}

impl<T: Element> RescaleModel<T> {
    /// Builds a model with random interior layers and zeroed final layers, so
    /// the fresh network is exactly the `n`-fold Haar analysis.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut stages = Vec::new();
        let mut channels = 3 + config.latent.c_w;
        for stage in 0..config.stages() {
            channels *= 4;
            let blocks = (0..config.blocks)
                .map(|b| {
                    InvBlock::new(
                        &mut params,
                        rng,
                        &format!("stage{stage}.block{b}"),
                        channels - InvBlock::LF_CHANNELS,
                        config.growth,
                        config.clamp,
                    )
                })
                .collect();
            stages.push(blocks);
        }
        Ok(RescaleModel { config, params, stages })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn blocks(&self) -> impl Iterator<Item = &InvBlock> {
        self.stages.iter().flatten()
    }

    pub fn lf_gain(&self) -> f64 {
        self.config.lf_gain()
    }

    pub fn z_channels(&self) -> usize {
        self.config.z_channels()
    }

    /// Shapes of `w`, `y` and `z` for an HR input of the given shape.
    pub fn latent_shapes(&self, x: Shape) -> Result<(Option<Shape>, Shape, Shape)> {
        let s = self.config.scale;
        if x.channels() != 3 {
            return Err(Error::shape("model_forward x", "3 channels", x));
        }
        if !x.height().is_multiple_of(s) || !x.width().is_multiple_of(s) {
            return Err(Error::shape(
                "model_forward x",
                format!("height and width divisible by {s}"),
                x,
            ));
        }
        let w = match self.config.latent.c_w {
            0 => None,
            c => Some(x.with_channels(c)?),
        };
        let y = Shape::new(x.batch(), 3, x.height() / s, x.width() / s)?;
        let z = y.with_channels(self.z_channels())?;
        Ok((w, y, z))
    }

    /// `y, z = f(x, w)`. `w` must be `None` exactly when `C_w = 0`.
    pub fn forward<G: Graph<T>>(&self, g: &mut G, x: &G::Var, w: Option<&G::Var>) -> Result<(G::Var, G::Var)> {
        let (w_shape, _, _) = self.latent_shapes(g.value(x).shape())?;
        let mut cur = match (w, w_shape) {
            (None, None) => x.clone(),
            (Some(w), Some(expected)) => {
                g.value(w).expect_shape("model_forward w", expected)?;
                g.concat(&[x, w])?
            }
            (None, Some(expected)) => {
                return Err(Error::Invalid(format!("model_forward: missing w of shape {expected}")))
            }
            (Some(w), None) => return Err(Error::shape("model_forward w", "no w for C_w = 0", g.value(w).shape())),
        };
        let mut out = None;
        for stage in &self.stages {
            if let Some((h1, h2)) = out.take() {
                cur = g.concat(&[&h1, &h2])?;
            }
            cur = g.haar_forward(&cur)?;
            let c = g.value(&cur).shape().channels();
            let mut h1 = g.split(&cur, 0, InvBlock::LF_CHANNELS)?;
            let mut h2 = g.split(&cur, InvBlock::LF_CHANNELS, c - InvBlock::LF_CHANNELS)?;
            for block in stage {
                (h1, h2) = block.forward(g, &self.params, &h1, &h2)?;
            }
            out = Some((h1, h2));
        }
        out.ok_or_else(|| Error::Invalid("model has no stages".into()))
    }

    /// `x_hat, w_hat = f^-1(y, z)`; `w_hat` is `None` when `C_w = 0`.
    pub fn inverse<G: Graph<T>>(&self, g: &mut G, y: &G::Var, z: &G::Var) -> Result<(G::Var, Option<G::Var>)> {
        let ys = g.value(y).shape();
        if ys.channels() != 3 {
            return Err(Error::shape("model_inverse y", "3 channels", ys));
        }
        g.value(z)
            .expect_shape("model_inverse z", ys.with_channels(self.z_channels())?)?;
        let (mut h1, mut h2) = (y.clone(), z.clone());
        let mut cur = None;
        for stage in self.stages.iter().rev() {
            if let Some(c) = cur.take() {
                let ch = g.value(&c).shape().channels();
                h1 = g.split(&c, 0, InvBlock::LF_CHANNELS)?;
                h2 = g.split(&c, InvBlock::LF_CHANNELS, ch - InvBlock::LF_CHANNELS)?;
            }
            for block in stage.iter().rev() {
                (h1, h2) = block.inverse(g, &self.params, &h1, &h2)?;
            }
            let joined = g.concat(&[&h1, &h2])?;
            cur = Some(g.haar_inverse(&joined)?);
        }
        let full = cur.ok_or_else(|| Error::Invalid("model has no stages".into()))?;
        let x = g.split(&full, 0, 3)?;
        let w = match self.config.latent.c_w {
            0 => None,
            c => Some(g.split(&full, 3, c)?),
        };
        Ok((x, w))
    }

    pub fn downscale(&self, x: &Tensor<T>, w: Option<&Tensor<T>>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.forward(&mut Eager, x, w)
    }

    pub fn upscale(&self, y: &Tensor<T>, z: &Tensor<T>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.inverse(&mut Eager, y, z)
    }

    /// Redraws every weight, final layers included, from `N(0, std^2)`.
    /// Used to exercise the network away from its identity initialization.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R, std: f64) {
        for p in self.params.iter_mut() {
            p.value = Tensor::from_fn(p.value.shape(), |_| {
                let v: f64 = StandardNormal.sample(rng);
                T::from_f64(std * v)
            });
        }
    }

    /// True when every coupling output layer is exactly zero.
    pub fn is_identity_coupled(&self) -> bool {
        self.blocks()
            .flat_map(InvBlock::final_layer_ids)
            .all(|id| self.params.get(id).value.data().iter().all(|&v| v == T::zero()))
    }

    pub fn cast<U: Element>(&self) -> RescaleModel<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.register(p.name.clone(), p.value.cast());
        }
        RescaleModel {
            config: self.config,
            params,
            stages: self.stages.clone(),
        }
    }

    /// Parameter ids in registration order, grouped per coupling block.
    pub fn block_param_ids(&self) -> Vec<Vec<ParamId>> {
        self.blocks().map(|b| b.param_ids().collect()).collect()
    }
}

/// Draws a latent tensor: zeros, or i.i.d. standard normal values from `rng`.
pub fn sample_latent<T: Element, R: Rng + ?Sized>(mode: LatentMode, shape: Shape, rng: &mut R) -> Tensor<T> {
    match mode {
        LatentMode::Zero => Tensor::zeros(shape),
        LatentMode::Gaussian => Tensor::from_fn(shape, |_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64(v)
        }),
    }
}
