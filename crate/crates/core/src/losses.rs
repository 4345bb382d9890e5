//! Training objective.
//!
//! `L = λ1 L_r + λ2 L_g + λ3 L_d + λ4 L_i` with
//!
//! * `L_r`: mean absolute error between the reconstruction and the HR input,
//! * `L_g`: mean squared error between the LR output and the bicubic reference,
//! * `L_d`: mean of `z^2` (negative log-density of a standard normal up to
//!   constants),
//! * `L_i`: RMS over pixels of the per-pixel sample standard deviation of the
//!   LR output across `m` draws of `w`.
//!
//! LR quantities are compared in display units, i.e. after dividing the
//! network output by the Haar low-frequency gain `2^n`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::bicubic_downsample_tensor;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::inn::{sample_latent, LatentMode, RescaleModel};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub recon: f64,
    pub guide: f64,
    pub dist: f64,
    pub inv: f64,
    /// Number of `w` draws `m` for the invariance term.
    pub samples: usize,
    /// Round the LR output to 8 bits (straight-through) before upscaling.
    pub quantize: bool,
}

impl LossWeights {
    /// `λ1 = 1`, `λ2 = s^2`, `λ3 = 0.01`, `λ4 = s^2 / 4`, `m = 3`.
    pub fn defaults(scale: usize) -> Self {
        let s2 = (scale * scale) as f64;
        LossWeights {
            recon: 1.0,
            guide: s2,
            dist: 0.01,
            inv: invariance_weight(scale),
            samples: 3,
            quantize: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("guide", self.guide),
            ("dist", self.dist),
            ("inv", self.inv),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.samples < 2 {
            return Err(Error::Config(format!(
                "invariance needs m >= 2 samples, got {}",
                self.samples
            )));
        }
        Ok(())
    }
}

/// `λ4 = s^2 / 4`.
pub fn invariance_weight(scale: usize) -> f64 {
    (scale * scale) as f64 / 4.0
}

fn numel<T: Element, G: Graph<T>>(g: &G, v: &G::Var) -> f64 {
    g.value(v).len() as f64
}

pub fn recon_loss<T: Element, G: Graph<T>>(g: &mut G, xhat: &G::Var, x: &G::Var) -> Result<G::Var> {
    let d = g.sub(xhat, x)?;
    let a = g.abs(&d)?;
    g.mean(&a)
}

pub fn guidance_loss<T: Element, G: Graph<T>>(g: &mut G, y: &G::Var, ybar: &G::Var) -> Result<G::Var> {
    let d = g.sub(y, ybar)?;
    let n = numel(g, &d);
    let s = g.sumsq(&d)?;
    g.scale(&s, 1.0 / n)
}

pub fn distribution_loss<T: Element, G: Graph<T>>(g: &mut G, z: &G::Var) -> Result<G::Var> {
    let n = numel(g, z);
    let s = g.sumsq(z)?;
    g.scale(&s, 1.0 / n)
}

/// `sqrt(mean_pixels(sum_j (y_j - mean_j y_j)^2 / (m - 1)))`
pub fn invariance_loss<T: Element, G: Graph<T>>(g: &mut G, samples: &[G::Var]) -> Result<G::Var> {
    let m = samples.len();
    if m < 2 {
        return Err(Error::Invalid(format!(
            "invariance_loss needs at least 2 samples, got {m}"
        )));
    }
    let mut total = samples[0].clone();
    for s in &samples[1..] {
        total = g.add(&total, s)?;
    }
    let mean = g.scale(&total, 1.0 / m as f64)?;
    let mut sq = None;
    for s in samples {
        let d = g.sub(s, &mean)?;
        let e = g.sumsq(&d)?;
        sq = Some(match sq {
            None => e,
            Some(acc) => g.add(&acc, &e)?,
        });
    }
    let n = numel(g, &samples[0]);
    let sq = sq.expect("m >= 2");
    let var = g.scale(&sq, 1.0 / ((m - 1) as f64 * n))?;
    g.sqrt(&var)
}

/// Raw component values alongside the weighted total.
#[derive(Clone, Debug)]
pub struct LossBreakdown<V> {
    pub total: V,
    pub recon: f64,
    pub guide: f64,
    pub dist: f64,
    pub inv: f64,
}

impl<V> LossBreakdown<V> {
    pub fn components(&self) -> [f64; 4] {
        [self.recon, self.guide, self.dist, self.inv]
    }
}

/// Number of forward passes `total_loss` makes per evaluation.
pub fn effective_samples<T: Element>(model: &RescaleModel<T>, weights: &LossWeights) -> usize {
    let latent = model.config().latent;
    if latent.c_w > 0 && latent.w_mode == LatentMode::Gaussian && weights.inv > 0.0 {
        weights.samples
    } else {
        1
    }
}

/// Evaluates the full objective on an HR batch `x`.
///
/// Draws the `w_j` (per the model's `w_mode`) and then `z_hat` (per
/// `zhat_mode`) from `rng`, in that order. `L_g` and `L_d` use the first
/// forward pass; `L_i` spans all of them; the reconstruction starts from the
/// first LR output (optionally quantized) and `z_hat`.
pub fn total_loss<T, G, R>(
    model: &RescaleModel<T>,
    g: &mut G,
    x: &Tensor<T>,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<LossBreakdown<G::Var>>
where
    T: Element,
    G: Graph<T>,
    R: Rng + ?Sized,
{
    let cfg = *model.config();
    let (w_shape, _, z_shape) = model.latent_shapes(x.shape())?;
    let gain = cfg.lf_gain();
    let ybar = bicubic_downsample_tensor(x, cfg.scale)?;

    let xv = g.constant(x.clone());
    let ybar = g.constant(ybar);
    let m = effective_samples(model, weights);
    let mut lr = Vec::with_capacity(m);
    let mut first_z = None;
    for _ in 0..m {
        let w = w_shape.map(|s| g.constant(sample_latent(cfg.latent.w_mode, s, rng)));
        let (y, z) = model.forward(g, &xv, w.as_ref())?;
        lr.push(g.scale(&y, 1.0 / gain)?);
        first_z.get_or_insert(z);
    }
    let z = first_z.expect("at least one sample");
    let zhat = g.constant(sample_latent(cfg.latent.zhat_mode, z_shape, rng));

    let l_g = guidance_loss(g, &lr[0], &ybar)?;
    let l_d = distribution_loss(g, &z)?;
    let l_i = if m >= 2 { Some(invariance_loss(g, &lr)?) } else { None };

    let y_in = if weights.quantize {
        g.quantize_ste(&lr[0])?
    } else {
        lr[0].clone()
    };
    let y_in = g.scale(&y_in, gain)?;
    let (xhat, _) = model.inverse(g, &y_in, &zhat)?;
    let l_r = recon_loss(g, &xhat, &xv)?;

    let scalar = |g: &G, v: &G::Var| -> Result<f64> { Ok(g.value(v).item()?.to_f64()) };
    let mut terms = vec![(weights.recon, &l_r), (weights.guide, &l_g), (weights.dist, &l_d)];
    if let Some(li) = &l_i {
        terms.push((weights.inv, li));
    }
    let mut total = None;
    for (lambda, term) in terms {
        let weighted = g.scale(term, lambda)?;
        total = Some(match total {
            None => weighted,
            Some(acc) => g.add(&acc, &weighted)?,
        });
    }
    Ok(LossBreakdown {
        recon: scalar(g, &l_r)?,
        guide: scalar(g, &l_g)?,
        dist: scalar(g, &l_d)?,
        inv: match &l_i {
            Some(v) => scalar(g, v)?,
            None => 0.0,
        },
        total: total.expect("three terms"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Eager, Tape};
    use crate::inn::{LatentSpec, ModelConfig};
    use crate::tensor::Shape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(values: &[f64]) -> Tensor<f64> {
        Tensor::new(Shape::new(1, 1, 1, values.len()).unwrap(), values.to_vec()).unwrap()
    }

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(Shape::from_dims(shape).unwrap(), |_| rng.random_range(-1.0..1.0))
    }

    fn eval(v: Tensor<f64>) -> f64 {
        v.item().unwrap()
    }

    #[test]
    fn recon_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 3, 4, 4], &mut rng);
        assert_eq!(eval(recon_loss(&mut Eager, &x, &x).unwrap()), 0.0);
        let shifted = x.map(|v| v + 0.5);
        assert!((eval(recon_loss(&mut Eager, &shifted, &x).unwrap()) - 0.5).abs() < 1e-15);
        let y = random([2, 3, 4, 4], &mut rng);
        let want = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        assert!((eval(recon_loss(&mut Eager, &x, &y).unwrap()) - want).abs() <= 1e-12);
        assert!(recon_loss(&mut Eager, &x, &random([1, 3, 4, 4], &mut rng)).is_err());
    }

    #[test]
    fn guidance_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random([1, 3, 5, 5], &mut rng);
        assert_eq!(eval(guidance_loss(&mut Eager, &y, &y).unwrap()), 0.0);
        let off = y.map(|v| v + 0.1);
        assert!((eval(guidance_loss(&mut Eager, &off, &y).unwrap()) - 0.01).abs() < 1e-12);
        let b = random([1, 3, 5, 5], &mut rng);
        let want = y.data().iter().zip(b.data()).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / y.len() as f64;
        assert!((eval(guidance_loss(&mut Eager, &y, &b).unwrap()) - want).abs() <= 1e-12);
    }

    #[test]
    fn distribution_values() {
        let zero = Tensor::<f64>::zeros(Shape::new(1, 2, 3, 3).unwrap());
        assert_eq!(eval(distribution_loss(&mut Eager, &zero).unwrap()), 0.0);
        let two = zero.map(|_| 2.0);
        assert_eq!(eval(distribution_loss(&mut Eager, &two).unwrap()), 4.0);
        let z: Tensor<f64> = sample_latent(
            LatentMode::Gaussian,
            Shape::new(1, 1, 1000, 1000).unwrap(),
            &mut ChaCha8Rng::seed_from_u64(3),
        );
        assert!((eval(distribution_loss(&mut Eager, &z).unwrap()) - 1.0).abs() <= 0.01);
    }

    #[test]
    fn invariance_values() {
        let a = t(&[0.0]);
        let b = t(&[2.0]);
        let li = eval(invariance_loss(&mut Eager, &[a.clone(), b]).unwrap());
        assert!((li - 2f64.sqrt()).abs() <= 1e-12);
        assert_eq!(
            eval(invariance_loss(&mut Eager, &[a.clone(), a.clone(), a.clone()]).unwrap()),
            0.0
        );
        assert!(invariance_loss::<f64, _>(&mut Eager, &[a]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ys: Vec<Tensor<f64>> = (0..3).map(|_| random([1, 3, 4, 4], &mut rng)).collect();
        // Scalar loop: per-element unbiased variance, averaged, square-rooted.
        let n = ys[0].len();
        let mut acc = 0.0;
        for i in 0..n {
            let mean = ys.iter().map(|y| y.data()[i]).sum::<f64>() / 3.0;
            acc += ys.iter().map(|y| (y.data()[i] - mean).powi(2)).sum::<f64>() / 2.0;
        }
        let want = (acc / n as f64).sqrt();
        let got = eval(invariance_loss(&mut Eager, &ys).unwrap());
        assert!((got - want).abs() <= 1e-12);
        let permuted = vec![ys[2].clone(), ys[0].clone(), ys[1].clone()];
        assert!((eval(invariance_loss(&mut Eager, &permuted).unwrap()) - got).abs() <= 1e-12);
    }

    #[test]
    fn defaults() {
        let w = LossWeights::defaults(4);
        assert_eq!(w.inv, 4.0);
        assert_eq!(w.guide, 16.0);
        assert_eq!(invariance_weight(2), 1.0);
        assert_eq!(w.samples, 3);
        assert!(LossWeights { samples: 1, ..w }.validate().is_err());
        assert!(LossWeights { dist: -1.0, ..w }.validate().is_err());
    }

    fn tiny(c_w: usize, w_mode: LatentMode, zhat_mode: LatentMode) -> RescaleModel<f64> {
        let cfg = ModelConfig {
            scale: 2,
            blocks: 1,
            growth: 4,
            clamp: 1.0,
            latent: LatentSpec { c_w, w_mode, zhat_mode },
        };
        let mut m = RescaleModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        m.randomize(&mut ChaCha8Rng::seed_from_u64(6), 0.05);
        m
    }

    fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(1, 3, 8, 8).unwrap(), |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn all_zero_weights_give_zero() {
        let model = tiny(2, LatentMode::Gaussian, LatentMode::Gaussian);
        let x = image(&mut ChaCha8Rng::seed_from_u64(7));
        let w = LossWeights {
            recon: 0.0,
            guide: 0.0,
            dist: 0.0,
            inv: 0.0,
            samples: 3,
            quantize: true,
        };
        let out = total_loss(&model, &mut Eager, &x, &w, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        assert_eq!(out.total.item().unwrap(), 0.0);
    }

    #[test]
    fn baseline_reduces_to_three_terms() {
        let model = tiny(0, LatentMode::Zero, LatentMode::Zero);
        let x = image(&mut ChaCha8Rng::seed_from_u64(9));
        let w = LossWeights {
            inv: 0.0,
            ..LossWeights::defaults(2)
        };
        assert_eq!(effective_samples(&model, &w), 1);
        let out = total_loss(&model, &mut Eager, &x, &w, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        assert_eq!(out.inv, 0.0);
        let want = w.recon * out.recon + w.guide * out.guide + w.dist * out.dist;
        assert!((out.total.item().unwrap() - want).abs() <= 1e-15);
    }

    #[test]
    fn lambda_scaling_is_linear() {
        let model = tiny(2, LatentMode::Gaussian, LatentMode::Zero);
        let x = image(&mut ChaCha8Rng::seed_from_u64(11));
        let base = LossWeights::defaults(2);
        let run = |w: &LossWeights| {
            total_loss(&model, &mut Eager, &x, w, &mut ChaCha8Rng::seed_from_u64(12))
                .unwrap()
                .total
                .item()
                .unwrap()
        };
        let ref_total = run(&base);
        let out = total_loss(&model, &mut Eager, &x, &base, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
        assert!(out.inv > 0.0);
        let comps = out.components();
        let lambdas = [base.recon, base.guide, base.dist, base.inv];
        for k in 0..4 {
            let mut w = base;
            let c = 3.0;
            match k {
                0 => w.recon *= c,
                1 => w.guide *= c,
                2 => w.dist *= c,
                _ => w.inv *= c,
            }
            let delta = run(&w) - ref_total;
            let want = (c - 1.0) * lambdas[k] * comps[k];
            assert!(
                (delta - want).abs() <= 1e-12 * ref_total.max(1.0),
                "term {k}: {delta} vs {want}"
            );
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let model = tiny(2, LatentMode::Gaussian, LatentMode::Gaussian);
        let x = image(&mut ChaCha8Rng::seed_from_u64(13));
        let w = LossWeights::defaults(2);
        let run = || {
            let mut tape = Tape::new();
            let out = total_loss(&model, &mut tape, &x, &w, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
            let grads = tape.backward(out.total).unwrap();
            let mut store = model.params().clone();
            store.zero_grad();
            grads.accumulate_into(&mut store).unwrap();
            (
                tape.value(&out.total).item().unwrap(),
                store.iter().map(|p| p.grad.clone()).collect::<Vec<_>>(),
            )
        };
        let (a, ga) = run();
        let (b, gb) = run();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(ga, gb);
    }
}
