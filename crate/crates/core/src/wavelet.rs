//! Orthonormal 2-D Haar analysis and synthesis.
//!
//! One level maps `[B, C, H, W]` to `[B, 4C, H/2, W/2]` with the subbands
//! grouped as `[LL | LH | HL | HH]`, each group holding all `C` input
//! channels. For a 2x2 block `[[a, b], [c, d]]`:
//!
//! ```text
//! LL = (a + b + c + d) / 2    LH = (a - b + c - d) / 2
//! HL = (a + b - c - d) / 2    HH = (a - b - c + d) / 2
//! ```
//!
//! The map is orthonormal, so the inverse is its transpose and it is also the
//! vector-Jacobian product of the forward transform.

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

pub fn haar_forward<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [b_n, c_n, h, w] = x.shape().dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("haar_forward", "even height and width", x.shape()));
    }
    let (ho, wo) = (h / 2, w / 2);
    let out_shape = Shape::new(b_n, 4 * c_n, ho, wo)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let half = T::from_f64(0.5);
    let band = c_n * ho * wo;
    for b in 0..b_n {
        let base_out = b * 4 * band;
        for c in 0..c_n {
            let src = x.plane(b, c);
            let dst = base_out + c * ho * wo;
            for y in 0..ho {
                let top = &src[2 * y * w..][..w];
                let bot = &src[(2 * y + 1) * w..][..w];
                for xo in 0..wo {
                    let (a, bb) = (top[2 * xo], top[2 * xo + 1]);
                    let (cc, d) = (bot[2 * xo], bot[2 * xo + 1]);
                    let i = dst + y * wo + xo;
                    out[i] = half * ((a + bb) + (cc + d));
                    out[i + band] = half * ((a - bb) + (cc - d));
                    out[i + 2 * band] = half * ((a + bb) - (cc + d));
                    out[i + 3 * band] = half * ((a - bb) - (cc - d));
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn haar_inverse<T: Element>(coeffs: &Tensor<T>) -> Result<Tensor<T>> {
    let [b_n, c4, ho, wo] = coeffs.shape().dims();
    if c4 % 4 != 0 {
        return Err(Error::shape(
            "haar_inverse",
            "channel count divisible by 4",
            coeffs.shape(),
        ));
    }
    let c_n = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let out_shape = Shape::new(b_n, c_n, h, w)?;
    let mut out = vec![T::zero(); out_shape.numel()];
    let half = T::from_f64(0.5);
    let band = c_n * ho * wo;
    let src = coeffs.data();
    for b in 0..b_n {
        let base_in = b * 4 * band;
        for c in 0..c_n {
            let dst = &mut out[(b * c_n + c) * h * w..][..h * w];
            let from = base_in + c * ho * wo;
            for y in 0..ho {
                for xo in 0..wo {
                    let i = from + y * wo + xo;
                    let (ll, lh, hl, hh) = (src[i], src[i + band], src[i + 2 * band], src[i + 3 * band]);
                    dst[2 * y * w + 2 * xo] = half * ((ll + lh) + (hl + hh));
                    dst[2 * y * w + 2 * xo + 1] = half * ((ll - lh) + (hl - hh));
                    dst[(2 * y + 1) * w + 2 * xo] = half * ((ll + lh) - (hl + hh));
                    dst[(2 * y + 1) * w + 2 * xo + 1] = half * ((ll - lh) - (hl - hh));
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{reduce, Reduce};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::from_dims(shape).unwrap(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_block() {
        let x = Tensor::new(Shape::new(1, 1, 2, 2).unwrap(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let c = haar_forward(&x).unwrap();
        assert_eq!(c.data(), &[5.0, -1.0, -2.0, 0.0]);
        assert_eq!(haar_inverse(&c).unwrap(), x);
    }

    #[test]
    fn constant_image_has_only_low_band() {
        let x = Tensor::full(Shape::new(2, 3, 6, 4).unwrap(), 0.25f64);
        let c = haar_forward(&x).unwrap();
        assert_eq!(c.shape(), Shape::new(2, 12, 3, 2).unwrap());
        for b in 0..2 {
            for ch in 0..12 {
                let want = if ch < 3 { 0.5 } else { 0.0 };
                assert!(c.plane(b, ch).iter().all(|&v| v == want));
            }
        }
    }

    #[test]
    fn zero_coefficients_give_zero_image() {
        let c = Tensor::<f64>::zeros(Shape::new(1, 8, 3, 3).unwrap());
        let x = haar_inverse(&c).unwrap();
        assert_eq!(x.shape(), Shape::new(1, 2, 6, 6).unwrap());
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_extents() {
        assert!(haar_forward(&random([1, 1, 3, 4], 0)).is_err());
        assert!(haar_forward(&random([1, 1, 4, 5], 0)).is_err());
        assert!(haar_inverse(&random([1, 6, 2, 2], 0)).is_err());
    }

    #[test]
    fn energy_preserved() {
        let x = random([1, 3, 8, 8], 7);
        let c = haar_forward(&x).unwrap();
        let (ex, ec) = (reduce(Reduce::SumSq, &x), reduce(Reduce::SumSq, &c));
        assert!((ex - ec).abs() <= 1e-12);
    }

    #[test]
    fn f32_round_trip() {
        let x: Tensor<f32> = random([2, 3, 16, 12], 8).cast();
        let back = haar_inverse(&haar_forward(&x).unwrap()).unwrap();
        assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
    }

    proptest! {
        #[test]
        fn perfect_reconstruction_both_ways(seed in any::<u64>(), b in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
            let x = random([b, c, 2 * h, 2 * w], seed);
            let fwd_inv = haar_inverse(&haar_forward(&x).unwrap()).unwrap();
            prop_assert!(fwd_inv.max_abs_diff(&x).unwrap() <= 1e-12);
            let k = random([b, 4 * c, h, w], seed ^ 1);
            let inv_fwd = haar_forward(&haar_inverse(&k).unwrap()).unwrap();
            prop_assert!(inv_fwd.max_abs_diff(&k).unwrap() <= 1e-12);
        }

        #[test]
        fn inner_products_preserved(seed in any::<u64>()) {
            let u = random([1, 2, 6, 8], seed);
            let v = random([1, 2, 6, 8], seed.wrapping_add(1));
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
            let (hu, hv) = (haar_forward(&u).unwrap(), haar_forward(&v).unwrap());
            prop_assert!((dot(&hu, &hv) - dot(&u, &v)).abs() <= 1e-12);
        }
    }
}
