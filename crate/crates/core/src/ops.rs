//! The closed primitive set: forward kernels and their vector-Jacobian products.
//!
//! Every differentiable computation in the crate is a composition of [`Op`]s.
//! [`Op::forward`] is shared by eager evaluation and the gradient tape, so a
//! recorded graph and an eager run execute identical arithmetic.

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, pairwise_sum, Element, Shape, Tensor};
use crate::wavelet;

/// Elementwise primitives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Exp,
    Sigmoid,
    LeakyRelu(f64),
    Scale(f64),
    /// Adds a constant.
    Shift(f64),
    Abs,
    Sqrt,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }

    pub fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Exp => "exp",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::LeakyRelu(_) => "leaky_relu",
            Elementwise::Scale(_) => "scale",
            Elementwise::Shift(_) => "shift",
            Elementwise::Abs => "abs",
            Elementwise::Sqrt => "sqrt",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    SumSq,
}

/// A primitive application recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Op {
    /// Inputs: input, kernel `[outC, inC, k, k]`, bias `[outC, 1, 1, 1]`.
    Conv2d {
        pad: usize,
    },
    Elementwise(Elementwise),
    Reduce(Reduce),
    /// Channel concatenation of all inputs.
    Concat,
    /// Channel slice `[start, start + len)`.
    Split {
        start: usize,
        len: usize,
    },
    HaarForward,
    HaarInverse,
    /// 8-bit rounding with a straight-through gradient inside `[0, 1]`.
    QuantizeSte,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Conv2d { .. } => "conv2d",
            Op::Elementwise(e) => e.name(),
            Op::Reduce(Reduce::Sum) => "sum",
            Op::Reduce(Reduce::Mean) => "mean",
            Op::Reduce(Reduce::SumSq) => "sumsq",
            Op::Concat => "concat",
            Op::Split { .. } => "split",
            Op::HaarForward => "haar_forward",
            Op::HaarInverse => "haar_inverse",
            Op::QuantizeSte => "quantize_ste",
        }
    }

    pub fn forward<T: Element>(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let arity = |n: usize| -> Result<()> {
            if inputs.len() != n {
                return Err(Error::Invalid(format!(
                    "{} expects {n} inputs, got {}",
                    self.name(),
                    inputs.len()
                )));
            }
            Ok(())
        };
        match *self {
            Op::Conv2d { pad } => {
                arity(3)?;
                conv2d(inputs[0], inputs[1], inputs[2], pad)
            }
            Op::Elementwise(kind) => {
                if kind.is_binary() {
                    arity(2)?;
                    elementwise(kind, inputs[0], Some(inputs[1]))
                } else {
                    arity(1)?;
                    elementwise(kind, inputs[0], None)
                }
            }
            Op::Reduce(kind) => {
                arity(1)?;
                Ok(Tensor::scalar(reduce(kind, inputs[0])))
            }
            Op::Concat => concat_channels(inputs),
            Op::Split { start, len } => {
                arity(1)?;
                split_channels(inputs[0], start, len)
            }
            Op::HaarForward => {
                arity(1)?;
                wavelet::haar_forward(inputs[0])
            }
            Op::HaarInverse => {
                arity(1)?;
                wavelet::haar_inverse(inputs[0])
            }
            Op::QuantizeSte => {
                arity(1)?;
                Ok(quantize(inputs[0]))
            }
        }
    }

    /// Vector-Jacobian product: gradients with respect to each input given the
    /// upstream gradient of the output.
    pub fn backward<T: Element>(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Tensor<T>>> {
        Ok(match *self {
            Op::Conv2d { pad } => {
                let (x, k) = (inputs[0], inputs[1]);
                vec![
                    conv2d_backward_input(grad, k, x.shape(), pad)?,
                    conv2d_backward_kernel(grad, x, k.shape(), pad)?,
                    conv2d_backward_bias(grad)?,
                ]
            }
            Op::Elementwise(kind) => elementwise_backward(kind, inputs, output, grad)?,
            Op::Reduce(kind) => {
                let g = grad.item()?;
                let x = inputs[0];
                let d = match kind {
                    Reduce::Sum => Tensor::full(x.shape(), g),
                    Reduce::Mean => Tensor::full(x.shape(), g / T::from_f64(x.len() as f64)),
                    Reduce::SumSq => {
                        let two_g = T::from_f64(2.0) * g;
                        x.map(|v| two_g * v)
                    }
                };
                vec![d]
            }
            Op::Concat => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(inputs.len());
                for input in inputs {
                    let len = input.shape().channels();
                    grads.push(split_channels(grad, start, len)?);
                    start += len;
                }
                grads
            }
            Op::Split { start, len } => vec![embed_channels(grad, inputs[0].shape(), start, len)?],
            Op::HaarForward => vec![wavelet::haar_inverse(grad)?],
            Op::HaarInverse => vec![wavelet::haar_forward(grad)?],
            Op::QuantizeSte => {
                let x = inputs[0];
                vec![grad.zip_map(x, "quantize_ste", |g, v| {
                    if v >= T::zero() && v <= T::one() {
                        g
                    } else {
                        T::zero()
                    }
                })?]
            }
        })
    }
}

/// Cross-correlation with zero padding. `pad` must equal `(k - 1) / 2`, so the
/// spatial size is preserved; `k` is 1 or 3.
pub fn conv2d<T: Element>(input: &Tensor<T>, kernel: &Tensor<T>, bias: &Tensor<T>, pad: usize) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input.shape(), kernel.shape(), pad)?;
    let expected_bias = Shape::new(geom.out_ch, 1, 1, 1)?;
    bias.expect_shape("conv2d bias", expected_bias)?;

    let padded = geom.pad_input(input);
    let (b_n, out_ch, in_ch) = (geom.batch, geom.out_ch, geom.in_ch);
    let k = geom.k;
    let span = geom.span();
    let (h, w, wp) = (geom.h, geom.w, geom.wp);
    let kdata = kernel.data();
    let mut out = vec![T::zero(); b_n * out_ch * h * w];
    let mut acc = vec![T::zero(); span];
    for b in 0..b_n {
        for oc in 0..out_ch {
            acc.fill(bias.data()[oc]);
            for ic in 0..in_ch {
                let src = geom.padded_plane(&padded, b, ic);
                let taps = &kdata[(oc * in_ch + ic) * k * k..][..k * k];
                if k == 3 {
                    accumulate_3x3(&mut acc, taps, src, wp);
                } else {
                    axpy(&mut acc, taps[0], &src[..span]);
                }
            }
            let dst = &mut out[(b * out_ch + oc) * h * w..][..h * w];
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&acc[y * wp..y * wp + w]);
            }
        }
    }
    Ok(Tensor::from_parts(Shape::new(b_n, out_ch, h, w)?, out))
}

/// Gradient with respect to the input. A same-size convolution's adjoint is
/// the same-size convolution with the kernel flipped spatially and its
/// channel axes swapped.
pub(crate) fn conv2d_backward_input<T: Element>(
    grad: &Tensor<T>,
    kernel: &Tensor<T>,
    input_shape: Shape,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input_shape, kernel.shape(), pad)?;
    grad.expect_shape("conv2d grad", geom.out_shape()?)?;
    let (out_ch, in_ch, k) = (geom.out_ch, geom.in_ch, geom.k);
    let kdata = kernel.data();
    let mut flipped = Vec::with_capacity(kdata.len());
    for ic in 0..in_ch {
        for oc in 0..out_ch {
            let taps = &kdata[(oc * in_ch + ic) * k * k..][..k * k];
            flipped.extend(taps.iter().rev());
        }
    }
    let flipped = Tensor::from_parts(Shape::new(in_ch, out_ch, k, k)?, flipped);
    let zero_bias = Tensor::zeros(Shape::new(in_ch, 1, 1, 1)?);
    conv2d(grad, &flipped, &zero_bias, pad)
}

pub(crate) fn conv2d_backward_kernel<T: Element>(
    grad: &Tensor<T>,
    input: &Tensor<T>,
    kernel_shape: Shape,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeometry::new(input.shape(), kernel_shape, pad)?;
    grad.expect_shape("conv2d grad", geom.out_shape()?)?;
    let (b_n, out_ch, in_ch, k) = (geom.batch, geom.out_ch, geom.in_ch, geom.k);
    let wp = geom.wp;
    let span = geom.span();
    let padded = geom.pad_input(input);
    let mut gk = vec![T::zero(); kernel_shape.numel()];
    let mut gp = vec![T::zero(); span];
    for b in 0..b_n {
        for oc in 0..out_ch {
            geom.spread_grad(grad.plane(b, oc), &mut gp);
            for ic in 0..in_ch {
                let src = geom.padded_plane(&padded, b, ic);
                let taps = &mut gk[(oc * in_ch + ic) * k * k..][..k * k];
                if k == 3 {
                    for (t, d) in taps.iter_mut().zip(correlate_3x3(&gp, src, wp)) {
                        *t += d;
                    }
                } else {
                    taps[0] += dot(&gp, &src[..span]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(kernel_shape, gk))
}

pub(crate) fn conv2d_backward_bias<T: Element>(grad: &Tensor<T>) -> Result<Tensor<T>> {
    let s = grad.shape();
    let mut gb = vec![T::zero(); s.channels()];
    for b in 0..s.batch() {
        for (c, slot) in gb.iter_mut().enumerate() {
            *slot += pairwise_sum(grad.plane(b, c), s.width());
        }
    }
    Ok(Tensor::from_parts(Shape::new(s.channels(), 1, 1, 1)?, gb))
}

/// `acc[i] += sum over the 3x3 taps of taps[t] * src[i + off(t)]`, where
/// `src` is a padded plane of row stride `wp` and `acc` is in padded-row
/// layout.
#[inline]
fn accumulate_3x3<T: Element>(acc: &mut [T], taps: &[T], src: &[T], wp: usize) {
    let n = acc.len();
    let r0 = &src[..n + 2];
    let r1 = &src[wp..wp + n + 2];
    let r2 = &src[2 * wp..2 * wp + n + 2];
    let t: [T; 9] = taps[..9].try_into().expect("3x3 taps");
    for (i, a) in acc.iter_mut().enumerate() {
        let top = t[0] * r0[i] + t[1] * r0[i + 1] + t[2] * r0[i + 2];
        let mid = t[3] * r1[i] + t[4] * r1[i + 1] + t[5] * r1[i + 2];
        let bot = t[6] * r2[i] + t[7] * r2[i + 1] + t[8] * r2[i + 2];
        *a += (top + mid) + bot;
    }
}

/// The nine dot products `sum_i g[i] * src[i + off(t)]` for the taps of a
/// 3x3 kernel, with a fixed summation order per tap.
fn correlate_3x3<T: Element>(g: &[T], src: &[T], wp: usize) -> [T; 9] {
    let n = g.len();
    let rows = [&src[..n + 2], &src[wp..wp + n + 2], &src[2 * wp..2 * wp + n + 2]];
    let mut acc = [[T::zero(); 4]; 9];
    let body = n - n % 4;
    for base in (0..body).step_by(4) {
        let gv: [T; 4] = g[base..base + 4].try_into().expect("chunk of 4");
        for (r, row) in rows.iter().enumerate() {
            let win: [T; 6] = row[base..base + 6].try_into().expect("window of 6");
            for dx in 0..3 {
                for l in 0..4 {
                    acc[r * 3 + dx][l] += gv[l] * win[l + dx];
                }
            }
        }
    }
    let acc = std::hint::black_box(acc);
    let mut out = [T::zero(); 9];
    for (t, o) in out.iter_mut().enumerate() {
        let (r, dx) = (t / 3, t % 3);
        let mut tail = T::zero();
        for i in body..n {
            tail += g[i] * rows[r][i + dx];
        }
        let a = acc[t];
        *o = ((a[0] + a[1]) + (a[2] + a[3])) + tail;
    }
    out
}

/// Geometry of a same-size convolution evaluated on padded planes.
///
/// Planes are padded to `hp x wp`. The output of a whole plane is computed as
/// one contiguous run of `span = (h - 1) * wp + w` elements in padded-row
/// layout; the `2 * pad` trailing columns of each row are scratch.
struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    pad: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
}

impl ConvGeometry {
    fn new(input: Shape, kernel: Shape, pad: usize) -> Result<Self> {
        let [out_ch, in_ch, kh, kw] = kernel.dims();
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::shape("conv2d kernel", "square 1x1 or 3x3 kernel", kernel));
        }
        if pad != (kh - 1) / 2 {
            return Err(Error::Invalid(format!(
                "conv2d: padding {pad} does not preserve size for a {kh}x{kh} kernel"
            )));
        }
        if input.channels() != in_ch {
            return Err(Error::shape("conv2d input", format!("{in_ch} channels"), input));
        }
        let (h, w) = (input.height(), input.width());
        Ok(ConvGeometry {
            batch: input.batch(),
            in_ch,
            out_ch,
            k: kh,
            pad,
            h,
            w,
            hp: h + 2 * pad,
            wp: w + 2 * pad,
        })
    }

    fn out_shape(&self) -> Result<Shape> {
        Shape::new(self.batch, self.out_ch, self.h, self.w)
    }

    fn span(&self) -> usize {
        (self.h - 1) * self.wp + self.w
    }

    fn pad_input<T: Element>(&self, input: &Tensor<T>) -> Vec<T> {
        let (h, w, hp, wp, p) = (self.h, self.w, self.hp, self.wp, self.pad);
        let planes = self.batch * self.in_ch;
        if p == 0 {
            return input.data().to_vec();
        }
        let mut out = vec![T::zero(); planes * hp * wp];
        for (src, dst) in input.data().chunks_exact(h * w).zip(out.chunks_exact_mut(hp * wp)) {
            for y in 0..h {
                dst[(y + p) * wp + p..][..w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
        out
    }

    fn padded_plane<'a, T>(&self, padded: &'a [T], b: usize, c: usize) -> &'a [T] {
        let size = self.hp * self.wp;
        &padded[(b * self.in_ch + c) * size..][..size]
    }

    /// Lays an `h x w` gradient plane out in padded-row layout, zeroing the
    /// scratch columns.
    fn spread_grad<T: Element>(&self, plane: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for y in 0..self.h {
            out[y * self.wp..][..self.w].copy_from_slice(&plane[y * self.w..(y + 1) * self.w]);
        }
    }
}

pub fn elementwise<T: Element>(kind: Elementwise, a: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let binary = |f: fn(T, T) -> T| -> Result<Tensor<T>> {
        let b = b.ok_or_else(|| Error::Invalid(format!("{} needs two operands", kind.name())))?;
        a.zip_map(b, kind.name(), f)
    };
    Ok(match kind {
        Elementwise::Add => binary(|x, y| x + y)?,
        Elementwise::Sub => binary(|x, y| x - y)?,
        Elementwise::Mul => binary(|x, y| x * y)?,
        Elementwise::Exp => a.map(T::exp),
        Elementwise::Sigmoid => a.map(sigmoid),
        Elementwise::LeakyRelu(slope) => {
            let slope = T::from_f64(slope);
            a.map(|v| if v > T::zero() { v } else { slope * v })
        }
        Elementwise::Scale(c) => {
            let c = T::from_f64(c);
            a.map(|v| c * v)
        }
        Elementwise::Shift(c) => {
            let c = T::from_f64(c);
            a.map(|v| v + c)
        }
        Elementwise::Abs => a.map(T::abs),
        Elementwise::Sqrt => a.map(T::sqrt),
    })
}

#[inline]
fn sigmoid<T: Element>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn elementwise_backward<T: Element>(
    kind: Elementwise,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let name = kind.name();
    let x = inputs[0];
    Ok(match kind {
        Elementwise::Add => vec![grad.clone(), grad.clone()],
        Elementwise::Sub => vec![grad.clone(), grad.map(|g| -g)],
        Elementwise::Mul => vec![
            grad.zip_map(inputs[1], name, |g, b| g * b)?,
            grad.zip_map(x, name, |g, a| g * a)?,
        ],
        Elementwise::Exp => vec![grad.zip_map(output, name, |g, e| g * e)?],
        Elementwise::Sigmoid => {
            vec![grad.zip_map(output, name, |g, s| g * s * (T::one() - s))?]
        }
        Elementwise::LeakyRelu(slope) => {
            let slope = T::from_f64(slope);
            vec![grad.zip_map(x, name, |g, v| if v > T::zero() { g } else { slope * g })?]
        }
        Elementwise::Scale(c) => {
            let c = T::from_f64(c);
            vec![grad.map(|g| c * g)]
        }
        Elementwise::Shift(_) => vec![grad.clone()],
        Elementwise::Abs => vec![grad.zip_map(x, name, |g, v| {
            if v > T::zero() {
                g
            } else if v < T::zero() {
                -g
            } else {
                T::zero()
            }
        })?],
        Elementwise::Sqrt => {
            let half = T::from_f64(0.5);
            vec![grad.zip_map(
                output,
                name,
                |g, r| {
                    if r > T::zero() {
                        half * g / r
                    } else {
                        T::zero()
                    }
                },
            )?]
        }
    })
}

pub fn reduce<T: Element>(kind: Reduce, a: &Tensor<T>) -> T {
    let row = a.shape().width();
    match kind {
        Reduce::Sum => pairwise_sum(a.data(), row),
        Reduce::Mean => pairwise_sum(a.data(), row) / T::from_f64(a.len() as f64),
        Reduce::SumSq => {
            let squares: Vec<T> = a.data().iter().map(|&v| v * v).collect();
            pairwise_sum(&squares, row)
        }
    }
}

pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
    let base = first.shape();
    let mut channels = 0;
    for t in inputs {
        let s = t.shape();
        if s.batch() != base.batch() || s.height() != base.height() || s.width() != base.width() {
            return Err(Error::shape(
                "concat",
                format!("batch {} at {}x{}", base.batch(), base.height(), base.width()),
                s,
            ));
        }
        channels += s.channels();
    }
    let shape = base.with_channels(channels)?;
    let mut out = Vec::with_capacity(shape.numel());
    let plane = base.plane();
    for b in 0..base.batch() {
        for t in inputs {
            let c = t.shape().channels();
            out.extend_from_slice(&t.data()[b * c * plane..(b + 1) * c * plane]);
        }
    }
    Ok(Tensor::from_parts(shape, out))
}

pub fn split_channels<T: Element>(t: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if len == 0 || start + len > s.channels() {
        return Err(Error::shape(
            "split",
            format!("at least {} channels", start + len.max(1)),
            s,
        ));
    }
    let shape = s.with_channels(len)?;
    let plane = s.plane();
    let mut out = Vec::with_capacity(shape.numel());
    for b in 0..s.batch() {
        let from = (b * s.channels() + start) * plane;
        out.extend_from_slice(&t.data()[from..from + len * plane]);
    }
    Ok(Tensor::from_parts(shape, out))
}

/// Adjoint of [`split_channels`]: places `part` at channel `start` of a zero
/// tensor of shape `full`.
fn embed_channels<T: Element>(part: &Tensor<T>, full: Shape, start: usize, len: usize) -> Result<Tensor<T>> {
    part.expect_shape("split grad", full.with_channels(len)?)?;
    let plane = full.plane();
    let mut out = vec![T::zero(); full.numel()];
    for b in 0..full.batch() {
        let to = (b * full.channels() + start) * plane;
        out[to..to + len * plane].copy_from_slice(&part.data()[b * len * plane..(b + 1) * len * plane]);
    }
    Ok(Tensor::from_parts(full, out))
}

/// `clip(round(255 v) / 255, 0, 1)`
pub fn quantize<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let levels = T::from_f64(255.0);
    t.map(|v| {
        let q = (v * levels).round() / levels;
        if q < T::zero() {
            T::zero()
        } else if q > T::one() {
            T::one()
        } else {
            q
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let shape = Shape::from_dims(shape).unwrap();
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Six nested loops, straight from the definition of cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
        let [bn, ic_n, h, w] = x.shape().dims();
        let [oc_n, _, kh, kw] = k.shape().dims();
        let p = (kh - 1) as isize / 2;
        let mut out = vec![0.0; bn * oc_n * h * w];
        for b in 0..bn {
            for oc in 0..oc_n {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = bias.data()[oc];
                        for ic in 0..ic_n {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let sy = y as isize + ky as isize - p;
                                    let sx = xx as isize + kx as isize - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += k.at(oc, ic, ky, kx) * x.at(b, ic, sy as usize, sx as usize);
                                }
                            }
                        }
                        out[((b * oc_n + oc) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_single_multiply_add() {
        let one = Shape::scalar();
        let x = Tensor::new(one, vec![2.0]).unwrap();
        let k = Tensor::new(one, vec![3.0]).unwrap();
        let b = Tensor::new(one, vec![0.5]).unwrap();
        assert_eq!(conv2d(&x, &k, &b, 0).unwrap().data(), &[6.5]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random([2, 1, 6, 7], &mut rng);
        let mut taps = vec![0.0; 9];
        taps[4] = 1.0;
        let k = Tensor::new(Shape::new(1, 1, 3, 3).unwrap(), taps).unwrap();
        let b = Tensor::zeros(Shape::scalar());
        assert_eq!(conv2d(&x, &k, &b, 1).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random([2, 3, 5, 5], &mut rng);
        let k = random([4, 3, 3, 3], &mut rng);
        let b = random([4, 1, 1, 1], &mut rng);
        let fast = conv2d(&x, &k, &b, 1).unwrap();
        let slow = naive_conv(&x, &k, &b);
        for (a, e) in fast.data().iter().zip(&slow) {
            assert!((a - e).abs() <= 1e-12, "{a} vs {e}");
        }
        // 1x1 kernels and non-square planes take the same path.
        let x = random([1, 3, 4, 9], &mut rng);
        let k = random([2, 3, 1, 1], &mut rng);
        let b = random([2, 1, 1, 1], &mut rng);
        let fast = conv2d(&x, &k, &b, 0).unwrap();
        for (a, e) in fast.data().iter().zip(&naive_conv(&x, &k, &b)) {
            assert!((a - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random([1, 3, 4, 4], &mut rng);
        let k = random([2, 2, 3, 3], &mut rng);
        let b = random([2, 1, 1, 1], &mut rng);
        let err = conv2d(&x, &k, &b, 1).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }), "{err}");
        let k = random([2, 3, 3, 3], &mut rng);
        assert!(conv2d(&x, &k, &b, 0).is_err());
        let k5 = random([2, 3, 5, 5], &mut rng);
        assert!(conv2d(&x, &k5, &b, 2).is_err());
        let bad_bias = random([3, 1, 1, 1], &mut rng);
        assert!(conv2d(&x, &k, &bad_bias, 1).is_err());
    }

    #[test]
    fn elementwise_closed_forms() {
        let s = Shape::new(1, 1, 1, 2).unwrap();
        let zero = Tensor::<f64>::zeros(s);
        let sig = elementwise(Elementwise::Sigmoid, &zero, None).unwrap();
        assert_eq!(sig.data(), &[0.5, 0.5]);
        let x = Tensor::new(s, vec![-1.0, 2.0]).unwrap();
        let lr = elementwise(Elementwise::LeakyRelu(0.2), &x, None).unwrap();
        assert_eq!(lr.data(), &[-0.2, 2.0]);
        let sigmoid_far = elementwise(
            Elementwise::Sigmoid,
            &Tensor::new(s, vec![-800.0, 800.0]).unwrap(),
            None,
        )
        .unwrap();
        assert_eq!(sigmoid_far.data(), &[0.0, 1.0]);
    }

    #[test]
    fn exp_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([2, 3, 4, 5], &mut rng);
        let e = elementwise(Elementwise::Exp, &x, None).unwrap();
        for (got, v) in e.data().iter().zip(x.data()) {
            assert!((got - v.exp()).abs() <= 1e-15);
        }
    }

    #[test]
    fn binary_ops_require_equal_shapes() {
        let a = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 2).unwrap());
        let b = Tensor::<f64>::zeros(Shape::new(1, 1, 2, 3).unwrap());
        for kind in [Elementwise::Add, Elementwise::Sub, Elementwise::Mul] {
            assert!(elementwise(kind, &a, Some(&b)).is_err());
        }
    }

    #[test]
    fn reductions() {
        let ones = Tensor::<f64>::full(Shape::new(1, 1, 2, 2).unwrap(), 1.0);
        assert_eq!(reduce(Reduce::Mean, &ones), 1.0);
        let v = Tensor::new(Shape::new(1, 1, 1, 2).unwrap(), vec![3.0, 4.0]).unwrap();
        assert_eq!(reduce(Reduce::SumSq, &v), 25.0);
    }

    #[test]
    fn sum_agrees_with_compensated_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let x = random([3, 4, 17, 23], &mut rng);
            // Kahan summation
            let (mut sum, mut comp) = (0.0f64, 0.0f64);
            for &v in x.data() {
                let y = v - comp;
                let t = sum + y;
                comp = (t - sum) - y;
                sum = t;
            }
            let got = reduce(Reduce::Sum, &x);
            let scale = x.data().iter().map(|v| v.abs()).sum::<f64>();
            assert!((got - sum).abs() <= 1e-12 * scale.max(sum.abs()), "{got} vs {sum}");
        }
    }

    #[test]
    fn concat_then_split_recovers_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = random([2, 3, 4, 4], &mut rng);
        let b = random([2, 5, 4, 4], &mut rng);
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape().channels(), 8);
        assert_eq!(split_channels(&cat, 0, 3).unwrap(), a);
        assert_eq!(split_channels(&cat, 3, 5).unwrap(), b);
        assert!(split_channels(&cat, 6, 3).is_err());
        let c = random([2, 5, 4, 3], &mut rng);
        assert!(concat_channels(&[&a, &c]).is_err());
    }

    #[test]
    fn quantize_rounds_and_clips() {
        let s = Shape::new(1, 1, 1, 4).unwrap();
        let y = Tensor::new(s, vec![0.5, -0.2, 1.3, 1.0 / 255.0]).unwrap();
        let q = quantize(&y);
        assert_eq!(q.data(), &[128.0 / 255.0, 0.0, 1.0, 1.0 / 255.0]);
        let g = Tensor::full(s, 1.0);
        let back = Op::QuantizeSte.backward(&[&y], &q, &g).unwrap();
        assert_eq!(back[0].data(), &[1.0, 0.0, 0.0, 1.0]);
    }
}
