//! Central finite-difference checks of every primitive's vector-Jacobian
//! product and of the composed coupling block and training objective.
//!
//! Errors are norm-wise: `|g_analytic - g_fd| / max(|g_analytic|, |g_fd|)`
//! over all checked coordinates of one case, reported as the worst case per
//! name.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Eager, Graph, ParamId, Tape};
use crate::inn::{LatentMode, LatentSpec, ModelConfig, RescaleModel};
use crate::losses::{total_loss, LossWeights};
use crate::ops::{Elementwise, Op, Reduce};
use crate::tensor::{Shape, Tensor};

pub const PRIMITIVE_TOLERANCE: f64 = 1e-4;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckOptions {
    /// Central difference step.
    pub step: f64,
    pub seed: u64,
    /// Multiplies every analytic gradient by `1 + perturb`. Nonzero values
    /// exist to prove the harness can fail.
    pub perturb: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            seed: 0,
            perturb: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckKind {
    Primitive,
    Composite,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub kind: CheckKind,
    /// Worst norm-wise relative error over the cases tried.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub cases: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

/// `|a - b| / max(|a|, |b|)`, and 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

fn uniform(shape: [usize; 4], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(Shape::from_dims(shape).expect("valid shape"), |_| {
        rng.random_range(lo..hi)
    })
}

/// Uniform values kept at least `gap` away from each point in `kinks`.
fn away_from(shape: [usize; 4], lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(Shape::from_dims(shape).expect("valid shape"), |_| loop {
        let v: f64 = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() >= gap) {
            break v;
        }
    })
}

/// Smooth stand-in for an op's forward map.
type Surrogate = fn(&Tensor<f64>) -> Tensor<f64>;

fn project(out: &Tensor<f64>, weights: &Tensor<f64>) -> f64 {
    out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
}

/// Checks `op.backward` against differences of `<R, forward(inputs)>` for a
/// random `R`. `surrogate` replaces the forward map for ops whose gradient is
/// defined through a smooth stand-in.
fn check_op(
    op: Op,
    inputs: &[Tensor<f64>],
    surrogate: Option<Surrogate>,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    let r = uniform(out.shape().dims(), -1.0, 1.0, rng);
    let grads = op.backward(&refs, &out, &r)?;
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.data().iter().map(|v| v * (1.0 + opts.perturb)))
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let refs: Vec<&Tensor<f64>> = ins.iter().collect();
        let y = match surrogate {
            Some(f) => f(refs[0]),
            None => op.forward(&refs)?,
        };
        Ok(project(&y, &r))
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let base = inputs[i].data()[j];
            work[i] = with_element(&inputs[i], j, base + opts.step);
            let plus = eval(&work)?;
            work[i] = with_element(&inputs[i], j, base - opts.step);
            let minus = eval(&work)?;
            work[i] = inputs[i].clone();
            numeric.push((plus - minus) / (2.0 * opts.step));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn with_element(t: &Tensor<f64>, j: usize, v: f64) -> Tensor<f64> {
    let mut data = t.data().to_vec();
    data[j] = v;
    Tensor::new(t.shape(), data).expect("same shape")
}

/// Names of the primitives [`check_primitives`] covers, in report order.
pub const PRIMITIVES: [&str; 19] = [
    "conv2d",
    "add",
    "sub",
    "mul",
    "exp",
    "sigmoid",
    "leaky_relu",
    "scale",
    "shift",
    "abs",
    "sqrt",
    "sum",
    "mean",
    "sumsq",
    "concat",
    "split",
    "haar_forward",
    "haar_inverse",
    "quantize_ste",
];

pub const COMPOSITES: [&str; 3] = ["inv_block", "inv_block_inverse", "total_loss"];

/// Runs every primitive on a few random cases.
pub fn check_primitives(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let shape = [2, 3, 4, 4];
    let mut results = Vec::new();
    for name in PRIMITIVES {
        let mut worst: f64 = 0.0;
        let mut cases = 0;
        for case in 0..3 {
            let rng = &mut rng;
            let (op, inputs, surrogate): (Op, Vec<Tensor<f64>>, Option<Surrogate>) = match name {
                "conv2d" => {
                    let k = if case == 1 { 1 } else { 3 };
                    let (cin, cout) = (2 + case, 3);
                    (
                        Op::Conv2d { pad: (k - 1) / 2 },
                        vec![
                            uniform([2, cin, 5, 4], -1.0, 1.0, rng),
                            uniform([cout, cin, k, k], -0.5, 0.5, rng),
                            uniform([cout, 1, 1, 1], -0.5, 0.5, rng),
                        ],
                        None,
                    )
                }
                "add" | "sub" | "mul" => {
                    let e = match name {
                        "add" => Elementwise::Add,
                        "sub" => Elementwise::Sub,
                        _ => Elementwise::Mul,
                    };
                    (
                        Op::Elementwise(e),
                        vec![uniform(shape, -2.0, 2.0, rng), uniform(shape, -2.0, 2.0, rng)],
                        None,
                    )
                }
                "exp" => (
                    Op::Elementwise(Elementwise::Exp),
                    vec![uniform(shape, -2.0, 2.0, rng)],
                    None,
                ),
                "sigmoid" => (
                    Op::Elementwise(Elementwise::Sigmoid),
                    vec![uniform(shape, -6.0, 6.0, rng)],
                    None,
                ),
                "leaky_relu" => (
                    Op::Elementwise(Elementwise::LeakyRelu(0.2)),
                    vec![away_from(shape, -2.0, 2.0, &[0.0], 1e-3, rng)],
                    None,
                ),
                "scale" => (
                    Op::Elementwise(Elementwise::Scale(-1.7)),
                    vec![uniform(shape, -2.0, 2.0, rng)],
                    None,
                ),
                "shift" => (
                    Op::Elementwise(Elementwise::Shift(0.3)),
                    vec![uniform(shape, -2.0, 2.0, rng)],
                    None,
                ),
                "abs" => (
                    Op::Elementwise(Elementwise::Abs),
                    vec![away_from(shape, -2.0, 2.0, &[0.0], 1e-3, rng)],
                    None,
                ),
                "sqrt" => (
                    Op::Elementwise(Elementwise::Sqrt),
                    vec![uniform(shape, 0.1, 3.0, rng)],
                    None,
                ),
                "sum" => (Op::Reduce(Reduce::Sum), vec![uniform(shape, -2.0, 2.0, rng)], None),
                "mean" => (Op::Reduce(Reduce::Mean), vec![uniform(shape, -2.0, 2.0, rng)], None),
                "sumsq" => (Op::Reduce(Reduce::SumSq), vec![uniform(shape, -2.0, 2.0, rng)], None),
                "concat" => (
                    Op::Concat,
                    vec![
                        uniform([2, 1, 3, 4], -1.0, 1.0, rng),
                        uniform([2, 2 + case, 3, 4], -1.0, 1.0, rng),
                        uniform([2, 3, 3, 4], -1.0, 1.0, rng),
                    ],
                    None,
                ),
                "split" => (
                    Op::Split { start: case, len: 2 },
                    vec![uniform([2, 5, 3, 4], -1.0, 1.0, rng)],
                    None,
                ),
                "haar_forward" => (Op::HaarForward, vec![uniform([2, 3, 4, 6], -1.0, 1.0, rng)], None),
                "haar_inverse" => (Op::HaarInverse, vec![uniform([2, 8, 2, 3], -1.0, 1.0, rng)], None),
                // The straight-through gradient is checked against its smooth
                // stand-in, the clip to [0, 1].
                "quantize_ste" => (
                    Op::QuantizeSte,
                    vec![away_from(shape, -0.3, 1.3, &[0.0, 1.0], 1e-3, rng)],
                    Some(|t: &Tensor<f64>| t.map(|v| v.clamp(0.0, 1.0))),
                ),
                other => unreachable!("unlisted primitive {other}"),
            };
            worst = worst.max(check_op(op, &inputs, surrogate, opts, rng)?);
            cases += 1;
        }
        results.push(CheckResult {
            name,
            kind: CheckKind::Primitive,
            max_rel_error: worst,
            tolerance: PRIMITIVE_TOLERANCE,
            cases,
        });
    }
    Ok(results)
}

#[derive(Clone, Copy)]
enum Composite {
    BlockForward,
    BlockInverse,
    TotalLoss,
}

fn tiny_model(c_w: usize, rng: &mut ChaCha8Rng) -> Result<RescaleModel<f64>> {
    let cfg = ModelConfig {
        scale: 2,
        blocks: 1,
        growth: 4,
        clamp: 1.0,
        latent: LatentSpec {
            c_w,
            w_mode: LatentMode::Gaussian,
            zhat_mode: LatentMode::Zero,
        },
    };
    let mut model = RescaleModel::new(cfg, rng)?;
    model.randomize(rng, 0.15);
    Ok(model)
}

struct CompositeCase {
    which: Composite,
    model: RescaleModel<f64>,
    inputs: Vec<Tensor<f64>>,
    projections: Vec<Tensor<f64>>,
    params: Vec<ParamId>,
    x: Tensor<f64>,
    loss_seed: u64,
}

impl CompositeCase {
    fn loss<G: Graph<f64>>(&self, model: &RescaleModel<f64>, g: &mut G, inputs: &[G::Var]) -> Result<G::Var> {
        match self.which {
            Composite::BlockForward | Composite::BlockInverse => {
                let block = model.blocks().next().expect("one block");
                let (a, b) = match self.which {
                    Composite::BlockForward => block.forward(g, model.params(), &inputs[0], &inputs[1])?,
                    _ => block.inverse(g, model.params(), &inputs[0], &inputs[1])?,
                };
                let ra = g.constant(self.projections[0].clone());
                let rb = g.constant(self.projections[1].clone());
                let pa = g.mul(&a, &ra)?;
                let pa = g.sum(&pa)?;
                let pb = g.mul(&b, &rb)?;
                let pb = g.sum(&pb)?;
                g.add(&pa, &pb)
            }
            Composite::TotalLoss => {
                let weights = LossWeights {
                    quantize: false,
                    ..LossWeights::defaults(model.config().scale)
                };
                let mut rng = ChaCha8Rng::seed_from_u64(self.loss_seed);
                Ok(total_loss(model, g, &self.x, &weights, &mut rng)?.total)
            }
        }
    }

    fn eager(&self, model: &RescaleModel<f64>, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Eager;
        let v = self.loss(model, &mut g, inputs)?;
        v.item()
    }

    fn check(&self, opts: &GradCheckOptions) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<_> = self.inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = self.loss(&self.model, &mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        let mut analytic = Vec::new();
        for (v, t) in vars.iter().zip(&self.inputs) {
            match grads.wrt(*v) {
                Some(g) => analytic.extend_from_slice(g.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
            }
        }
        for &id in &self.params {
            match grads.wrt_param(id) {
                Some(g) => analytic.extend_from_slice(g.data()),
                None => analytic.extend(std::iter::repeat_n(0.0, self.model.params().get(id).value.len())),
            }
        }
        for a in &mut analytic {
            *a *= 1.0 + opts.perturb;
        }

        let h = opts.step;
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut work = self.inputs.clone();
        for i in 0..self.inputs.len() {
            for j in 0..self.inputs[i].len() {
                let base = self.inputs[i].data()[j];
                work[i] = with_element(&self.inputs[i], j, base + h);
                let plus = self.eager(&self.model, &work)?;
                work[i] = with_element(&self.inputs[i], j, base - h);
                let minus = self.eager(&self.model, &work)?;
                work[i] = self.inputs[i].clone();
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let mut model = self.model.clone();
        for &id in &self.params {
            let original = model.params().get(id).value.clone();
            for j in 0..original.len() {
                let base = original.data()[j];
                model.params_mut().get_mut(id).value = with_element(&original, j, base + h);
                let plus = self.eager(&model, &self.inputs)?;
                model.params_mut().get_mut(id).value = with_element(&original, j, base - h);
                let minus = self.eager(&model, &self.inputs)?;
                numeric.push((plus - minus) / (2.0 * h));
            }
            model.params_mut().get_mut(id).value = original;
        }
        Ok(relative_error(&analytic, &numeric))
    }
}

/// Checks the coupling block (both directions, inputs and weights) and the
/// full objective (weights), on a small randomly weighted model. The
/// objective is checked with LR quantization off, since rounding has no
/// derivative to difference.
pub fn check_composites(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut results = Vec::new();
    for (name, which) in [
        ("inv_block", Composite::BlockForward),
        ("inv_block_inverse", Composite::BlockInverse),
        ("total_loss", Composite::TotalLoss),
    ] {
        let mut worst: f64 = 0.0;
        let cases = 2;
        for case in 0..cases {
            let c_w = if case == 0 { 2 } else { 0 };
            let model = tiny_model(c_w, &mut rng)?;
            let mixture = model.blocks().next().expect("one block").mixture_channels();
            let params = match which {
                Composite::TotalLoss => model.params().iter().map(|p| p.id()).collect(),
                _ => model.block_param_ids()[0].clone(),
            };
            let hw = [1, 3, 3];
            let inputs = match which {
                Composite::TotalLoss => Vec::new(),
                _ => vec![
                    uniform([hw[0], 3, hw[1], hw[2]], -1.0, 1.0, &mut rng),
                    uniform([hw[0], mixture, hw[1], hw[2]], -1.0, 1.0, &mut rng),
                ],
            };
            let projections = inputs
                .iter()
                .map(|t| uniform(t.shape().dims(), -1.0, 1.0, &mut rng))
                .collect();
            let case = CompositeCase {
                which,
                inputs,
                projections,
                params,
                x: uniform([1, 3, 6, 6], 0.0, 1.0, &mut rng),
                loss_seed: rng.random(),
                model,
            };
            worst = worst.max(case.check(opts)?);
        }
        results.push(CheckResult {
            name,
            kind: CheckKind::Composite,
            max_rel_error: worst,
            tolerance: COMPOSITE_TOLERANCE,
            cases,
        });
    }
    Ok(results)
}

pub fn check_all(opts: &GradCheckOptions) -> Result<Vec<CheckResult>> {
    let mut results = check_primitives(opts)?;
    results.extend(check_composites(opts)?);
    Ok(results)
}
