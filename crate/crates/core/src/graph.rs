//! Parameters, eager evaluation and the reverse-mode gradient tape.
//!
//! Model code is written once against the [`Graph`] trait. [`Eager`] evaluates
//! immediately and keeps nothing; [`Tape`] records each primitive with its
//! inputs and output so [`Tape::backward`] can accumulate gradients.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops::{Elementwise, Op, Reduce};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    id: ParamId,
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn id(&self) -> ParamId {
        self.id
    }
}

/// Owns every trainable tensor of a model, in registration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            id,
            name: name.into(),
            value,
            grad,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = Tensor::zeros(p.value.shape());
        }
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data().iter())
            .map(|g| g.to_f64() * g.to_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Builder interface shared by eager evaluation and the tape.
pub trait Graph<T: Element> {
    type Var: Clone;

    fn constant(&mut self, value: Tensor<T>) -> Self::Var;
    fn param(&mut self, p: &Parameter<T>) -> Self::Var;
    fn apply(&mut self, op: Op, inputs: &[&Self::Var]) -> Result<Self::Var>;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;

    fn conv2d(&mut self, x: &Self::Var, kernel: &Self::Var, bias: &Self::Var, pad: usize) -> Result<Self::Var> {
        self.apply(Op::Conv2d { pad }, &[x, kernel, bias])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Add), &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Sub), &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Mul), &[a, b])
    }
    fn exp(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Exp), &[a])
    }
    fn sigmoid(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Sigmoid), &[a])
    }
    fn leaky_relu(&mut self, a: &Self::Var, slope: f64) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::LeakyRelu(slope)), &[a])
    }
    fn scale(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Scale(c)), &[a])
    }
    fn shift(&mut self, a: &Self::Var, c: f64) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Shift(c)), &[a])
    }
    fn abs(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Abs), &[a])
    }
    fn sqrt(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Elementwise(Elementwise::Sqrt), &[a])
    }
    fn sum(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Reduce(Reduce::Sum), &[a])
    }
    fn mean(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Reduce(Reduce::Mean), &[a])
    }
    fn sumsq(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Reduce(Reduce::SumSq), &[a])
    }
    fn concat(&mut self, parts: &[&Self::Var]) -> Result<Self::Var> {
        self.apply(Op::Concat, parts)
    }
    fn split(&mut self, a: &Self::Var, start: usize, len: usize) -> Result<Self::Var> {
        self.apply(Op::Split { start, len }, &[a])
    }
    fn haar_forward(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::HaarForward, &[a])
    }
    fn haar_inverse(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::HaarInverse, &[a])
    }
    fn quantize_ste(&mut self, a: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::QuantizeSte, &[a])
    }
}

/// Immediate evaluation without recording.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl<T: Element> Graph<T> for Eager {
    type Var = Tensor<T>;

    fn constant(&mut self, value: Tensor<T>) -> Tensor<T> {
        value
    }
    fn param(&mut self, p: &Parameter<T>) -> Tensor<T> {
        p.value.clone()
    }
    fn apply(&mut self, op: Op, inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        op.forward(inputs)
    }
    fn value<'a>(&'a self, v: &'a Tensor<T>) -> &'a Tensor<T> {
        v
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Source {
    Constant,
    Param,
    Op(Op, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node<T> {
    source: Source,
    value: Tensor<T>,
}

/// Ordered record of primitive applications. Inputs of a node always precede
/// it, so reverse order is a valid topological order for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, source: Source, value: Tensor<T>) -> Var {
        self.nodes.push(Node { source, value });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if !root.value.shape().is_scalar() {
            return Err(Error::NotScalar(root.value.shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(T::one()));
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.source {
                Source::Constant | Source::Param => {
                    leaves.insert(i, grad);
                }
                Source::Op(op, inputs) => {
                    let values: Vec<&Tensor<T>> = inputs.iter().map(|&j| &self.nodes[j].value).collect();
                    let input_grads = op.backward(&values, &node.value, &grad)?;
                    for (&j, g) in inputs.iter().zip(input_grads) {
                        grads[j] = Some(match grads[j].take() {
                            Some(acc) => acc.zip_map(&g, "grad accumulate", |a, b| a + b)?,
                            None => g,
                        });
                    }
                }
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
        })
    }

    /// Re-executes every recorded op from the stored leaves and returns the
    /// largest deviation from the saved activations.
    pub fn replay_max_deviation(&self) -> Result<f64> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        let mut worst = 0.0f64;
        for node in &self.nodes {
            let v = match &node.source {
                Source::Constant | Source::Param => node.value.clone(),
                Source::Op(op, inputs) => {
                    let ins: Vec<&Tensor<T>> = inputs.iter().map(|&j| &values[j]).collect();
                    op.forward(&ins)?
                }
            };
            worst = worst.max(v.max_abs_diff(&node.value)?);
            values.push(v);
        }
        Ok(worst)
    }

    /// Ops in recording order, for inspection.
    pub fn ops(&self) -> impl Iterator<Item = &Op> {
        self.nodes.iter().filter_map(|n| match &n.source {
            Source::Op(op, _) => Some(op),
            _ => None,
        })
    }

    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, n)| match &n.source {
            Source::Op(_, inputs) => inputs.iter().all(|&j| j < i),
            _ => true,
        })
    }
}

impl<T: Element> Graph<T> for Tape<T> {
    type Var = Var;

    fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Source::Constant, value)
    }

    /// A parameter is recorded once per tape; later uses share the node so
    /// their gradients sum.
    fn param(&mut self, p: &Parameter<T>) -> Var {
        if let Some(&i) = self.params.get(&p.id()) {
            return Var(i);
        }
        let v = self.push(Source::Param, p.value.clone());
        self.params.insert(p.id(), v.0);
        v
    }

    fn apply(&mut self, op: Op, inputs: &[&Var]) -> Result<Var> {
        let value = {
            let values: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&values)?
        };
        Ok(self.push(Source::Op(op, inputs.iter().map(|v| v.0).collect()), value))
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }
}

/// Result of a backward sweep: gradients of the recorded leaves.
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<usize, Tensor<T>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a leaf, or `None` when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v.0)
    }

    pub fn wrt_param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|i| self.leaves.get(i))
    }

    /// Adds the parameter gradients into `store`. Parameters the loss does not
    /// reach are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            if let Some(g) = self.wrt_param(p.id()) {
                p.grad = p.grad.zip_map(g, "grad accumulate", |a, b| a + b)?;
            }
        }
        Ok(())
    }
}

/// Zero-valued scalar, handy as the neutral element of a loss sum.
pub fn zero_scalar<T: Element, G: Graph<T>>(g: &mut G) -> G::Var {
    g.constant(Tensor::zeros(Shape::scalar()))
}
