//! Reverse-mode differentiation over a linear record of tensor operations.
//!
//! Nodes are appended in evaluation order, so the record is topologically
//! sorted by construction and the backward sweep is a single reverse pass.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Result, SirError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    ConvTranspose2d { input: Var, weight: Var, bias: Var, geom: ConvGeom },
    LeakyRelu { input: Var, slope: f64 },
    CosineDistance { a: Var, b: Var, eps: f64 },
    MeanAll { input: Var },
    Add { a: Var, b: Var },
    Scale { input: Var, factor: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records an input; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let needs = value.requires_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv2d_geom(x, w, b, stride, padding)?;
        let out = kernels::conv2d_forward(x, w, b, &geom);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::Conv2d { input, weight, bias, geom }, needs))
    }

    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let geom = kernels::conv_transpose2d_geom(x, w, b, stride, padding)?;
        let out = kernels::conv_transpose2d_forward(x, w, b, &geom);
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(out, Op::ConvTranspose2d { input, weight, bias, geom }, needs))
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = kernels::leaky_relu(self.value(input), slope);
        let needs = self.needs(input);
        self.push(out, Op::LeakyRelu { input, slope }, needs)
    }

    pub fn cosine_distance_map(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let out = kernels::cosine_distance_map(self.value(a), self.value(b), eps)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::CosineDistance { a, b, eps }, needs))
    }

    pub fn mean_all(&mut self, input: Var) -> Result<Var> {
        let mean = self.value(input).mean()?;
        let needs = self.needs(input);
        Ok(self.push(Tensor::scalar(mean), Op::MeanAll { input }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let needs = self.needs(input);
        self.push(out, Op::Scale { input, factor }, needs)
    }

    /// Propagates `d root / d node` back through the record.
    ///
    /// Every leaf that requires a gradient gets one, zero-filled when it does
    /// not influence `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_shape = self.value(root).shape();
        if self.value(root).numel() != 1 {
            return Err(SirError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0).reshape(root_shape)?);

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match node.op {
                Op::Leaf => unreachable!(),
                Op::Conv2d { input, weight, bias, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(input),
                        self.value(weight),
                        &g,
                        &geom,
                        self.needs(input),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, input, dx);
                    }
                    self.accumulate_if(&mut grads, weight, dw);
                    self.accumulate_if(&mut grads, bias, db.reshape(self.value(bias).shape())?);
                }
                Op::ConvTranspose2d { input, weight, bias, geom } => {
                    let (dx, dw, db) = kernels::conv_transpose2d_backward(
                        self.value(input),
                        self.value(weight),
                        &g,
                        &geom,
                        self.needs(input),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, input, dx);
                    }
                    self.accumulate_if(&mut grads, weight, dw);
                    self.accumulate_if(&mut grads, bias, db.reshape(self.value(bias).shape())?);
                }
                Op::LeakyRelu { input, slope } => {
                    let dx = kernels::leaky_relu_backward(self.value(input), &g, slope);
                    accumulate(&mut grads, input, dx);
                }
                Op::CosineDistance { a, b, eps } => {
                    let (da, db) = kernels::cosine_distance_backward(self.value(a), self.value(b), &g, eps);
                    self.accumulate_if(&mut grads, a, da);
                    self.accumulate_if(&mut grads, b, db);
                }
                Op::MeanAll { input } => {
                    let x = self.value(input);
                    let share = g.data()[0] / x.numel() as f64;
                    accumulate(&mut grads, input, Tensor::full(x.shape(), share));
                }
                Op::Add { a, b } => {
                    self.accumulate_if(&mut grads, a, g.clone());
                    self.accumulate_if(&mut grads, b, g);
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, input, g.map(|v| v * factor));
                }
            }
        }

        let mut out = Gradients { grads: Vec::with_capacity(self.nodes.len()) };
        for (idx, g) in grads.into_iter().enumerate() {
            let node = &self.nodes[idx];
            let leaf_grad = match node.op {
                Op::Leaf if node.needs_grad => Some(g.unwrap_or_else(|| Tensor::zeros(node.value.shape()))),
                _ => None,
            };
            out.grads.push(leaf_grad);
        }
        Ok(out)
    }

    fn accumulate_if(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if self.needs(v) {
            accumulate(grads, v, g);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shape matches its value"),
        slot => *slot = Some(g),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
