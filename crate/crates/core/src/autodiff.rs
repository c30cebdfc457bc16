//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value and whatever
//! it needs for the backward rule. Nodes are only ever appended, so index
//! order is a topological order and the backward sweep is a single reverse
//! pass. A tape records one forward pass; [`Tape::vjp`] may be called any
//! number of times on it with different upstream vectors.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::kernels::{self, BatchNormCache, ConvGeometry, Mode};
use crate::physics::LinearOperator;
use crate::tensor::{DType, Tensor};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Backward rule for primitives defined outside this module.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &str;

    /// Gradients for each input given the upstream gradient of the output.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        mode: Mode,
        cache: BatchNormCache,
    },
    Relu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mse(Var, Var),
    L1(Var),
    Fft2(Var),
    Ifft2(Var),
    Rotate90 { input: Var, turns: Vec<usize> },
    ToChannels(Var),
    FromChannels(Var),
    Linear {
        input: Var,
        op: Arc<dyn LinearOperator>,
        adjoint: bool,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, kernel, bias, ..
            } => {
                let mut v = vec![*input, *kernel];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Relu(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::L1(a)
            | Op::Fft2(a)
            | Op::Ifft2(a)
            | Op::ToChannels(a)
            | Op::FromChannels(a) => vec![*a],
            Op::Rotate90 { input, .. } | Op::Linear { input, .. } => vec![*input],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
    names: IndexMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(|g| g.as_ref())
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|&i| self.grads[i].as_ref())
    }

    /// Gradient of every named leaf, in registration order.
    pub fn named(&self) -> IndexMap<String, Tensor> {
        self.names
            .iter()
            .filter_map(|(n, &i)| self.grads[i].clone().map(|g| (n.clone(), g)))
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, var: Var) -> Result<&Node> {
        if var.tape != self.id {
            return Err(Error::Tape(format!(
                "variable belongs to tape {} but was used on tape {}",
                var.tape, self.id
            )));
        }
        self.nodes
            .get(var.index)
            .ok_or_else(|| Error::Tape(format!("unknown variable {}", var.index)))
    }

    pub fn value(&self, var: Var) -> Result<&Tensor> {
        Ok(&self.node(var)?.value)
    }

    pub fn requires_grad(&self, var: Var) -> Result<bool> {
        Ok(self.node(var)?.requires_grad)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let mut requires_grad = false;
        for v in op.inputs() {
            requires_grad |= self.node(v)?.requires_grad;
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name: None,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            name: None,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Named leaf that receives a gradient; names must be unique per tape.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<Var> {
        if self.nodes.iter().any(|n| n.name.as_deref() == Some(name)) {
            return Err(Error::Tape(format!("parameter `{name}` registered twice")));
        }
        let v = self.leaf(value, true);
        self.nodes[v.index].name = Some(name.to_string());
        Ok(v)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let b = match bias {
            Some(b) => Some(self.value(b)?),
            None => None,
        };
        let (value, geom) =
            kernels::conv2d_forward(self.value(input)?, self.value(kernel)?, b, stride, padding)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            },
        )
    }

    /// Batch normalisation; in train mode also returns updated running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<(Tensor, Tensor)>)> {
        let x = self.value(input)?;
        let (value, cache) = kernels::batch_norm_forward(
            x,
            self.value(gamma)?,
            self.value(beta)?,
            running_mean,
            running_var,
            mode,
            eps,
        )?;
        let updated = match mode {
            Mode::Train => {
                let s = x.shape();
                Some(kernels::batch_norm_running_update(
                    running_mean,
                    running_var,
                    &cache,
                    s[0] * s[2] * s[3],
                    momentum,
                )?)
            }
            Mode::Eval => None,
        };
        let v = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                cache,
            },
        )?;
        Ok((v, updated))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        x.expect_real("relu")?;
        let value = x.map(|v| v.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a)?.add(self.value(b)?)?;
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a)?.sub(self.value(b)?)?;
        self.push(value, Op::Sub(a, b))
    }

    /// Elementwise product of real tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let x = self.value(a)?;
        x.expect_real("mul")?;
        let value = x.zip_map(self.value(b)?, "mul", |p, q| p * q)?;
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a)?.scale(s);
        self.push(value, Op::Scale(a, s))
    }

    /// Sum of all entries of a real tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        x.expect_real("sum")?;
        let value = Tensor::scalar(x.sum());
        self.push(value, Op::Sum(a))
    }

    /// Mean squared difference; squared modulus for complex tensors.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a)?, self.value(b)?);
        x.expect_same(y, "mse_loss")?;
        if x.numel() == 0 {
            return Err(Error::invalid("mse_loss", "empty tensors"));
        }
        let s: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (p - q) * (p - q))
            .sum();
        let value = Tensor::scalar(s / x.numel() as f64);
        self.push(value, Op::Mse(a, b))
    }

    /// Sum of absolute values; modulus for complex tensors.
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a)?;
        if x.numel() == 0 {
            return Err(Error::invalid("l1_norm", "empty tensor"));
        }
        let value = Tensor::scalar(x.abs().sum());
        self.push(value, Op::L1(a))
    }

    pub fn fft2(&mut self, a: Var) -> Result<Var> {
        let value = kernels::fft2(self.value(a)?)?;
        self.push(value, Op::Fft2(a))
    }

    pub fn ifft2(&mut self, a: Var) -> Result<Var> {
        let value = kernels::ifft2(self.value(a)?)?;
        self.push(value, Op::Ifft2(a))
    }

    pub fn rotate90(&mut self, a: Var, k: usize) -> Result<Var> {
        let x = self.value(a)?;
        let turns = vec![k % 4; x.shape().first().copied().unwrap_or(1)];
        let value = kernels::rotate90(x, k)?;
        self.push(value, Op::Rotate90 { input: a, turns })
    }

    /// Independent quarter-turn count per batch item.
    pub fn rotate90_each(&mut self, a: Var, turns: &[usize]) -> Result<Var> {
        let value = kernels::rotate90_each(self.value(a)?, turns)?;
        self.push(
            value,
            Op::Rotate90 {
                input: a,
                turns: turns.iter().map(|k| k % 4).collect(),
            },
        )
    }

    pub fn complex_to_channels(&mut self, a: Var) -> Result<Var> {
        let value = kernels::complex_to_channels(self.value(a)?)?;
        self.push(value, Op::ToChannels(a))
    }

    pub fn channels_to_complex(&mut self, a: Var) -> Result<Var> {
        let value = kernels::channels_to_complex(self.value(a)?)?;
        self.push(value, Op::FromChannels(a))
    }

    /// `A x`; the backward rule applies `Aᴴ`.
    pub fn apply_op(&mut self, op: &Arc<dyn LinearOperator>, x: Var) -> Result<Var> {
        let value = op.forward(self.value(x)?)?;
        self.push(
            value,
            Op::Linear {
                input: x,
                op: Arc::clone(op),
                adjoint: false,
            },
        )
    }

    /// `Aᴴ y`; the backward rule applies `A`.
    pub fn apply_adjoint(&mut self, op: &Arc<dyn LinearOperator>, y: Var) -> Result<Var> {
        let value = op.adjoint(self.value(y)?)?;
        self.push(
            value,
            Op::Linear {
                input: y,
                op: Arc::clone(op),
                adjoint: true,
            },
        )
    }

    pub fn custom(&mut self, inputs: Vec<Var>, value: Tensor, op: Box<dyn CustomOp>) -> Result<Var> {
        self.push(value, Op::Custom { inputs, op })
    }

    /// Gradients of a scalar output with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = &self.node(loss)?.value;
        if value.numel() != 1 || value.is_complex() {
            return Err(Error::Tape(format!(
                "backward needs a real scalar loss, got shape {:?}",
                value.shape()
            )));
        }
        self.vjp(loss, Tensor::with_dtype(value.shape(), DType::Real, vec![1.0])?)
    }

    /// Vector-Jacobian product: pulls `upstream` back from `output` to all
    /// recorded values. Leaves marked for gradients that the sweep never
    /// reaches receive zeros.
    pub fn vjp(&self, output: Var, upstream: Tensor) -> Result<Gradients> {
        let out = self.node(output)?;
        out.value.expect_same(&upstream, "vjp")?;
        let mut grads: Vec<Option<Tensor>> = vec![None; output.index + 1];
        grads[output.index] = Some(upstream);
        for idx in (0..=output.index).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].as_ref() else {
                continue;
            };
            let contributions = self.backward_rule(node, g)?;
            for (var, contrib) in contributions {
                if !self.nodes[var.index].requires_grad {
                    continue;
                }
                match &mut grads[var.index] {
                    Some(acc) => acc.add_assign(&contrib)?,
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let mut full: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut names = IndexMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let g = grads.get_mut(i).and_then(|g| g.take());
            let g = match (g, &node.op, node.requires_grad) {
                (Some(g), _, _) => Some(g),
                (None, Op::Leaf, true) => Some(Tensor::zeros_like(&node.value)),
                _ => None,
            };
            if let Some(n) = &node.name {
                names.insert(n.clone(), i);
            }
            full.push(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: full,
            names,
        })
    }

    fn backward_rule(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.index].value;
        let wants = |v: Var| self.nodes[v.index].requires_grad;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let grads = kernels::conv2d_backward(val(*input), val(*kernel), g, geom)?;
                let mut out = vec![(*input, grads.input), (*kernel, grads.kernel)];
                if let Some(b) = bias {
                    out.push((*b, grads.bias));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mode,
                cache,
            } => {
                let grads = kernels::batch_norm_backward(g, val(*gamma), cache, *mode)?;
                vec![
                    (*input, grads.input),
                    (*gamma, grads.gamma),
                    (*beta, grads.beta),
                ]
            }
            Op::Relu(a) => {
                let x = val(*a);
                vec![(*a, g.zip_map(x, "relu", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => {
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, g.zip_map(val(*b), "mul", |p, q| p * q)?));
                }
                if wants(*b) {
                    out.push((*b, g.zip_map(val(*a), "mul", |p, q| p * q)?));
                }
                out
            }
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::Sum(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.data()[0]))]
            }
            Op::Mse(a, b) => {
                let (x, y) = (val(*a), val(*b));
                let c = 2.0 * g.data()[0] / x.numel() as f64;
                let d = x.zip_map(y, "mse_loss", |p, q| c * (p - q))?;
                vec![(*a, d.clone()), (*b, d.scale(-1.0))]
            }
            Op::L1(a) => {
                let x = val(*a);
                let s = g.data()[0];
                let d = match x.dtype() {
                    DType::Real => x.map(|v| {
                        if v > 0.0 {
                            s
                        } else if v < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    }),
                    DType::Complex => {
                        let mut data = x.data().to_vec();
                        for c in data.chunks_exact_mut(2) {
                            let m = c[0].hypot(c[1]);
                            if m > 0.0 {
                                c[0] *= s / m;
                                c[1] *= s / m;
                            } else {
                                c[0] = 0.0;
                                c[1] = 0.0;
                            }
                        }
                        Tensor::with_dtype(x.shape(), DType::Complex, data)?
                    }
                };
                vec![(*a, d)]
            }
            Op::Fft2(a) => vec![(*a, kernels::ifft2(g)?)],
            Op::Ifft2(a) => vec![(*a, kernels::fft2(g)?)],
            Op::Rotate90 { input, turns } => {
                let inv: Vec<usize> = turns.iter().map(|k| (4 - k) % 4).collect();
                vec![(*input, kernels::rotate90_each(g, &inv)?)]
            }
            Op::ToChannels(a) => vec![(*a, kernels::channels_to_complex(g)?)],
            Op::FromChannels(a) => vec![(*a, kernels::complex_to_channels(g)?)],
            Op::Linear { input, op, adjoint } => {
                let d = if *adjoint { op.forward(g)? } else { op.adjoint(g)? };
                vec![(*input, d)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                let grads = op.backward(&vals, &node.value, g)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Tape(format!(
                        "custom op `{}` returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(v, g)| g.map(|g| (*v, g)))
                    .collect()
            }
        })
    }
}
