//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are only ever appended, so node index
//! order is a topological order and [`Tape::backward`] simply walks it in
//! reverse, visiting each node once. Gradients flowing into a node from
//! several consumers are summed.

mod basic;
mod conv;
mod gru;
mod norm;
mod pool;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub use gru::GruParams;
pub use norm::RunningStats;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Conv2d(conv::Conv2dOp),
    BatchNorm(norm::BatchNormOp),
    Gru(Box<gru::GruOp>),
    MaxPool2d(pool::MaxPoolOp),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    Relu {
        input: Var,
    },
    Tanh {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Dropout {
        input: Var,
        mask: Vec<Scalar>,
    },
    Film {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Reshape {
        input: Var,
    },
    Permute {
        input: Var,
        perm: Vec<usize>,
    },
    Narrow {
        input: Var,
        axis: usize,
        start: usize,
    },
    AddScalar {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        input: Var,
    },
    MseLoss {
        pred: Var,
        target: Var,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<Scalar>>,
    requires_grad: bool,
    op: Op,
}

/// Records a forward computation so that it can be differentiated.
#[derive(Default)]
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

    /// A differentiable input (parameter or probe).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A non-differentiable input (data, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated into `v` by the last [`backward`](Self::backward).
    pub fn grad(&self, v: Var) -> Option<&[Scalar]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    pub(crate) fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Backpropagate from a scalar output, seeding its gradient with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        self.backward_with(output, vec![1.0])
    }

    /// Backpropagate an explicit upstream gradient for `output`.
    pub fn backward_with(&mut self, output: Var, seed: Vec<Scalar>) -> Result<()> {
        if seed.len() != self.value(output).len() {
            return Err(shape_err("backward seed length differs from output size"));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[output.0].grad = Some(seed);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.node_backward(i, &grad);
            self.nodes[i].grad = Some(grad);
            for (var, g) in contributions {
                self.accumulate(var, g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, g: Vec<Scalar>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        debug_assert_eq!(g.len(), node.value.len());
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
            None => node.grad = Some(g),
        }
    }

    fn node_backward(&self, i: usize, grad: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Conv2d(op) => op.backward(self, grad),
            Op::BatchNorm(op) => op.backward(self, grad),
            Op::Gru(op) => op.backward(self, grad),
            Op::MaxPool2d(op) => op.backward(self, grad),
            Op::Linear {
                input,
                weight,
                bias,
            } => basic::linear_backward(self, *input, *weight, *bias, grad),
            Op::Relu { input } => {
                let x = self.value(*input).data();
                let g = x
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(*input, g)]
            }
            Op::Tanh { input } => {
                let g = out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * (1.0 - y * y))
                    .collect();
                vec![(*input, g)]
            }
            Op::Sigmoid { input } => {
                let g = out
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                vec![(*input, g)]
            }
            Op::Dropout { input, mask } => {
                let g = mask.iter().zip(grad).map(|(m, g)| m * g).collect();
                vec![(*input, g)]
            }
            Op::Film { input, gamma, beta } => {
                basic::film_backward(self, *input, *gamma, *beta, grad)
            }
            Op::Embedding { table, indices } => {
                let dim = self.shape(*table)[1];
                let mut g = vec![0.0; self.value(*table).len()];
                for (row, &idx) in indices.iter().enumerate() {
                    let src = &grad[row * dim..(row + 1) * dim];
                    g[idx * dim..(idx + 1) * dim]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                vec![(*table, g)]
            }
            Op::Reshape { input } | Op::AddScalar { input } => vec![(*input, grad.to_vec())],
            Op::Permute { input, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let g = Tensor::new(out.shape().to_vec(), grad.to_vec())
                    .and_then(|t| t.permute(&inverse))
                    .expect("permute backward");
                vec![(*input, g.into_data())]
            }
            Op::Narrow { input, axis, start } => {
                basic::narrow_backward(self, *input, *axis, *start, out.shape(), grad)
            }
            Op::Add { a, b } => vec![(*a, grad.to_vec()), (*b, grad.to_vec())],
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let ga = grad.iter().zip(bv).map(|(g, b)| g * b).collect();
                let gb = grad.iter().zip(av).map(|(g, a)| g * a).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::Sum { input } => vec![(*input, vec![grad[0]; self.value(*input).len()])],
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred).data();
                let t = self.value(*target).data();
                let scale = 2.0 * grad[0] / p.len() as Scalar;
                let gp: Vec<Scalar> = p.iter().zip(t).map(|(p, t)| scale * (p - t)).collect();
                let gt = gp.iter().map(|g| -g).collect();
                vec![(*pred, gp), (*target, gt)]
            }
        }
    }
}
