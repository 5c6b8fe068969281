//! Elementwise, shape and dense-layer operations.

use rand::Rng;

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tensor::{Scalar, Tensor};

impl Tape {
    /// `y = x W^T + b` over the last axis of `input`. `weight` is `[out, in]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        if w.ndim() != 2 || x.ndim() == 0 {
            return Err(shape_err(format!(
                "linear: input {:?} / weight {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (dout, din) = (w.shape()[0], w.shape()[1]);
        if *x.shape().last().unwrap() != din {
            return Err(shape_err(format!(
                "linear: input feature dim {} != weight in-dim {}",
                x.shape().last().unwrap(),
                din
            )));
        }
        let rows = x.len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = bias {
            let b = self.value(b);
            if b.len() != dout {
                return Err(shape_err(format!(
                    "linear: bias len {} != {}",
                    b.len(),
                    dout
                )));
            }
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(b.data());
            }
        }
        gemm(
            rows,
            din,
            dout,
            1.0,
            x.data(),
            din,
            1,
            w.data(),
            1,
            din,
            1.0,
            &mut out,
            dout,
            1,
        );
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            Tensor::new(shape, out)?,
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let y = self.value(input).map(|x| x.max(0.0));
        let rg = self.any_grad(&[input]);
        self.push(y, rg, Op::Relu { input })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        let y = self.value(input).map(Scalar::tanh);
        let rg = self.any_grad(&[input]);
        self.push(y, rg, Op::Tanh { input })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let y = self.value(input).map(sigmoid);
        let rg = self.any_grad(&[input]);
        self.push(y, rg, Op::Sigmoid { input })
    }

    /// Inverted dropout: kept activations are scaled by `1 / (1 - rate)` at
    /// train time, so evaluation is the identity and records nothing.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        input: Var,
        rate: Scalar,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(shape_err(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(input);
        }
        let keep = 1.0 - rate;
        let x = self.value(input);
        let mask: Vec<Scalar> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() < rate as f64 {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect();
        let y = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
        )?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::Dropout { input, mask }))
    }

    /// Feature-wise affine modulation `gamma[b,c] * x[b,c,...] + beta[b,c]`.
    pub fn film(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let x = self.value(input);
        let g = self.value(gamma);
        let b = self.value(beta);
        if x.ndim() < 2 {
            return Err(shape_err(format!("film: input rank {} < 2", x.ndim())));
        }
        let (batch, ch) = (x.shape()[0], x.shape()[1]);
        if g.shape() != [batch, ch] || b.shape() != [batch, ch] {
            return Err(shape_err(format!(
                "film: input {:?} needs gamma/beta [{}, {}], got {:?} / {:?}",
                x.shape(),
                batch,
                ch,
                g.shape(),
                b.shape()
            )));
        }
        let inner = x.len() / (batch * ch);
        let mut out = Vec::with_capacity(x.len());
        for (bc, chunk) in x.data().chunks_exact(inner.max(1)).enumerate() {
            let (gv, bv) = (g.data()[bc], b.data()[bc]);
            out.extend(chunk.iter().map(|v| gv * v + bv));
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(y, rg, Op::Film { input, gamma, beta }))
    }

    /// Row lookup into a `[rows, dim]` table; output `[indices.len(), dim]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.ndim() != 2 {
            return Err(shape_err("embedding table must be 2-D"));
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            if i >= rows {
                return Err(shape_err(format!("embedding index {i} >= {rows}")));
            }
            out.extend_from_slice(&t.data()[i * dim..(i + 1) * dim]);
        }
        let y = Tensor::new([indices.len(), dim], out)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            y,
            rg,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::Reshape { input }))
    }

    pub fn permute(&mut self, input: Var, perm: &[usize]) -> Result<Var> {
        let y = self.value(input).permute(perm)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(
            y,
            rg,
            Op::Permute {
                input,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.value(input);
        if axis >= x.ndim() || start + len > x.shape()[axis] {
            return Err(shape_err(format!(
                "narrow: axis {axis} range {start}..{} out of bounds for {:?}",
                start + len,
                x.shape()
            )));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let dim = x.shape()[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let y = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::Narrow { input, axis, start }))
    }

    pub fn add_scalar(&mut self, input: Var, c: Scalar) -> Var {
        let y = self.value(input).map(|x| x + c);
        let rg = self.any_grad(&[input]);
        self.push(y, rg, Op::AddScalar { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.zip_same(a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Mul { a, b }))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: Scalar = self.value(input).data().iter().sum();
        let rg = self.any_grad(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum { input })
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let p = self.value(pred);
        let t = self.value(target);
        if p.shape() != t.shape() {
            return Err(shape_err(format!(
                "mse_loss: prediction {:?} vs target {:?}",
                p.shape(),
                t.shape()
            )));
        }
        let n = p.len().max(1) as f64;
        let sse: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(
            Tensor::scalar((sse / n) as Scalar),
            rg,
            Op::MseLoss { pred, target },
        ))
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(Scalar, Scalar) -> Scalar) -> Result<Tensor> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(format!(
                "elementwise shapes differ: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(y.data())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }
}

#[inline]
pub(crate) fn sigmoid(x: Scalar) -> Scalar {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn linear_backward(
    tape: &Tape,
    input: Var,
    weight: Var,
    bias: Option<Var>,
    grad: &[Scalar],
) -> Vec<(Var, Vec<Scalar>)> {
    let x = tape.value(input);
    let w = tape.value(weight);
    let (dout, din) = (w.shape()[0], w.shape()[1]);
    let rows = x.len() / din;
    let mut out = Vec::with_capacity(3);
    if tape.requires_grad(input) {
        let mut dx = vec![0.0; x.len()];
        gemm(
            rows,
            dout,
            din,
            1.0,
            grad,
            dout,
            1,
            w.data(),
            din,
            1,
            0.0,
            &mut dx,
            din,
            1,
        );
        out.push((input, dx));
    }
    if tape.requires_grad(weight) {
        let mut dw = vec![0.0; w.len()];
        gemm(
            dout,
            rows,
            din,
            1.0,
            grad,
            1,
            dout,
            x.data(),
            din,
            1,
            0.0,
            &mut dw,
            din,
            1,
        );
        out.push((weight, dw));
    }
    if let Some(b) = bias {
        let mut db = vec![0.0; dout];
        for row in grad.chunks_exact(dout) {
            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
        }
        out.push((b, db));
    }
    out
}

pub(super) fn film_backward(
    tape: &Tape,
    input: Var,
    gamma: Var,
    beta: Var,
    grad: &[Scalar],
) -> Vec<(Var, Vec<Scalar>)> {
    let x = tape.value(input);
    let g = tape.value(gamma);
    let bc = g.len();
    let inner = x.len() / bc;
    let mut dx = vec![0.0; x.len()];
    let mut dg = vec![0.0; bc];
    let mut db = vec![0.0; bc];
    for i in 0..bc {
        let span = i * inner..(i + 1) * inner;
        let gv = g.data()[i];
        for ((d, &xv), &up) in dx[span.clone()]
            .iter_mut()
            .zip(&x.data()[span.clone()])
            .zip(&grad[span])
        {
            *d = gv * up;
            dg[i] += xv * up;
            db[i] += up;
        }
    }
    vec![(input, dx), (gamma, dg), (beta, db)]
}

pub(super) fn narrow_backward(
    tape: &Tape,
    input: Var,
    axis: usize,
    start: usize,
    out_shape: &[usize],
    grad: &[Scalar],
) -> Vec<(Var, Vec<Scalar>)> {
    let x = tape.value(input);
    let outer: usize = x.shape()[..axis].iter().product();
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let dim = x.shape()[axis];
    let len = out_shape[axis];
    let mut dx = vec![0.0; x.len()];
    for o in 0..outer {
        let base = (o * dim + start) * inner;
        let src = o * len * inner;
        dx[base..base + len * inner].copy_from_slice(&grad[src..src + len * inner]);
    }
    vec![(input, dx)]
}
