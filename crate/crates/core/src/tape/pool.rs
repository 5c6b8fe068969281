use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) struct MaxPoolOp {
    input: Var,
    argmax: Vec<usize>,
}

impl Tape {
    /// Non-overlapping max pooling over the last two axes of `[B, C, T, F]`.
    /// Trailing rows/columns that do not fill a window are dropped.
    pub fn max_pool2d(&mut self, input: Var, window: (usize, usize)) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 4 {
            return Err(shape_err(format!(
                "max_pool2d: input must be [B, C, T, F], got {:?}",
                x.shape()
            )));
        }
        let (wt, wf) = window;
        let (b, c, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if wt == 0 || wf == 0 || t < wt || f < wf {
            return Err(shape_err(format!(
                "max_pool2d: window {wt}x{wf} does not fit {t}x{f}"
            )));
        }
        let (to, fo) = (t / wt, f / wf);
        let mut out = Vec::with_capacity(b * c * to * fo);
        let mut argmax = Vec::with_capacity(b * c * to * fo);
        for plane in 0..b * c {
            let base = plane * t * f;
            for ot in 0..to {
                for of in 0..fo {
                    let mut best = Scalar::NEG_INFINITY;
                    let mut best_idx = base + ot * wt * f + of * wf;
                    for i in 0..wt {
                        let row = base + (ot * wt + i) * f + of * wf;
                        for (j, &v) in x.data()[row..row + wf].iter().enumerate() {
                            if v > best {
                                best = v;
                                best_idx = row + j;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        let y = Tensor::new([b, c, to, fo], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::MaxPool2d(MaxPoolOp { input, argmax })))
    }
}

impl MaxPoolOp {
    pub(super) fn backward(&self, tape: &Tape, grad: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let mut dx = vec![0.0; tape.value(self.input).len()];
        for (&idx, &g) in self.argmax.iter().zip(grad) {
            dx[idx] += g;
        }
        vec![(self.input, dx)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_window_maxima_and_floors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 1, 5, 4], |i| i as Scalar));
        let y = tape.max_pool2d(x, (2, 2)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y).data(), &[5., 7., 13., 15.]);
    }
}
