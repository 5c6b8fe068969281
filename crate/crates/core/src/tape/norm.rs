use serde::{Deserialize, Serialize};

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: Scalar = 1e-5;
/// Weight kept on the previous running estimate at each update.
pub const BN_MOMENTUM: Scalar = 0.9;

/// Per-channel running mean/variance used in evaluation mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Scalar>,
    pub var: Vec<Scalar>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

pub(crate) struct BatchNormOp {
    input: Var,
    gamma: Var,
    beta: Var,
    xhat: Vec<Scalar>,
    inv_std: Vec<Scalar>,
    training: bool,
}

impl Tape {
    /// Normalizes each channel (axis 1) over all other axes. In training mode
    /// batch statistics are used and `stats` is updated; otherwise `stats`
    /// is read and left untouched.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        training: bool,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() < 2 {
            return Err(shape_err(format!(
                "batch_norm: input rank {} < 2",
                x.ndim()
            )));
        }
        let (batch, ch) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (batch * ch).max(1);
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.len() != ch || b.len() != ch || stats.mean.len() != ch || stats.var.len() != ch {
            return Err(shape_err(format!(
                "batch_norm: {} channels but gamma/beta/stats have {}/{}/{}",
                ch,
                g.len(),
                b.len(),
                stats.mean.len()
            )));
        }
        let n = batch * inner;
        let mut inv_std = vec![0.0; ch];
        let mut mean = vec![0.0; ch];
        if training {
            for c in 0..ch {
                let mut s = 0.0f64;
                let mut ss = 0.0f64;
                for bi in 0..batch {
                    let base = (bi * ch + c) * inner;
                    for &v in &x.data()[base..base + inner] {
                        s += v as f64;
                        ss += (v as f64) * (v as f64);
                    }
                }
                let mu = s / n as f64;
                let var = (ss / n as f64 - mu * mu).max(0.0);
                mean[c] = mu as Scalar;
                inv_std[c] = 1.0 / ((var as Scalar) + BN_EPS).sqrt();
                let unbiased = if n > 1 {
                    var * n as f64 / (n - 1) as f64
                } else {
                    var
                };
                stats.mean[c] = BN_MOMENTUM * stats.mean[c] + (1.0 - BN_MOMENTUM) * mu as Scalar;
                stats.var[c] =
                    BN_MOMENTUM * stats.var[c] + (1.0 - BN_MOMENTUM) * unbiased as Scalar;
            }
        } else {
            for c in 0..ch {
                mean[c] = stats.mean[c];
                inv_std[c] = 1.0 / (stats.var[c] + BN_EPS).sqrt();
            }
        }
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * inner;
                let (mu, is, gv, bv) = (mean[c], inv_std[c], g.data()[c], b.data()[c]);
                for k in base..base + inner {
                    let h = (x.data()[k] - mu) * is;
                    xhat[k] = h;
                    out[k] = gv * h + bv;
                }
            }
        }
        let y = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            y,
            rg,
            Op::BatchNorm(BatchNormOp {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            }),
        ))
    }
}

impl BatchNormOp {
    pub(super) fn backward(&self, tape: &Tape, grad: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let shape = tape.shape(self.input);
        let (batch, ch) = (shape[0], shape[1]);
        let inner = self.xhat.len() / (batch * ch).max(1);
        let n = (batch * inner) as Scalar;
        let g = tape.value(self.gamma).data();
        let mut dgamma = vec![0.0; ch];
        let mut dbeta = vec![0.0; ch];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * inner;
                for k in base..base + inner {
                    dbeta[c] += grad[k];
                    dgamma[c] += grad[k] * self.xhat[k];
                }
            }
        }
        let mut dx = vec![0.0; self.xhat.len()];
        for bi in 0..batch {
            for c in 0..ch {
                let base = (bi * ch + c) * inner;
                let scale = g[c] * self.inv_std[c];
                for k in base..base + inner {
                    dx[k] = if self.training {
                        scale * (grad[k] - dbeta[c] / n - self.xhat[k] * dgamma[c] / n)
                    } else {
                        scale * grad[k]
                    };
                }
            }
        }
        vec![(self.input, dx), (self.gamma, dgamma), (self.beta, dbeta)]
    }
}
