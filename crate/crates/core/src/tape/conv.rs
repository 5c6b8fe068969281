//! 2-D convolution (cross-correlation, stride 1) via im2col + GEMM.

use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tensor::{Scalar, Tensor};

pub(crate) struct Conv2dOp {
    input: Var,
    kernel: Var,
    bias: Var,
    geom: Geometry,
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    t: usize,
    f: usize,
    cout: usize,
    kt: usize,
    kf: usize,
    pt: usize,
    pf: usize,
    to: usize,
    fo: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.cin * self.kt * self.kf
    }

    fn out_len(&self) -> usize {
        self.to * self.fo
    }
}

impl Tape {
    /// Input `[B, Cin, T, F]`, kernel `[Cout, Cin, kT, kF]`, bias `[Cout]`,
    /// zero padding `(pT, pF)`. Odd kernels with padding `(kT/2, kF/2)`
    /// preserve the spatial size.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        padding: (usize, usize),
    ) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let b = self.value(bias);
        if x.ndim() != 4 {
            return Err(shape_err(format!(
                "conv2d: input must be [B, Cin, T, F], got {:?}",
                x.shape()
            )));
        }
        if k.ndim() != 4 {
            return Err(shape_err(format!(
                "conv2d: kernel must be [Cout, Cin, kT, kF], got {:?}",
                k.shape()
            )));
        }
        let (batch, cin, t, f) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, kcin, kt, kf) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
        if kcin != cin {
            return Err(shape_err(format!(
                "conv2d: input has {cin} channels but kernel expects {kcin}"
            )));
        }
        if kt % 2 == 0 || kf % 2 == 0 {
            return Err(shape_err(format!(
                "conv2d: kernel spatial dims must be odd, got {kt}x{kf}"
            )));
        }
        if b.len() != cout {
            return Err(shape_err(format!(
                "conv2d: bias has {} entries, expected {cout}",
                b.len()
            )));
        }
        let (pt, pf) = padding;
        if t + 2 * pt < kt || f + 2 * pf < kf {
            return Err(shape_err(format!(
                "conv2d: kernel {kt}x{kf} larger than padded input {}x{}",
                t + 2 * pt,
                f + 2 * pf
            )));
        }
        let geom = Geometry {
            batch,
            cin,
            t,
            f,
            cout,
            kt,
            kf,
            pt,
            pf,
            to: t + 2 * pt - kt + 1,
            fo: f + 2 * pf - kf + 1,
        };
        let in_item = cin * t * f;
        let out_item = cout * geom.out_len();
        let mut out = vec![0.0; batch * out_item];
        let mut cols = vec![0.0; geom.patch() * geom.out_len()];
        for bi in 0..batch {
            im2col(
                &geom,
                &x.data()[bi * in_item..(bi + 1) * in_item],
                &mut cols,
            );
            let dst = &mut out[bi * out_item..(bi + 1) * out_item];
            for (co, row) in dst.chunks_exact_mut(geom.out_len()).enumerate() {
                row.fill(b.data()[co]);
            }
            gemm(
                cout,
                geom.patch(),
                geom.out_len(),
                1.0,
                k.data(),
                geom.patch(),
                1,
                &cols,
                geom.out_len(),
                1,
                1.0,
                dst,
                geom.out_len(),
                1,
            );
        }
        let y = Tensor::new([batch, cout, geom.to, geom.fo], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            y,
            rg,
            Op::Conv2d(Conv2dOp {
                input,
                kernel,
                bias,
                geom,
            }),
        ))
    }
}

impl Conv2dOp {
    pub(super) fn backward(&self, tape: &Tape, grad: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let g = &self.geom;
        let x = tape.value(self.input);
        let k = tape.value(self.kernel);
        let in_item = g.cin * g.t * g.f;
        let out_item = g.cout * g.out_len();
        let want_x = tape.requires_grad(self.input);
        let want_k = tape.requires_grad(self.kernel);
        let mut dx = if want_x {
            vec![0.0; x.len()]
        } else {
            Vec::new()
        };
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; g.cout];
        let mut cols = vec![0.0; g.patch() * g.out_len()];
        for bi in 0..g.batch {
            let dy = &grad[bi * out_item..(bi + 1) * out_item];
            for (co, row) in dy.chunks_exact(g.out_len()).enumerate() {
                db[co] += row.iter().sum::<Scalar>();
            }
            if want_k {
                im2col(g, &x.data()[bi * in_item..(bi + 1) * in_item], &mut cols);
                // dK[Cout, P] += dY[Cout, L] * cols^T[L, P]
                gemm(
                    g.cout,
                    g.out_len(),
                    g.patch(),
                    1.0,
                    dy,
                    g.out_len(),
                    1,
                    &cols,
                    1,
                    g.out_len(),
                    1.0,
                    &mut dk,
                    g.patch(),
                    1,
                );
            }
            if want_x {
                // dcols[P, L] = K^T[P, Cout] * dY[Cout, L]
                gemm(
                    g.patch(),
                    g.cout,
                    g.out_len(),
                    1.0,
                    k.data(),
                    1,
                    g.patch(),
                    dy,
                    g.out_len(),
                    1,
                    0.0,
                    &mut cols,
                    g.out_len(),
                    1,
                );
                col2im(g, &cols, &mut dx[bi * in_item..(bi + 1) * in_item]);
            }
        }
        let mut out = vec![(self.bias, db)];
        if want_k {
            out.push((self.kernel, dk));
        }
        if want_x {
            out.push((self.input, dx));
        }
        out
    }
}

/// Valid output range along one axis for kernel tap `tap`.
#[inline]
fn valid_range(tap: usize, pad: usize, input: usize, output: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(tap);
    let hi = (input + pad).saturating_sub(tap).min(output);
    (lo, hi.max(lo))
}

fn im2col(g: &Geometry, x: &[Scalar], cols: &mut [Scalar]) {
    let l = g.out_len();
    for ci in 0..g.cin {
        let plane = &x[ci * g.t * g.f..(ci + 1) * g.t * g.f];
        for i in 0..g.kt {
            let (t_lo, t_hi) = valid_range(i, g.pt, g.t, g.to);
            for j in 0..g.kf {
                let (f_lo, f_hi) = valid_range(j, g.pf, g.f, g.fo);
                let row = ((ci * g.kt + i) * g.kf + j) * l;
                let dst = &mut cols[row..row + l];
                for ot in 0..g.to {
                    let line = &mut dst[ot * g.fo..(ot + 1) * g.fo];
                    if ot < t_lo || ot >= t_hi {
                        line.fill(0.0);
                        continue;
                    }
                    let it = ot + i - g.pt;
                    line[..f_lo].fill(0.0);
                    line[f_hi..].fill(0.0);
                    if f_hi > f_lo {
                        let src0 = it * g.f + f_lo + j - g.pf;
                        line[f_lo..f_hi].copy_from_slice(&plane[src0..src0 + (f_hi - f_lo)]);
                    }
                }
            }
        }
    }
}

fn col2im(g: &Geometry, cols: &[Scalar], dx: &mut [Scalar]) {
    let l = g.out_len();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.t * g.f..(ci + 1) * g.t * g.f];
        for i in 0..g.kt {
            let (t_lo, t_hi) = valid_range(i, g.pt, g.t, g.to);
            for j in 0..g.kf {
                let (f_lo, f_hi) = valid_range(j, g.pf, g.f, g.fo);
                if f_hi <= f_lo {
                    continue;
                }
                let row = ((ci * g.kt + i) * g.kf + j) * l;
                for ot in t_lo..t_hi {
                    let it = ot + i - g.pt;
                    let src = &cols[row + ot * g.fo + f_lo..row + ot * g.fo + f_hi];
                    let dst0 = it * g.f + f_lo + j - g.pf;
                    plane[dst0..dst0 + (f_hi - f_lo)]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}
