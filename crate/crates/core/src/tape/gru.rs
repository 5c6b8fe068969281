//! Bidirectional GRU as a single fused tape node.
//!
//! Gate layout follows the common `[reset, update, new]` stacking:
//!
//! ```text
//! r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
//! z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
//! h' = (1 - z) * n + z * h
//! ```

use super::basic::sigmoid;
use super::{Op, Tape, Var};
use crate::error::{shape_err, Result};
use crate::linalg::gemm;
use crate::tensor::{Scalar, Tensor};

/// Parameters of one direction: `w_ih [3H, D]`, `w_hh [3H, H]`, biases `[3H]`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_ih: Var,
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

impl GruParams {
    fn vars(&self) -> [Var; 4] {
        [self.w_ih, self.w_hh, self.b_ih, self.b_hh]
    }
}

/// Activations of one direction saved for backpropagation through time,
/// each laid out `[T, B, H]` in processing order.
struct DirCache {
    h_prev: Vec<Scalar>,
    r: Vec<Scalar>,
    z: Vec<Scalar>,
    n: Vec<Scalar>,
    gh_n: Vec<Scalar>,
}

pub(crate) struct GruOp {
    input: Var,
    dirs: [GruParams; 2],
    caches: [DirCache; 2],
    batch: usize,
    steps: usize,
    din: usize,
    hidden: usize,
}

impl Tape {
    /// Input `[B, T, D]` → output `[B, T, 2H]`; forward-time states occupy
    /// the first `H` features, reverse-time states the last `H`.
    pub fn gru_bidirectional(
        &mut self,
        input: Var,
        forward: GruParams,
        backward: GruParams,
    ) -> Result<Var> {
        let x = self.value(input);
        if x.ndim() != 3 {
            return Err(shape_err(format!(
                "gru: input must be [B, T, D], got {:?}",
                x.shape()
            )));
        }
        let (batch, steps, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let hidden = self
            .value(forward.w_hh)
            .shape()
            .get(1)
            .copied()
            .unwrap_or(0);
        for p in [&forward, &backward] {
            let ok = self.shape(p.w_ih) == [3 * hidden, din]
                && self.shape(p.w_hh) == [3 * hidden, hidden]
                && self.shape(p.b_ih) == [3 * hidden]
                && self.shape(p.b_hh) == [3 * hidden];
            if !ok {
                return Err(shape_err(format!(
                    "gru: parameter shapes {:?}/{:?}/{:?}/{:?} inconsistent with D={din}, H={hidden}",
                    self.shape(p.w_ih),
                    self.shape(p.w_hh),
                    self.shape(p.b_ih),
                    self.shape(p.b_hh)
                )));
            }
        }
        let mut out = vec![0.0; batch * steps * 2 * hidden];
        let c0 = self.run_direction(x, &forward, false, hidden, &mut out, 0);
        let c1 = self.run_direction(x, &backward, true, hidden, &mut out, hidden);
        let y = Tensor::new([batch, steps, 2 * hidden], out)?;
        let mut deps = vec![input];
        deps.extend(forward.vars());
        deps.extend(backward.vars());
        let rg = self.any_grad(&deps);
        Ok(self.push(
            y,
            rg,
            Op::Gru(Box::new(GruOp {
                input,
                dirs: [forward, backward],
                caches: [c0, c1],
                batch,
                steps,
                din,
                hidden,
            })),
        ))
    }

    fn run_direction(
        &self,
        x: &Tensor,
        p: &GruParams,
        reverse: bool,
        hidden: usize,
        out: &mut [Scalar],
        out_offset: usize,
    ) -> DirCache {
        let (batch, steps, din) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let h3 = 3 * hidden;
        let w_ih = self.value(p.w_ih).data();
        let w_hh = self.value(p.w_hh).data();
        let b_ih = self.value(p.b_ih).data();
        let b_hh = self.value(p.b_hh).data();

        // Input projections for every (b, t) at once: [B*T, 3H].
        let mut gx = vec![0.0; batch * steps * h3];
        for row in gx.chunks_exact_mut(h3) {
            row.copy_from_slice(b_ih);
        }
        gemm(
            batch * steps,
            din,
            h3,
            1.0,
            x.data(),
            din,
            1,
            w_ih,
            1,
            din,
            1.0,
            &mut gx,
            h3,
            1,
        );

        let bh = batch * hidden;
        let mut cache = DirCache {
            h_prev: vec![0.0; steps * bh],
            r: vec![0.0; steps * bh],
            z: vec![0.0; steps * bh],
            n: vec![0.0; steps * bh],
            gh_n: vec![0.0; steps * bh],
        };
        let mut h = vec![0.0; bh];
        let mut gh = vec![0.0; batch * h3];
        for s in 0..steps {
            let t = if reverse { steps - 1 - s } else { s };
            for row in gh.chunks_exact_mut(h3) {
                row.copy_from_slice(b_hh);
            }
            gemm(
                batch, hidden, h3, 1.0, &h, hidden, 1, w_hh, 1, hidden, 1.0, &mut gh, h3, 1,
            );
            let sl = s * bh..(s + 1) * bh;
            cache.h_prev[sl.clone()].copy_from_slice(&h);
            for b in 0..batch {
                let gxr = &gx[(b * steps + t) * h3..(b * steps + t + 1) * h3];
                let ghr = &gh[b * h3..(b + 1) * h3];
                for j in 0..hidden {
                    let k = s * bh + b * hidden + j;
                    let r = sigmoid(gxr[j] + ghr[j]);
                    let z = sigmoid(gxr[hidden + j] + ghr[hidden + j]);
                    let ghn = ghr[2 * hidden + j];
                    let n = (gxr[2 * hidden + j] + r * ghn).tanh();
                    let hp = h[b * hidden + j];
                    let hn = (1.0 - z) * n + z * hp;
                    cache.r[k] = r;
                    cache.z[k] = z;
                    cache.n[k] = n;
                    cache.gh_n[k] = ghn;
                    h[b * hidden + j] = hn;
                    out[(b * steps + t) * 2 * hidden + out_offset + j] = hn;
                }
            }
        }
        cache
    }
}

impl GruOp {
    pub(super) fn backward(&self, tape: &Tape, grad: &[Scalar]) -> Vec<(Var, Vec<Scalar>)> {
        let x = tape.value(self.input);
        let mut dx = vec![0.0; x.len()];
        let mut out = Vec::with_capacity(9);
        for (d, (p, cache)) in self.dirs.iter().zip(&self.caches).enumerate() {
            let grads =
                self.direction_backward(tape, x, p, cache, d == 1, d * self.hidden, grad, &mut dx);
            out.extend(grads);
        }
        out.push((self.input, dx));
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn direction_backward(
        &self,
        tape: &Tape,
        x: &Tensor,
        p: &GruParams,
        c: &DirCache,
        reverse: bool,
        out_offset: usize,
        grad: &[Scalar],
        dx: &mut [Scalar],
    ) -> Vec<(Var, Vec<Scalar>)> {
        let (batch, steps, din, hidden) = (self.batch, self.steps, self.din, self.hidden);
        let h3 = 3 * hidden;
        let bh = batch * hidden;
        let w_ih = tape.value(p.w_ih).data();
        let w_hh = tape.value(p.w_hh).data();

        let mut dgx = vec![0.0; batch * steps * h3];
        let mut dw_hh = vec![0.0; h3 * hidden];
        let mut db_hh = vec![0.0; h3];
        let mut dh_next = vec![0.0; bh];
        let mut dgh = vec![0.0; batch * h3];
        for s in (0..steps).rev() {
            let t = if reverse { steps - 1 - s } else { s };
            for b in 0..batch {
                for j in 0..hidden {
                    let k = s * bh + b * hidden + j;
                    let dh = grad[(b * steps + t) * 2 * hidden + out_offset + j]
                        + dh_next[b * hidden + j];
                    let (r, z, n, ghn, hp) = (c.r[k], c.z[k], c.n[k], c.gh_n[k], c.h_prev[k]);
                    let dn = dh * (1.0 - z);
                    let dz = dh * (hp - n);
                    let dn_pre = dn * (1.0 - n * n);
                    let dr_pre = dn_pre * ghn * r * (1.0 - r);
                    let dz_pre = dz * z * (1.0 - z);
                    let gxrow = (b * steps + t) * h3;
                    dgx[gxrow + j] = dr_pre;
                    dgx[gxrow + hidden + j] = dz_pre;
                    dgx[gxrow + 2 * hidden + j] = dn_pre;
                    dgh[b * h3 + j] = dr_pre;
                    dgh[b * h3 + hidden + j] = dz_pre;
                    dgh[b * h3 + 2 * hidden + j] = dn_pre * r;
                    dh_next[b * hidden + j] = dh * z;
                }
            }
            let h_prev = &c.h_prev[s * bh..(s + 1) * bh];
            // dW_hh[3H, H] += dGh^T[3H, B] * h_prev[B, H]
            gemm(
                h3, batch, hidden, 1.0, &dgh, 1, h3, h_prev, hidden, 1, 1.0, &mut dw_hh, hidden, 1,
            );
            for row in dgh.chunks_exact(h3) {
                db_hh.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            // dh_prev[B, H] += dGh[B, 3H] * W_hh[3H, H]
            gemm(
                batch,
                h3,
                hidden,
                1.0,
                &dgh,
                h3,
                1,
                w_hh,
                hidden,
                1,
                1.0,
                &mut dh_next,
                hidden,
                1,
            );
        }

        let rows = batch * steps;
        let mut dw_ih = vec![0.0; h3 * din];
        gemm(
            h3,
            rows,
            din,
            1.0,
            &dgx,
            1,
            h3,
            x.data(),
            din,
            1,
            0.0,
            &mut dw_ih,
            din,
            1,
        );
        let mut db_ih = vec![0.0; h3];
        for row in dgx.chunks_exact(h3) {
            db_ih.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        gemm(
            rows, h3, din, 1.0, &dgx, h3, 1, w_ih, din, 1, 1.0, dx, din, 1,
        );
        vec![
            (p.w_ih, dw_ih),
            (p.w_hh, dw_hh),
            (p.b_ih, db_ih),
            (p.b_hh, db_hh),
        ]
    }
}
