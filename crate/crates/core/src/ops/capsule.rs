//! Fused tensor kernels for capsule layers and routing.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Grads, Op, Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to the norm in the squash denominator.
pub const SQUASH_EPS: f64 = 1e-8;

/// Scale factor `f(n) = n^2 / ((1 + n^2) (n + eps))` so that `squash(s) = f(|s|) s`.
#[inline]
fn squash_factor<T: Element>(n: T) -> T {
    let eps = T::from_f64(SQUASH_EPS);
    let n2 = n * n;
    n2 / ((T::one() + n2) * (n + eps))
}

/// Derivative of [`squash_factor`] with respect to `n`.
#[inline]
fn squash_factor_deriv<T: Element>(n: T) -> T {
    let eps = T::from_f64(SQUASH_EPS);
    let one = T::one();
    let two = one + one;
    let n2 = n * n;
    let den = (one + n2) * (n + eps);
    let dden = two * n * (n + eps) + (one + n2);
    (two * n * den - n2 * dden) / (den * den)
}

pub(crate) fn squash_backward<T: Element>(tape: &Tape<T>, a: Var, g: &[T], grads: &mut Grads<T>) {
    let s = tape.data(a);
    let dim = *tape.shape(a).last().expect("rank >= 1");
    let mut ga = vec![T::zero(); s.len()];
    for ((sv, gv), out) in s.chunks(dim).zip(g.chunks(dim)).zip(ga.chunks_mut(dim)) {
        let n = sv.iter().map(|&x| x * x).sum::<T>().sqrt();
        let f = squash_factor(n);
        let radial = if n > T::zero() {
            let sg: T = sv.iter().zip(gv).map(|(&x, &y)| x * y).sum();
            squash_factor_deriv(n) * sg / n
        } else {
            T::zero()
        };
        for ((o, &x), &y) in out.iter_mut().zip(sv).zip(gv) {
            *o = f * y + radial * x;
        }
    }
    grads.accumulate(a, ga);
}

fn dims4(shape: &[usize]) -> Option<[usize; 4]> {
    shape.try_into().ok()
}

fn dims3(shape: &[usize]) -> Option<[usize; 3]> {
    shape.try_into().ok()
}

pub(crate) fn predict_backward<T: Element>(
    tape: &Tape<T>,
    u: Var,
    w: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let [b, ni, din] = dims3(tape.shape(u)).expect("checked in forward");
    let [_, nj, dout, _] = dims4(tape.shape(w)).expect("checked in forward");
    let jd = nj * dout;
    let (ud, wd) = (tape.data(u), tape.data(w));
    if grads.wants(w) {
        let mut gw = vec![T::zero(); wd.len()];
        for i in 0..ni {
            // dW_i (jd x din) = dU_i^T (jd x b) * u_i (b x din)
            T::gemm(
                jd, b, din, T::one(),
                &g[i * jd..], 1, ni * jd,
                &ud[i * din..], ni * din, 1,
                T::zero(),
                &mut gw[i * jd * din..], din, 1,
            );
        }
        grads.accumulate(w, gw);
    }
    if grads.wants(u) {
        let mut gu = vec![T::zero(); ud.len()];
        for i in 0..ni {
            // du_i (b x din) = dU_i (b x jd) * W_i (jd x din)
            T::gemm(
                b, jd, din, T::one(),
                &g[i * jd..], ni * jd, 1,
                &wd[i * jd * din..], din, 1,
                T::zero(),
                &mut gu[i * din..], ni * din, 1,
            );
        }
        grads.accumulate(u, gu);
    }
}

pub(crate) fn weighted_sum_backward<T: Element>(
    tape: &Tape<T>,
    c: Var,
    uhat: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let [b, ni, nj, d] = dims4(tape.shape(uhat)).expect("checked in forward");
    let (cd, ud) = (tape.data(c), tape.data(uhat));
    if grads.wants(c) {
        let mut gc = vec![T::zero(); cd.len()];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let u = &ud[((bi * ni + i) * nj + j) * d..][..d];
                    let gs = &g[(bi * nj + j) * d..][..d];
                    gc[(bi * ni + i) * nj + j] = u.iter().zip(gs).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        grads.accumulate(c, gc);
    }
    if grads.wants(uhat) {
        let mut gu = vec![T::zero(); ud.len()];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let cij = cd[(bi * ni + i) * nj + j];
                    let gs = &g[(bi * nj + j) * d..][..d];
                    let dst = &mut gu[((bi * ni + i) * nj + j) * d..][..d];
                    for (o, &y) in dst.iter_mut().zip(gs) {
                        *o = cij * y;
                    }
                }
            }
        }
        grads.accumulate(uhat, gu);
    }
}

pub(crate) fn agreement_backward<T: Element>(
    tape: &Tape<T>,
    uhat: Var,
    v: Var,
    g: &[T],
    grads: &mut Grads<T>,
) {
    let [b, ni, nj, d] = dims4(tape.shape(uhat)).expect("checked in forward");
    let (ud, vd) = (tape.data(uhat), tape.data(v));
    if grads.wants(uhat) {
        let mut gu = vec![T::zero(); ud.len()];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let gij = g[(bi * ni + i) * nj + j];
                    let vv = &vd[(bi * nj + j) * d..][..d];
                    let dst = &mut gu[((bi * ni + i) * nj + j) * d..][..d];
                    for (o, &x) in dst.iter_mut().zip(vv) {
                        *o = gij * x;
                    }
                }
            }
        }
        grads.accumulate(uhat, gu);
    }
    if grads.wants(v) {
        let mut gv = vec![T::zero(); vd.len()];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let gij = g[(bi * ni + i) * nj + j];
                    let u = &ud[((bi * ni + i) * nj + j) * d..][..d];
                    let dst = &mut gv[(bi * nj + j) * d..][..d];
                    for (o, &x) in dst.iter_mut().zip(u) {
                        *o = *o + gij * x;
                    }
                }
            }
        }
        grads.accumulate(v, gv);
    }
}

pub(crate) fn select_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    index: &[usize],
    g: &[T],
    grads: &mut Grads<T>,
) {
    let [_, n, d] = dims3(tape.shape(a)).expect("checked in forward");
    let mut ga = vec![T::zero(); tape.value(a).numel()];
    for (bi, &k) in index.iter().enumerate() {
        ga[(bi * n + k) * d..][..d].copy_from_slice(&g[bi * d..][..d]);
    }
    grads.accumulate(a, ga);
}

pub(crate) fn mask_backward<T: Element>(
    tape: &Tape<T>,
    a: Var,
    index: &[usize],
    g: &[T],
    grads: &mut Grads<T>,
) {
    let [_, n, d] = dims3(tape.shape(a)).expect("checked in forward");
    let mut ga = vec![T::zero(); tape.value(a).numel()];
    for (bi, &k) in index.iter().enumerate() {
        let at = (bi * n + k) * d;
        ga[at..at + d].copy_from_slice(&g[at..at + d]);
    }
    grads.accumulate(a, ga);
}

fn check_index(index: &[usize], batch: usize, n: usize) -> Result<()> {
    if index.len() != batch {
        return Err(Error::shape("capsule index", &[batch], &[index.len()]));
    }
    if let Some(&bad) = index.iter().find(|&&k| k >= n) {
        return Err(Error::IndexOutOfRange { index: bad, bound: n });
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    /// Squash along the last axis: `v = |s|^2 / (1 + |s|^2) * s / (|s| + eps)`.
    pub fn squash(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let dim = *v.shape().last().expect("tensors have rank >= 1");
        let mut out = Vec::with_capacity(v.numel());
        for s in v.data().chunks(dim) {
            let n = s.iter().map(|&x| x * x).sum::<T>().sqrt();
            let f = squash_factor(n);
            out.extend(s.iter().map(|&x| x * f));
        }
        let value = Tensor::new(v.shape(), out).expect("shape preserved");
        self.push(value, Op::Squash { a })
    }

    /// Prediction vectors `uhat[b, i, j] = W[i, j] u[b, i]`.
    ///
    /// `u: [b, n_in, d_in]`, `w: [n_in, n_out, d_out, d_in]`, result
    /// `[b, n_in, n_out, d_out]`.
    pub fn capsule_predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let (us, ws) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        let (Some([b, ni, din]), Some([wi, nj, dout, wdin])) = (dims3(&us), dims4(&ws)) else {
            return Err(Error::shape("capsule_predict", &us, &ws));
        };
        if ni != wi || din != wdin {
            return Err(Error::shape("capsule_predict", &us, &ws));
        }
        let jd = nj * dout;
        let (ud, wd) = (self.data(u), self.data(w));
        let mut out = vec![T::zero(); b * ni * jd];
        for i in 0..ni {
            // U_i (b x jd) = u_i (b x din) * W_i^T (din x jd)
            T::gemm(
                b, din, jd, T::one(),
                &ud[i * din..], ni * din, 1,
                &wd[i * jd * din..], 1, din,
                T::zero(),
                &mut out[i * jd..], ni * jd, 1,
            );
        }
        let value = Tensor::new(&[b, ni, nj, dout], out)?;
        Ok(self.push(value, Op::CapsPredict { u, w }))
    }

    /// `s[b, j] = sum_i c[b, i, j] uhat[b, i, j]`; `c: [b, n_in, n_out]`.
    pub fn weighted_sum(&mut self, c: Var, uhat: Var) -> Result<Var> {
        let (cs, us) = (self.shape(c).to_vec(), self.shape(uhat).to_vec());
        let (Some([b, ni, nj]), Some([ub, ui, uj, d])) = (dims3(&cs), dims4(&us)) else {
            return Err(Error::shape("weighted_sum", &cs, &us));
        };
        if (b, ni, nj) != (ub, ui, uj) {
            return Err(Error::shape("weighted_sum", &cs, &us));
        }
        let (cd, ud) = (self.data(c), self.data(uhat));
        let mut out = vec![T::zero(); b * nj * d];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let cij = cd[(bi * ni + i) * nj + j];
                    let u = &ud[((bi * ni + i) * nj + j) * d..][..d];
                    let dst = &mut out[(bi * nj + j) * d..][..d];
                    for (o, &x) in dst.iter_mut().zip(u) {
                        *o = *o + cij * x;
                    }
                }
            }
        }
        let value = Tensor::new(&[b, nj, d], out)?;
        Ok(self.push(value, Op::WeightedSum { c, uhat }))
    }

    /// Agreement `a[b, i, j] = <uhat[b, i, j], v[b, j]>`; `v: [b, n_out, d]`.
    pub fn agreement(&mut self, uhat: Var, v: Var) -> Result<Var> {
        let (us, vs) = (self.shape(uhat).to_vec(), self.shape(v).to_vec());
        let (Some([b, ni, nj, d]), Some([vb, vj, vd])) = (dims4(&us), dims3(&vs)) else {
            return Err(Error::shape("agreement", &us, &vs));
        };
        if (b, nj, d) != (vb, vj, vd) {
            return Err(Error::shape("agreement", &us, &vs));
        }
        let (ud, vdata) = (self.data(uhat), self.data(v));
        let mut out = vec![T::zero(); b * ni * nj];
        for bi in 0..b {
            for i in 0..ni {
                for j in 0..nj {
                    let u = &ud[((bi * ni + i) * nj + j) * d..][..d];
                    let vv = &vdata[(bi * nj + j) * d..][..d];
                    out[(bi * ni + i) * nj + j] = u.iter().zip(vv).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        let value = Tensor::new(&[b, ni, nj], out)?;
        Ok(self.push(value, Op::Agreement { uhat, v }))
    }

    /// Picks capsule `index[b]` of every sample: `[b, n, d] -> [b, d]`.
    pub fn select_capsule(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some([b, n, d]) = dims3(&shape) else {
            return Err(Error::shape("select_capsule", &shape, &[index.len()]));
        };
        check_index(index, b, n)?;
        let x = self.data(a);
        let mut out = Vec::with_capacity(b * d);
        for (bi, &k) in index.iter().enumerate() {
            out.extend_from_slice(&x[(bi * n + k) * d..][..d]);
        }
        let value = Tensor::new(&[b, d], out)?;
        Ok(self.push(value, Op::SelectCapsule { a, index: index.to_vec() }))
    }

    /// Zeroes every capsule except `index[b]` and flattens: `[b, n, d] -> [b, n * d]`.
    pub fn mask_capsules(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some([b, n, d]) = dims3(&shape) else {
            return Err(Error::shape("mask_capsules", &shape, &[index.len()]));
        };
        check_index(index, b, n)?;
        let x = self.data(a);
        let mut out = vec![T::zero(); b * n * d];
        for (bi, &k) in index.iter().enumerate() {
            let at = (bi * n + k) * d;
            out[at..at + d].copy_from_slice(&x[at..at + d]);
        }
        let value = Tensor::new(&[b, n * d], out)?;
        Ok(self.push(value, Op::MaskCapsules { a, index: index.to_vec() }))
    }
}
