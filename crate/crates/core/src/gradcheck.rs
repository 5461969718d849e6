//! Central finite-difference checks of tape gradients (64-bit).
//!
//! A non-scalar output `y` is reduced to `sum(y * r)` with a fixed random
//! `r`, so every output element contributes to the checked gradient.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Tape, Var};
use crate::capsule::{cfc_forward, CfcConfig};
use crate::decoder::{Decoder, DecoderConfig, DecoderKind};
use crate::error::Result;
use crate::loss::{total_loss, LossParams};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::routing::route;
use crate::tensor::Tensor;
use crate::{seeded_rng, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)` per input.
    pub rel_errors: Vec<f64>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| num_traits::Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(n));
    if scale < 1e-12 {
        // both gradients vanish
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Compares the tape gradient of `f` with respect to every input against
/// central differences with step `h`.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad())).collect();
    let out = f(&mut tape, &vars)?;
    let out_shape = tape.shape(out).to_vec();
    let mut rng = seeded_rng(0x5eed);
    let proj: Vec<f64> = (0..tape.value(out).numel())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let proj = Tensor::new(&out_shape, proj)?;

    let reduce = |tape: &mut Tape<f64>, out: Var| -> Result<Var> {
        let r = tape.constant(proj.clone());
        let y = tape.mul(out, r)?;
        Ok(tape.sum(y))
    };
    let root = reduce(&mut tape, out)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let root = reduce(&mut tape, out)?;
        Ok(tape.data(root)[0])
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut rel_errors = Vec::with_capacity(inputs.len());
    for (k, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.numel());
        for e in 0..input.numel() {
            let x = input.data()[e];
            work[k].data_mut()[e] = x + h;
            let up = eval(&work)?;
            work[k].data_mut()[e] = x - h;
            let down = eval(&work)?;
            work[k].data_mut()[e] = x;
            numeric.push((up - down) / (2.0 * h));
        }
        rel_errors.push(rel_error(&analytic[k], &numeric));
    }
    Ok(GradReport { rel_errors })
}

/// Differentiable operations covered by [`check_case`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpCase {
    Conv2d,
    Deconv2d,
    MatMul,
    Linear,
    Elementwise,
    Activations,
    Reductions,
    Softmax,
    L2Norm,
    ShapeOps,
    Squash,
    CapsulePredict,
    WeightedSum,
    Agreement,
    SelectMask,
    LocalLinear,
    Cfc,
    Routing,
    FcDecoder,
    DeconvDecoder,
    Loss,
}

impl OpCase {
    pub const ALL: [OpCase; 21] = [
        OpCase::Conv2d,
        OpCase::Deconv2d,
        OpCase::MatMul,
        OpCase::Linear,
        OpCase::Elementwise,
        OpCase::Activations,
        OpCase::Reductions,
        OpCase::Softmax,
        OpCase::L2Norm,
        OpCase::ShapeOps,
        OpCase::Squash,
        OpCase::CapsulePredict,
        OpCase::WeightedSum,
        OpCase::Agreement,
        OpCase::SelectMask,
        OpCase::LocalLinear,
        OpCase::Cfc,
        OpCase::Routing,
        OpCase::FcDecoder,
        OpCase::DeconvDecoder,
        OpCase::Loss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpCase::Conv2d => "conv2d",
            OpCase::Deconv2d => "deconv2d",
            OpCase::MatMul => "matmul",
            OpCase::Linear => "linear",
            OpCase::Elementwise => "elementwise",
            OpCase::Activations => "relu/sigmoid",
            OpCase::Reductions => "sum/mean/sum_axis",
            OpCase::Softmax => "softmax",
            OpCase::L2Norm => "l2_norm",
            OpCase::ShapeOps => "reshape/permute/concat",
            OpCase::Squash => "squash",
            OpCase::CapsulePredict => "capsule_predict",
            OpCase::WeightedSum => "weighted_sum",
            OpCase::Agreement => "agreement",
            OpCase::SelectMask => "select/mask",
            OpCase::LocalLinear => "local_linear",
            OpCase::Cfc => "cfc",
            OpCase::Routing => "routing",
            OpCase::FcDecoder => "fc_decoder",
            OpCase::DeconvDecoder => "deconv_decoder",
            OpCase::Loss => "margin+reconstruction loss",
        }
    }
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = crate::tensor::numel(shape);
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("positive extents")
}

fn decoder_case(kind: DecoderKind, rng: &mut Rng) -> Result<GradReport> {
    let (n, d, b) = (3, 2, 2);
    let (image, config) = match kind {
        DecoderKind::Fc => (
            [1, 4, 4],
            DecoderConfig {
                fc_hidden: [5, 6],
                ..DecoderConfig::fc()
            },
        ),
        DecoderKind::Deconv => (
            [1, 8, 8],
            DecoderConfig {
                deconv_channels: [2, 2, 2],
                ..DecoderConfig::deconv()
            },
        ),
    };
    let mut builder = ParamBuilder::new();
    let decoder = Decoder::declare(&mut builder, &config, n, d, image)?;
    let store = ParamStore::<f64>::init(builder.specs(), rng);
    let mut inputs = alloc::vec![uniform(rng, &[b, n, d], -1.0, 1.0)];
    inputs.extend(store.tensors().iter().cloned());
    let index = [rng.random_range(0..n), rng.random_range(0..n)];
    check_gradients(&inputs, 1e-6, |t, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        decoder.reconstruct(t, &p, v[0], &index)
    })
}

/// Runs one random instance of `case`, drawn from `seed`.
pub fn check_case(case: OpCase, seed: u64) -> Result<GradReport> {
    let mut rng = seeded_rng(seed);
    let rng = &mut rng;
    let b = 1 + (seed % 2) as usize;
    let h = 1e-6;
    match case {
        OpCase::Conv2d => {
            let x = uniform(rng, &[b, 2, 5, 5], -1.0, 1.0);
            let k = uniform(rng, &[3, 2, 3, 3], -1.0, 1.0);
            let bias = uniform(rng, &[3], -1.0, 1.0);
            check_gradients(&[x, k, bias], h, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 2, 1))
        }
        OpCase::Deconv2d => {
            let x = uniform(rng, &[b, 3, 3, 3], -1.0, 1.0);
            let k = uniform(rng, &[3, 2, 4, 4], -1.0, 1.0);
            let bias = uniform(rng, &[2], -1.0, 1.0);
            check_gradients(&[x, k, bias], h, |t, v| t.deconv2d(v[0], v[1], Some(v[2]), 2, 1))
        }
        OpCase::MatMul => {
            let a = uniform(rng, &[b, 3, 4], -1.0, 1.0);
            let m = uniform(rng, &[4, 5], -1.0, 1.0);
            check_gradients(&[a, m], h, |t, v| t.matmul(v[0], v[1]))
        }
        OpCase::Linear => {
            let x = uniform(rng, &[b, 4], -1.0, 1.0);
            let w = uniform(rng, &[4, 3], -1.0, 1.0);
            let bias = uniform(rng, &[3], -1.0, 1.0);
            check_gradients(&[x, w, bias], h, |t, v| t.linear(v[0], v[1], Some(v[2])))
        }
        OpCase::Elementwise => {
            let a = uniform(rng, &[b, 3, 4], -1.0, 1.0);
            let c = uniform(rng, &[3, 1], -1.0, 1.0);
            let d = uniform(rng, &[4], 0.5, 1.5);
            check_gradients(&[a, c, d], h, |t, v| {
                let x = t.add(v[0], v[1])?;
                let x = t.mul(x, v[0])?;
                let x = t.sub(x, v[2])?;
                let x = t.div(x, v[2])?;
                let x = t.add_scalar(x, 0.3);
                let x = t.mul_scalar(x, -1.7);
                let x = t.neg(x);
                Ok(t.square(x))
            })
        }
        OpCase::Activations => {
            let a = uniform(rng, &[b, 6], -2.0, 2.0);
            check_gradients(&[a], h, |t, v| {
                let r = t.relu(v[0]);
                let s = t.sigmoid(v[0]);
                t.mul(r, s)
            })
        }
        OpCase::Reductions => {
            let a = uniform(rng, &[b, 3, 4], -1.0, 1.0);
            check_gradients(&[a], h, |t, v| {
                let s = t.sum_axis(v[0], 1)?;
                let s2 = t.square(s);
                let m = t.mean(v[0]);
                let total = t.sum(s2);
                t.add(total, m)
            })
        }
        OpCase::Softmax => {
            let a = uniform(rng, &[b, 3, 4], -2.0, 2.0);
            check_gradients(&[a], h, |t, v| t.softmax(v[0], 2))
        }
        OpCase::L2Norm => {
            let a = uniform(rng, &[b, 3, 4], -1.0, 1.0);
            check_gradients(&[a], h, |t, v| t.l2_norm(v[0], 2))
        }
        OpCase::ShapeOps => {
            let a = uniform(rng, &[b, 2, 3], -1.0, 1.0);
            let c = uniform(rng, &[b, 4, 3], -1.0, 1.0);
            check_gradients(&[a, c], h, |t, v| {
                let j = t.concat(&[v[0], v[1]], 1)?;
                let p = t.permute(j, &[2, 0, 1])?;
                t.reshape(p, &[3, b * 6])
            })
        }
        OpCase::Squash => {
            let a = uniform(rng, &[b, 5, 4], -1.0, 1.0);
            check_gradients(&[a], h, |t, v| Ok(t.squash(v[0])))
        }
        OpCase::CapsulePredict => {
            let u = uniform(rng, &[b, 3, 2], -1.0, 1.0);
            let w = uniform(rng, &[3, 4, 5, 2], -1.0, 1.0);
            check_gradients(&[u, w], h, |t, v| t.capsule_predict(v[0], v[1]))
        }
        OpCase::WeightedSum => {
            let c = uniform(rng, &[b, 3, 4], 0.0, 1.0);
            let uhat = uniform(rng, &[b, 3, 4, 2], -1.0, 1.0);
            check_gradients(&[c, uhat], h, |t, v| t.weighted_sum(v[0], v[1]))
        }
        OpCase::Agreement => {
            let uhat = uniform(rng, &[b, 3, 4, 2], -1.0, 1.0);
            let vv = uniform(rng, &[b, 4, 2], -1.0, 1.0);
            check_gradients(&[uhat, vv], h, |t, v| t.agreement(v[0], v[1]))
        }
        OpCase::SelectMask => {
            let a = uniform(rng, &[b, 4, 3], -1.0, 1.0);
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
            check_gradients(&[a], h, |t, v| {
                let s = t.select_capsule(v[0], &idx)?;
                let m = t.mask_capsules(v[0], &idx)?;
                let s = t.reshape(s, &[b * 3])?;
                let m = t.reshape(m, &[b * 12])?;
                t.concat(&[s, m], 0)
            })
        }
        OpCase::LocalLinear => {
            let x = uniform(rng, &[b, 2, 5, 5], -1.0, 1.0);
            let k = uniform(rng, &[4, 3, 2 * 9], -1.0, 1.0);
            let bias = uniform(rng, &[4, 3], -1.0, 1.0);
            check_gradients(&[x, k, bias], h, |t, v| t.local_linear(v[0], v[1], Some(v[2]), 3, 3, 2))
        }
        OpCase::Cfc => {
            let cfg = CfcConfig {
                kernel: 2,
                stride: 1,
                out_dim: 3,
            };
            let x = uniform(rng, &[b, 3, 4, 4], -1.0, 1.0);
            let k = uniform(rng, &[9, 3, 12], -1.0, 1.0);
            let bias = uniform(rng, &[9, 3], -1.0, 1.0);
            check_gradients(&[x, k, bias], h, |t, v| cfc_forward(t, v[0], v[1], Some(v[2]), &cfg))
        }
        OpCase::Routing => {
            let u = uniform(rng, &[b, 4, 3], -1.0, 1.0);
            let w = uniform(rng, &[4, 3, 2, 3], -1.0, 1.0);
            check_gradients(&[u, w], h, |t, v| Ok(route(t, v[0], v[1], 3, false)?.output))
        }
        OpCase::FcDecoder => decoder_case(DecoderKind::Fc, rng),
        OpCase::DeconvDecoder => decoder_case(DecoderKind::Deconv, rng),
        OpCase::Loss => {
            let caps = uniform(rng, &[b, 4, 3], -0.6, 0.6);
            let recon = uniform(rng, &[b, 1, 2, 2], 0.0, 1.0);
            let image = uniform(rng, &[b, 1, 2, 2], 0.0, 1.0);
            let targets: Vec<usize> = (0..b).map(|_| rng.random_range(0..4)).collect();
            let params = LossParams {
                recon_weight: 0.5,
                ..LossParams::default()
            };
            check_gradients(&[caps, recon], h, |t, v| {
                let x = t.constant(image.clone());
                total_loss(t, v[0], &targets, Some((v[1], x)), &params)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        let x = Tensor::from_f64(&[3], &[0.3, -0.2, 0.9]).unwrap();
        let ok = check_gradients(core::slice::from_ref(&x), 1e-6, |t, v| Ok(t.square(v[0]))).unwrap();
        assert!(ok.max_rel_error() < 1e-8);
        // detach hides the dependence from the tape
        let bad = check_gradients(&[x], 1e-6, |t, v| {
            let d = t.detach(v[0]);
            t.mul(v[0], d)
        })
        .unwrap();
        assert!(bad.max_rel_error() > 0.1);
    }
}
