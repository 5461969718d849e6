//! Capsule primitives: squash, CFC translation, capsule dropout and the
//! baseline primary-capsule reshape.

use alloc::format;
use alloc::vec::Vec;
use core::ops::Range;

use rand::Rng as _;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::ops::conv::conv_out_extent;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::Tensor;
use crate::Rng;

/// A batch of capsules `[batch, n_caps, dim]` on a tape, with the capsule
/// count and (pre-transform) dimension of every scale it was built from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapsuleBundle {
    pub caps: Var,
    pub layout: Vec<ScaleLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleLayout {
    pub n_caps: usize,
    pub dim: usize,
}

impl CapsuleBundle {
    pub fn single(caps: Var, n_caps: usize, dim: usize) -> Self {
        Self {
            caps,
            layout: alloc::vec![ScaleLayout { n_caps, dim }],
        }
    }

    pub fn total_caps(&self) -> usize {
        self.layout.iter().map(|s| s.n_caps).sum()
    }

    /// Capsule index range occupied by scale `s`.
    pub fn scale_range(&self, s: usize) -> Range<usize> {
        let start: usize = self.layout[..s].iter().map(|l| l.n_caps).sum();
        start..start + self.layout[s].n_caps
    }
}

/// Squash along the last axis.
pub fn squash<T: Element>(tape: &mut Tape<T>, s: Var) -> Var {
    tape.squash(s)
}

/// Geometry of a CFC layer: receptive field, stride and capsule dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct CfcConfig {
    pub kernel: usize,
    pub stride: usize,
    pub out_dim: usize,
}

/// A CFC layer: one kernel set per spatial output position, each translating
/// its receptive field into one capsule.
#[derive(Debug, Clone)]
pub struct CfcLayer {
    pub config: CfcConfig,
    /// `[positions, out_dim, c * k * k]`
    pub kernels: ParamId,
    /// `[positions, out_dim]`
    pub bias: ParamId,
    pub grid: (usize, usize),
}

impl CfcLayer {
    pub fn declare(
        builder: &mut ParamBuilder,
        name: &str,
        in_shape: [usize; 3],
        config: CfcConfig,
    ) -> Result<Self> {
        let [c, h, w] = in_shape;
        if config.out_dim == 0 {
            return Err(Error::Config(format!("{name}: capsule dimension must be positive")));
        }
        let gh = conv_out_extent(h, config.kernel, config.stride, 0)?;
        let gw = conv_out_extent(w, config.kernel, config.stride, 0)?;
        let patch = c * config.kernel * config.kernel;
        let kernels = builder.add(
            format!("{name}.kernels"),
            &[gh * gw, config.out_dim, patch],
            Init::fan_in(patch),
        );
        let bias = builder.add(format!("{name}.bias"), &[gh * gw, config.out_dim], Init::fan_in(patch));
        Ok(Self {
            config,
            kernels,
            bias,
            grid: (gh, gw),
        })
    }

    pub fn n_caps(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// `[b, c, h, w] -> [b, positions, out_dim]`, squashed.
    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        cfc_forward(tape, features, p[self.kernels], Some(p[self.bias]), &self.config)
    }
}

/// CFC translation on explicit weights: every output position `(i, j)` is
/// produced only by kernel set `i * grid_w + j` over its receptive field, then
/// squashed.
pub fn cfc_forward<T: Element>(
    tape: &mut Tape<T>,
    features: Var,
    kernels: Var,
    bias: Option<Var>,
    config: &CfcConfig,
) -> Result<Var> {
    let local = tape.local_linear(features, kernels, bias, config.kernel, config.kernel, config.stride)?;
    Ok(tape.squash(local))
}

/// Draws which capsules survive: `true` = kept. Each capsule is dropped
/// independently with probability `rate`.
pub fn dropout_mask(n: usize, rate: f64, rng: &mut Rng) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    Ok((0..n).map(|_| rate == 0.0 || !rng.random_bool(rate)).collect())
}

/// Whole-capsule dropout on `[b, n, d]`.
///
/// In training mode every capsule is zeroed (all components) with
/// probability `rate`; dropped capsules receive zero gradient. Survivors are
/// scaled by `1 / (1 - rate)` only if `rescale` is set. In eval mode the input
/// handle is returned untouched.
pub fn capsule_dropout<T: Element>(
    tape: &mut Tape<T>,
    caps: Var,
    rate: f64,
    training: bool,
    rescale: bool,
    rng: &mut Rng,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(caps);
    }
    let shape = tape.shape(caps).to_vec();
    let [b, n, _] = shape[..] else {
        return Err(Error::shape("capsule_dropout", &shape, &[0, 0, 0]));
    };
    let keep = if rescale { T::from_f64(1.0 / (1.0 - rate)) } else { T::one() };
    let mask: Vec<T> = dropout_mask(b * n, rate, rng)?
        .into_iter()
        .map(|k| if k { keep } else { T::zero() })
        .collect();
    let mask = tape.constant(Tensor::new(&[b, n, 1], mask)?);
    tape.mul(caps, mask)
}

/// Baseline primary capsules: reinterprets `[b, c, h, w]` as
/// `[b, c * h * w / dim, dim]` (row-major, no copy of meaning).
pub fn reshape_to_primary_caps<T: Element>(tape: &mut Tape<T>, features: Var, dim: usize) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    let [b, c, h, w] = shape[..] else {
        return Err(Error::shape("reshape_to_primary_caps", &shape, &[dim]));
    };
    let total = c * h * w;
    if dim == 0 || total % dim != 0 {
        return Err(Error::InvalidArgument(format!(
            "feature map of {total} elements is not divisible into capsules of dimension {dim}"
        )));
    }
    tape.reshape(features, &[b, total / dim, dim])
}
