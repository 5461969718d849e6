//! Parameterized conv / deconv / linear layers shared by the architectures.

use alloc::format;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::Result;
use crate::ops::conv::{conv_out_extent, deconv_out_extent};
use crate::params::{Bound, Init, ParamBuilder, ParamId};

/// Geometry of one convolutional layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub const fn new(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
            padding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    /// `[c, h, w]` produced by this layer.
    pub out_shape: [usize; 3],
}

impl Conv2d {
    pub fn declare(
        builder: &mut ParamBuilder,
        name: &str,
        in_shape: [usize; 3],
        spec: ConvSpec,
    ) -> Result<Self> {
        let [c, h, w] = in_shape;
        let oh = conv_out_extent(h, spec.kernel, spec.stride, spec.padding)?;
        let ow = conv_out_extent(w, spec.kernel, spec.stride, spec.padding)?;
        let fan_in = c * spec.kernel * spec.kernel;
        let weight = builder.add(
            format!("{name}.weight"),
            &[spec.channels, c, spec.kernel, spec.kernel],
            Init::fan_in(fan_in),
        );
        let bias = builder.add(format!("{name}.bias"), &[spec.channels], Init::fan_in(fan_in));
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            out_shape: [spec.channels, oh, ow],
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Deconv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub out_shape: [usize; 3],
}

impl Deconv2d {
    pub fn declare(
        builder: &mut ParamBuilder,
        name: &str,
        in_shape: [usize; 3],
        spec: ConvSpec,
    ) -> Result<Self> {
        let [c, h, w] = in_shape;
        let oh = deconv_out_extent(h, spec.kernel, spec.stride, spec.padding)?;
        let ow = deconv_out_extent(w, spec.kernel, spec.stride, spec.padding)?;
        let fan_in = spec.channels * spec.kernel * spec.kernel;
        let weight = builder.add(
            format!("{name}.weight"),
            &[c, spec.channels, spec.kernel, spec.kernel],
            Init::fan_in(fan_in),
        );
        let bias = builder.add(format!("{name}.bias"), &[spec.channels], Init::fan_in(fan_in));
        Ok(Self {
            weight,
            bias,
            stride: spec.stride,
            padding: spec.padding,
            out_shape: [spec.channels, oh, ow],
        })
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.deconv2d(x, p[self.weight], Some(p[self.bias]), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub out_features: usize,
}

impl Linear {
    pub fn declare(builder: &mut ParamBuilder, name: &str, in_features: usize, out_features: usize) -> Self {
        let init = Init::fan_in(in_features);
        let weight = builder.add(format!("{name}.weight"), &[in_features, out_features], init);
        let bias = builder.add(format!("{name}.bias"), &[out_features], init);
        Self {
            weight,
            bias,
            out_features,
        }
    }

    pub fn forward<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, p[self.weight], Some(p[self.bias]))
    }
}
