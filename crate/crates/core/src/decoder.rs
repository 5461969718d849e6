//! Reconstruction networks.
//!
//! The FC decoder reads all class capsules with every capsule except the
//! selected one masked to zero. The class-independent decoder reads only the
//! selected capsule and upsamples it with transposed convolutions, so the
//! reconstruction cannot depend on which class was picked.

use alloc::format;

use crate::autograd::{Tape, Var};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec, Deconv2d, Linear};
use crate::params::{Bound, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum DecoderKind {
    Fc,
    Deconv,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    /// Hidden widths of the FC decoder.
    pub fc_hidden: [usize; 2],
    /// Channels of the projected map and of the two upsampling stages of the
    /// deconvolutional decoder.
    pub deconv_channels: [usize; 3],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self::deconv()
    }
}

impl DecoderConfig {
    pub fn fc() -> Self {
        Self {
            kind: DecoderKind::Fc,
            fc_hidden: [512, 1024],
            deconv_channels: [64, 32, 16],
        }
    }

    pub fn deconv() -> Self {
        Self {
            kind: DecoderKind::Deconv,
            ..Self::fc()
        }
    }
}

/// `[b, n, d] -> [b, n * d]` with every capsule but `index[b]` zeroed.
pub fn mask_all_but_correct<T: Element>(tape: &mut Tape<T>, caps: Var, index: &[usize]) -> Result<Var> {
    tape.mask_capsules(caps, index)
}

/// `[b, n, d] -> [b, d]`: capsule `index[b]` of every sample.
pub fn select_correct<T: Element>(tape: &mut Tape<T>, caps: Var, index: &[usize]) -> Result<Var> {
    tape.select_capsule(caps, index)
}

#[derive(Debug, Clone)]
pub struct FcDecoder {
    pub layers: [Linear; 3],
    pub image: [usize; 3],
}

impl FcDecoder {
    pub fn declare(builder: &mut ParamBuilder, n_classes: usize, caps_dim: usize, image: [usize; 3], hidden: [usize; 2]) -> Self {
        let pixels = image.iter().product();
        let l1 = Linear::declare(builder, "decoder.fc1", n_classes * caps_dim, hidden[0]);
        let l2 = Linear::declare(builder, "decoder.fc2", hidden[0], hidden[1]);
        let l3 = Linear::declare(builder, "decoder.fc3", hidden[1], pixels);
        Self {
            layers: [l1, l2, l3],
            image,
        }
    }

    /// `masked: [b, n_classes * caps_dim] -> [b, c, h, w]` in (0, 1).
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, masked: Var) -> Result<Var> {
        let b = tape.shape(masked)[0];
        let h1 = self.layers[0].forward(tape, p, masked)?;
        let h1 = tape.relu(h1);
        let h2 = self.layers[1].forward(tape, p, h1)?;
        let h2 = tape.relu(h2);
        let out = self.layers[2].forward(tape, p, h2)?;
        let out = tape.sigmoid(out);
        let [c, h, w] = self.image;
        tape.reshape(out, &[b, c, h, w])
    }
}

#[derive(Debug, Clone)]
pub struct DeconvDecoder {
    pub project: Linear,
    pub base: [usize; 3],
    pub up1: Deconv2d,
    pub up2: Deconv2d,
    pub head: Conv2d,
    pub image: [usize; 3],
}

impl DeconvDecoder {
    /// FC projection to `channels[0] x h/4 x w/4`, two stride-2 transposed
    /// convolutions (4x4, padding 1) and a 1x1 convolution to the image channels.
    pub fn declare(builder: &mut ParamBuilder, caps_dim: usize, image: [usize; 3], channels: [usize; 3]) -> Result<Self> {
        let [c, h, w] = image;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Geometry(format!(
                "deconvolutional decoder needs image extents divisible by 4, got {h}x{w}"
            )));
        }
        let base = [channels[0], h / 4, w / 4];
        let project = Linear::declare(builder, "decoder.project", caps_dim, base.iter().product());
        let up1 = Deconv2d::declare(builder, "decoder.deconv1", base, ConvSpec::new(channels[1], 4, 2, 1))?;
        let up2 = Deconv2d::declare(builder, "decoder.deconv2", up1.out_shape, ConvSpec::new(channels[2], 4, 2, 1))?;
        let head = Conv2d::declare(builder, "decoder.head", up2.out_shape, ConvSpec::new(c, 1, 1, 0))?;
        debug_assert_eq!(head.out_shape, image);
        Ok(Self {
            project,
            base,
            up1,
            up2,
            head,
            image,
        })
    }

    /// `selected: [b, caps_dim] -> [b, c, h, w]` in (0, 1).
    pub fn decode<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, selected: Var) -> Result<Var> {
        let b = tape.shape(selected)[0];
        let x = self.project.forward(tape, p, selected)?;
        let x = tape.relu(x);
        let [c, h, w] = self.base;
        let x = tape.reshape(x, &[b, c, h, w])?;
        let x = self.up1.forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = self.up2.forward(tape, p, x)?;
        let x = tape.relu(x);
        let x = self.head.forward(tape, p, x)?;
        Ok(tape.sigmoid(x))
    }
}

#[derive(Debug, Clone)]
pub enum Decoder {
    Fc(FcDecoder),
    Deconv(DeconvDecoder),
}

impl Decoder {
    pub fn declare(
        builder: &mut ParamBuilder,
        config: &DecoderConfig,
        n_classes: usize,
        caps_dim: usize,
        image: [usize; 3],
    ) -> Result<Self> {
        Ok(match config.kind {
            DecoderKind::Fc => Decoder::Fc(FcDecoder::declare(builder, n_classes, caps_dim, image, config.fc_hidden)),
            DecoderKind::Deconv => Decoder::Deconv(DeconvDecoder::declare(builder, caps_dim, image, config.deconv_channels)?),
        })
    }

    /// Reconstructs images from class capsules `[b, n_classes, dim]`, keeping
    /// capsule `index[b]` of each sample (ground truth in training, prediction
    /// at inference).
    pub fn reconstruct<T: Element>(&self, tape: &mut Tape<T>, p: &Bound, caps: Var, index: &[usize]) -> Result<Var> {
        match self {
            Decoder::Fc(d) => {
                let masked = mask_all_but_correct(tape, caps, index)?;
                d.decode(tape, p, masked)
            }
            Decoder::Deconv(d) => {
                let selected = select_correct(tape, caps, index)?;
                d.decode(tape, p, selected)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn mask_and_select_reference() {
        let mut tape = Tape::<f64>::new();
        let caps = tape.constant(Tensor::from_f64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let masked = mask_all_but_correct(&mut tape, caps, &[0]).unwrap();
        let selected = select_correct(&mut tape, caps, &[0]).unwrap();
        assert_eq!(tape.data(masked), &[1.0, 2.0, 0.0, 0.0]);
        assert_eq!(tape.data(selected), &[1.0, 2.0]);
    }

    #[test]
    fn select_shape_per_batch() {
        let mut tape = Tape::<f32>::new();
        let caps = tape.constant(Tensor::full(&[5, 10, 16], 0.1));
        let s = select_correct(&mut tape, caps, &[0, 1, 2, 3, 9]).unwrap();
        assert_eq!(tape.shape(s), &[5, 16]);
        assert!(matches!(
            select_correct(&mut tape, caps, &[0, 1, 2, 3, 10]),
            Err(Error::IndexOutOfRange { index: 10, bound: 10 })
        ));
        assert!(select_correct(&mut tape, caps, &[0]).is_err());
    }

    #[test]
    fn deconv_decoder_rejects_odd_geometry() {
        let mut b = ParamBuilder::new();
        assert!(DeconvDecoder::declare(&mut b, 16, [1, 30, 30], [64, 32, 16]).is_err());
    }
}
