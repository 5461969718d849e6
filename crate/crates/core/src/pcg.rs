//! Primary Capsule Generator.
//!
//! Three feature-extraction scales of increasing depth, each followed by its
//! own CFC layer (deeper scale, wider capsules), a per-scale affine transform
//! to a shared capsule dimension, squash, concatenation along the capsule axis
//! and finally whole-capsule dropout.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::capsule::{capsule_dropout, CapsuleBundle, CfcConfig, CfcLayer, ScaleLayout};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec};
use crate::ops::conv::conv_out_extent;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::Rng;

pub const N_SCALES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ScaleConfig {
    /// Convolution stack; its length is the depth of the scale.
    pub convs: Vec<ConvSpec>,
    pub cfc: CfcConfig,
}

impl ScaleConfig {
    pub fn depth(&self) -> usize {
        self.convs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PcgConfig {
    pub scales: Vec<ScaleConfig>,
    /// Capsule dimension shared by all scales after the affine step.
    pub transform_dim: usize,
    pub dropout_rate: f64,
    /// Scale surviving capsules by `1 / (1 - rate)`. Off by default: it would
    /// change capsule lengths.
    #[cfg_attr(feature = "serde", serde(default))]
    pub dropout_rescale: bool,
}

impl Default for PcgConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl PcgConfig {
    /// Default generator: depths 1/2/3, widths 64/128/128, 5x5 kernels with
    /// stride 2 on the first two layers of a scale, CFC dims 4/6/8 and a
    /// shared 8-dimensional output. On 28x28 inputs every scale yields a 6x6
    /// capsule grid (108 capsules in total).
    pub fn standard() -> Self {
        Self::with_widths([64, 128, 128])
    }

    /// Same geometry with custom conv widths per scale.
    pub fn with_widths(widths: [usize; 3]) -> Self {
        let first = |c| ConvSpec::new(c, 5, 2, 2);
        Self {
            scales: alloc::vec![
                ScaleConfig {
                    convs: alloc::vec![first(widths[0])],
                    cfc: CfcConfig { kernel: 4, stride: 2, out_dim: 4 },
                },
                ScaleConfig {
                    convs: alloc::vec![first(widths[1]), ConvSpec::new(widths[1], 5, 2, 2)],
                    cfc: CfcConfig { kernel: 2, stride: 1, out_dim: 6 },
                },
                ScaleConfig {
                    convs: alloc::vec![
                        first(widths[2]),
                        ConvSpec::new(widths[2], 5, 2, 2),
                        ConvSpec::new(widths[2], 5, 1, 2),
                    ],
                    cfc: CfcConfig { kernel: 2, stride: 1, out_dim: 8 },
                },
            ],
            transform_dim: 8,
            dropout_rate: 0.0,
            dropout_rescale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != N_SCALES {
            return Err(Error::Config(format!(
                "the generator has exactly {N_SCALES} scales, got {}",
                self.scales.len()
            )));
        }
        if self.transform_dim == 0 {
            return Err(Error::Config("transform_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        for (s, scale) in self.scales.iter().enumerate() {
            if scale.convs.is_empty() {
                return Err(Error::Config(format!("scale {} has no conv layers", s + 1)));
            }
        }
        for pair in self.scales.windows(2) {
            if pair[1].depth() <= pair[0].depth() {
                return Err(Error::Config("scale depths must strictly increase".into()));
            }
            if pair[1].cfc.out_dim <= pair[0].cfc.out_dim {
                return Err(Error::Config(
                    "deeper scales need strictly wider CFC capsules".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Feature-map shape after the conv stack of `scale` on a `[c, h, w]` input.
fn scale_features(scale: &ScaleConfig, input: [usize; 3]) -> Result<[usize; 3]> {
    let [_, mut h, mut w] = input;
    for conv in &scale.convs {
        h = conv_out_extent(h, conv.kernel, conv.stride, conv.padding)?;
        w = conv_out_extent(w, conv.kernel, conv.stride, conv.padding)?;
    }
    let c = scale.convs.last().map_or(input[0], |c| c.channels);
    Ok([c, h, w])
}

/// Number of primary capsules the generator emits for a `[c, h, w]` input.
/// Pure geometry, independent of batch size.
pub fn count_primary_caps(config: &PcgConfig, input: [usize; 3]) -> Result<usize> {
    config.validate()?;
    config.scales.iter().try_fold(0, |acc, scale| {
        let [_, h, w] = scale_features(scale, input)?;
        let gh = conv_out_extent(h, scale.cfc.kernel, scale.cfc.stride, 0)?;
        let gw = conv_out_extent(w, scale.cfc.kernel, scale.cfc.stride, 0)?;
        Ok(acc + gh * gw)
    })
}

#[derive(Debug, Clone)]
pub struct Scale {
    pub convs: Vec<Conv2d>,
    pub cfc: CfcLayer,
    /// `[cfc.out_dim, transform_dim]`, shared by every capsule of the scale.
    pub transform: ParamId,
}

#[derive(Debug, Clone)]
pub struct Pcg {
    pub config: PcgConfig,
    pub scales: Vec<Scale>,
}

impl Pcg {
    pub fn declare(builder: &mut ParamBuilder, input: [usize; 3], config: &PcgConfig) -> Result<Self> {
        config.validate()?;
        let mut scales = Vec::with_capacity(N_SCALES);
        for (s, sc) in config.scales.iter().enumerate() {
            let mut shape = input;
            let mut convs = Vec::with_capacity(sc.convs.len());
            for (l, spec) in sc.convs.iter().enumerate() {
                let layer = Conv2d::declare(builder, &format!("pcg.scale{}.conv{}", s + 1, l + 1), shape, *spec)?;
                shape = layer.out_shape;
                convs.push(layer);
            }
            let cfc = CfcLayer::declare(builder, &format!("pcg.scale{}.cfc", s + 1), shape, sc.cfc)?;
            let transform = builder.add(
                format!("pcg.scale{}.transform", s + 1),
                &[sc.cfc.out_dim, config.transform_dim],
                Init::fan_in(sc.cfc.out_dim),
            );
            scales.push(Scale { convs, cfc, transform });
        }
        Ok(Self {
            config: config.clone(),
            scales,
        })
    }

    pub fn n_caps(&self) -> usize {
        self.scales.iter().map(|s| s.cfc.n_caps()).sum()
    }

    /// Runs the generator on `image: [b, c, h, w]`.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        image: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<CapsuleBundle> {
        self.forward_per_scale(tape, p, &[image; N_SCALES], training, rng)
    }

    /// Like [`Pcg::forward`] but each scale reads its own input tensor.
    pub fn forward_per_scale<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        inputs: &[Var; N_SCALES],
        training: bool,
        rng: &mut Rng,
    ) -> Result<CapsuleBundle> {
        let mut parts = Vec::with_capacity(N_SCALES);
        let mut layout = Vec::with_capacity(N_SCALES);
        for (scale, &input) in self.scales.iter().zip(inputs) {
            let mut x = input;
            for conv in &scale.convs {
                let y = conv.forward(tape, p, x)?;
                x = tape.relu(y);
            }
            let caps = scale.cfc.forward(tape, p, x)?;
            let moved = tape.matmul(caps, p[scale.transform])?;
            parts.push(tape.squash(moved));
            layout.push(ScaleLayout {
                n_caps: scale.cfc.n_caps(),
                dim: scale.cfc.config.out_dim,
            });
        }
        let joined = tape.concat(&parts, 1)?;
        let caps = capsule_dropout(
            tape,
            joined,
            self.config.dropout_rate,
            training,
            self.config.dropout_rescale,
            rng,
        )?;
        Ok(CapsuleBundle { caps, layout })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn standard_mnist_yields_108() {
        assert_eq!(count_primary_caps(&PcgConfig::standard(), [1, 28, 28]).unwrap(), 108);
    }

    #[test]
    fn cifar_geometry() {
        assert_eq!(count_primary_caps(&PcgConfig::standard(), [3, 32, 32]).unwrap(), 147);
    }

    #[test]
    fn invariants_are_enforced() {
        let mut cfg = PcgConfig::standard();
        cfg.scales.pop();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = PcgConfig::standard();
        cfg.scales[2].cfc.out_dim = 6;
        assert!(cfg.validate().is_err());

        let mut cfg = PcgConfig::standard();
        cfg.scales[1].convs.push(ConvSpec::new(8, 1, 1, 0));
        assert!(cfg.validate().is_err());

        let mut cfg = PcgConfig::standard();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn runtime_count_matches_geometry_and_zero_image_gives_zero_caps() {
        let cfg = PcgConfig::with_widths([4, 4, 4]);
        let mut b = ParamBuilder::new();
        let pcg = Pcg::declare(&mut b, [1, 28, 28], &cfg).unwrap();
        let mut store = ParamStore::<f32>::init(b.specs(), &mut crate::seeded_rng(0));
        for (name, t) in store.names().to_vec().iter().zip(store.tensors_mut()) {
            if name.ends_with("bias") {
                t.data_mut().fill(0.0);
            }
        }
        for batch in [1, 3] {
            let mut tape = Tape::new();
            let p = store.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::zeros(&[batch, 1, 28, 28]));
            let bundle = pcg.forward(&mut tape, &p, x, false, &mut crate::seeded_rng(0)).unwrap();
            assert_eq!(tape.shape(bundle.caps), &[batch, 108, 8]);
            assert_eq!(bundle.total_caps(), pcg.n_caps());
            assert!(tape.data(bundle.caps).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn too_small_input_is_a_geometry_error() {
        let mut b = ParamBuilder::new();
        assert!(matches!(
            Pcg::declare(&mut b, [1, 4, 4], &PcgConfig::standard()),
            Err(Error::Geometry(_))
        ));
    }
}
