//! Architecture configs, parameter manifests and the assembled network.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Tape, Var};
use crate::capsule::{reshape_to_primary_caps, squash};
use crate::decoder::{Decoder, DecoderConfig};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvSpec};
use crate::loss::{total_loss, LossParams};
use crate::params::{Bound, ParamBuilder, ParamSpec, ParamStore};
use crate::pcg::{count_primary_caps, Pcg, PcgConfig};
use crate::routing::{classify, DigitCaps, RoutingConfig};
use crate::tensor::Tensor;
use crate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Architecture {
    Baseline,
    Lecaps,
}

/// Conv feature extractor and conv primary-capsule layer of the original CapsNet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct BaselineConfig {
    pub conv1: ConvSpec,
    pub primary: ConvSpec,
    pub primary_dim: usize,
}

impl Default for BaselineConfig {
    /// 256 9x9 filters, then 256 9x9 stride-2 filters cut into 8-D capsules.
    fn default() -> Self {
        Self {
            conv1: ConvSpec::new(256, 9, 1, 0),
            primary: ConvSpec::new(256, 9, 2, 0),
            primary_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub name: String,
    pub architecture: Architecture,
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub n_classes: usize,
    pub class_dim: usize,
    /// Read only by the baseline architecture.
    pub baseline: BaselineConfig,
    /// Read only by LE-CapsNet.
    pub pcg: PcgConfig,
    pub routing: RoutingConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::le_capsnet([1, 28, 28])
    }
}

impl ModelConfig {
    /// Original CapsNet with the FC decoder.
    pub fn baseline(input: [usize; 3]) -> Self {
        Self {
            name: "capsnet".into(),
            architecture: Architecture::Baseline,
            input,
            n_classes: 10,
            class_dim: 16,
            baseline: BaselineConfig::default(),
            pcg: PcgConfig::standard(),
            routing: RoutingConfig::default(),
            decoder: DecoderConfig::fc(),
        }
    }

    /// LE-CapsNet: generator + routing + class-independent decoder.
    pub fn le_capsnet(input: [usize; 3]) -> Self {
        Self {
            name: "le-capsnet".into(),
            architecture: Architecture::Lecaps,
            decoder: DecoderConfig::deconv(),
            ..Self::baseline(input)
        }
    }

    /// LE-CapsNet with narrow convolutions for desk-scale runs.
    pub fn le_capsnet_small(input: [usize; 3]) -> Self {
        Self {
            name: "le-capsnet-small".into(),
            pcg: PcgConfig::with_widths([32, 48, 48]),
            decoder: DecoderConfig {
                deconv_channels: [32, 16, 8],
                ..DecoderConfig::deconv()
            },
            ..Self::le_capsnet(input)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input extents must be positive: {:?}", self.input)));
        }
        if self.n_classes < 2 || self.class_dim == 0 {
            return Err(Error::Config("need at least 2 classes and a positive class capsule dimension".into()));
        }
        if self.routing.iterations == 0 {
            return Err(Error::Config("routing needs at least one iteration".into()));
        }
        match self.architecture {
            Architecture::Baseline if self.baseline.primary_dim == 0 => {
                Err(Error::Config("primary capsule dimension must be positive".into()))
            }
            Architecture::Baseline => Ok(()),
            Architecture::Lecaps => self.pcg.validate(),
        }
    }
}

/// Number of primary capsules for a configuration; no weights are built.
pub fn primary_caps_count(config: &ModelConfig) -> Result<usize> {
    Ok(Network::new(config)?.n_primary)
}

/// Parameter manifest (names, shapes, initializers) in declaration order.
pub fn param_manifest(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    Ok(Network::new(config)?.specs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(module, count)` in declaration order.
    pub breakdown: Vec<(String, usize)>,
}

fn module_of(name: &str) -> &str {
    let mut parts = name.match_indices('.');
    let cut = if name.starts_with("pcg.") {
        parts.nth(1)
    } else {
        parts.next()
    };
    cut.map_or(name, |(i, _)| &name[..i])
}

/// Exact element count of every weight and bias, grouped by module.
pub fn count_params(config: &ModelConfig) -> Result<ParamCount> {
    let specs = param_manifest(config)?;
    let mut breakdown: Vec<(String, usize)> = Vec::new();
    for spec in &specs {
        let module = module_of(&spec.name);
        match breakdown.last_mut() {
            Some((m, n)) if m == module => *n += spec.numel(),
            _ => breakdown.push((module.into(), spec.numel())),
        }
    }
    Ok(ParamCount {
        total: specs.iter().map(ParamSpec::numel).sum(),
        breakdown,
    })
}

#[derive(Debug, Clone)]
pub enum Front {
    Baseline { conv1: Conv2d, primary: Conv2d, dim: usize },
    Lecaps(Pcg),
}

/// Layer structure of a configured network. Weights live in a separate
/// [`ParamStore`] built from [`Network::specs`].
#[derive(Debug, Clone)]
pub struct Network {
    pub config: ModelConfig,
    pub front: Front,
    pub digit: DigitCaps,
    pub decoder: Decoder,
    pub n_primary: usize,
    pub specs: Vec<ParamSpec>,
}

/// Everything a forward pass produces.
#[derive(Debug, Clone)]
pub struct Forward {
    pub primary: Var,
    pub class_caps: Var,
    pub couplings: Vec<Var>,
    /// `None` when no decoder index was given.
    pub reconstruction: Option<Var>,
}

impl Network {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new();
        let (front, n_primary, primary_dim) = match config.architecture {
            Architecture::Baseline => {
                let bc = &config.baseline;
                let conv1 = Conv2d::declare(&mut b, "conv1", config.input, bc.conv1)?;
                let primary = Conv2d::declare(&mut b, "primary", conv1.out_shape, bc.primary)?;
                let elems: usize = primary.out_shape.iter().product();
                if elems % bc.primary_dim != 0 {
                    return Err(Error::Config(format!(
                        "{elems} primary features are not divisible into {}-D capsules",
                        bc.primary_dim
                    )));
                }
                let n = elems / bc.primary_dim;
                (
                    Front::Baseline {
                        conv1,
                        primary,
                        dim: bc.primary_dim,
                    },
                    n,
                    bc.primary_dim,
                )
            }
            Architecture::Lecaps => {
                let pcg = Pcg::declare(&mut b, config.input, &config.pcg)?;
                let n = pcg.n_caps();
                debug_assert_eq!(n, count_primary_caps(&config.pcg, config.input)?);
                (Front::Lecaps(pcg), n, config.pcg.transform_dim)
            }
        };
        let digit = DigitCaps::declare(&mut b, n_primary, primary_dim, config.n_classes, config.class_dim, config.routing)?;
        let decoder = Decoder::declare(&mut b, &config.decoder, config.n_classes, config.class_dim, config.input)?;
        Ok(Self {
            config: config.clone(),
            front,
            digit,
            decoder,
            n_primary,
            specs: b.into_specs(),
        })
    }

    pub fn init_params<T: Element>(&self, rng: &mut Rng) -> ParamStore<T> {
        ParamStore::init(&self.specs, rng)
    }

    /// Primary capsules `[b, n_primary, dim]` for `images: [b, c, h, w]`.
    pub fn primary_caps<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: Var,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        match &self.front {
            Front::Baseline { conv1, primary, dim } => {
                let x = conv1.forward(tape, p, images)?;
                let x = tape.relu(x);
                let x = primary.forward(tape, p, x)?;
                let caps = reshape_to_primary_caps(tape, x, *dim)?;
                Ok(squash(tape, caps))
            }
            Front::Lecaps(pcg) => Ok(pcg.forward(tape, p, images, training, rng)?.caps),
        }
    }

    /// Full forward pass. The decoder reconstructs from capsule
    /// `decode_index[b]` when given.
    pub fn forward<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: Var,
        decode_index: Option<&[usize]>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<Forward> {
        let shape = tape.shape(images);
        if shape.len() != 4 || shape[1..] != self.config.input {
            return Err(Error::shape("network input", shape, &self.config.input));
        }
        let primary = self.primary_caps(tape, p, images, training, rng)?;
        let routed = self.digit.forward(tape, p, primary)?;
        let reconstruction = match decode_index {
            Some(idx) => Some(self.decoder.reconstruct(tape, p, routed.output, idx)?),
            None => None,
        };
        Ok(Forward {
            primary,
            class_caps: routed.output,
            couplings: routed.couplings,
            reconstruction,
        })
    }

    /// Training objective on one batch: the decoder sees the ground truth.
    /// Returns the loss handle and the forward outputs.
    #[allow(clippy::too_many_arguments)]
    pub fn loss<T: Element>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        images: Tensor<T>,
        labels: &[usize],
        loss: &LossParams,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Var, Forward)> {
        let x = tape.constant(images);
        let out = self.forward(tape, p, x, Some(labels), training, rng)?;
        let recon = out.reconstruction.map(|r| (r, x));
        let l = total_loss(tape, out.class_caps, labels, recon, loss)?;
        Ok((l, out))
    }

    /// Predictions and margin+reconstruction loss in eval mode; the decoder
    /// reconstructs from the predicted class.
    pub fn evaluate_batch<T: Element>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
        labels: &[usize],
        loss: &LossParams,
        rng: &mut Rng,
    ) -> Result<(Vec<usize>, f64)> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let primary = self.primary_caps(&mut tape, &p, x, false, rng)?;
        let routed = self.digit.forward(&mut tape, &p, primary)?;
        let preds = classify(tape.value(routed.output))?;
        let recon = self.decoder.reconstruct(&mut tape, &p, routed.output, &preds)?;
        let l = total_loss(&mut tape, routed.output, labels, Some((recon, x)), loss)?;
        Ok((preds, tape.data(l)[0].as_f64()))
    }

    /// Class predictions only (no decoder).
    pub fn predict<T: Element>(&self, store: &ParamStore<T>, images: Tensor<T>, rng: &mut Rng) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let p = store.bind_frozen(&mut tape);
        let x = tape.constant(images);
        let out = self.forward(&mut tape, &p, x, None, false, rng)?;
        classify(tape.value(out.class_caps))
    }

    /// One gradient computation: returns the loss value and the gradient of
    /// every parameter in manifest order.
    #[allow(clippy::type_complexity)]
    pub fn gradients<T: Element>(
        &self,
        store: &ParamStore<T>,
        images: Tensor<T>,
        labels: &[usize],
        loss: &LossParams,
        rng: &mut Rng,
    ) -> Result<(f64, Vec<Vec<T>>)> {
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let (l, _) = self.loss(&mut tape, &p, images, labels, loss, true, rng)?;
        tape.backward(l)?;
        let value = tape.data(l)[0].as_f64();
        Ok((value, store.grads(&tape, &p)?))
    }
}
