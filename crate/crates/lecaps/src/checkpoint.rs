//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `LECAPSCK`, a little-endian u32 format version, a
//! little-endian u64 header length, a UTF-8 JSON header (model config,
//! training position, RNG state and a manifest of every tensor with name,
//! shape, dtype and payload offset) and finally the tensors as little-endian
//! f32 values.

use std::path::Path;

use lecaps_core::loss::Round;
use lecaps_core::model::{ModelConfig, Network};
use lecaps_core::optim::{Adam, AdamConfig};
use lecaps_core::params::ParamStore;
use lecaps_core::{DType, Rng, Tensor};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};

pub const MAGIC: &[u8; 8] = b"LECAPSCK";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to resume training bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
    /// Epochs completed in the current round.
    pub epoch: usize,
    pub round: Round,
    pub rng: Rng,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 does not survive JSON numbers; kept as a decimal string.
    word_pos: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
    /// Offset into the payload, in elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    epoch: usize,
    round: Round,
    adam_config: AdamConfig,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: &[usize], data: &[f32]| {
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                dtype: DType::F32,
                offset,
            });
            offset += data.len();
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        };
        for (i, (name, t)) in self.params.names().iter().zip(self.params.tensors()).enumerate() {
            push(format!("{PARAM}{name}"), t.shape(), t.data());
            push(format!("{MOMENT1}{name}"), t.shape(), &self.adam.m[i]);
            push(format!("{MOMENT2}{name}"), t.shape(), &self.adam.v[i]);
        }
        let header = Header {
            model: self.model.clone(),
            epoch: self.epoch,
            round: self.round,
            adam_config: self.adam.config,
            adam_step: self.adam.step,
            rng: RngState {
                seed: self.rng.get_seed(),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses a checkpoint and checks it against the manifest of its own
    /// model config. `origin` only labels errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: String| Error::format(origin, m);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(e.to_string()))?;
        let payload = &body[hlen..];
        if payload.len() % 4 != 0 {
            return Err(bad("payload is not a whole number of f32 values".into()));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();

        let net = Network::new(&header.model)?;
        let expected = 3 * net.specs.len();
        if header.tensors.len() != expected {
            return Err(Error::CheckpointMismatch(format!(
                "{} tensors stored, model needs {expected}",
                header.tensors.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (k, spec) in net.specs.iter().enumerate() {
            for (j, prefix) in [PARAM, MOMENT1, MOMENT2].iter().enumerate() {
                let e = &header.tensors[3 * k + j];
                if e.name != format!("{prefix}{}", spec.name) || e.shape != spec.shape || e.dtype != DType::F32 {
                    return Err(Error::CheckpointMismatch(format!(
                        "entry {} {:?} does not match parameter {} {:?}",
                        e.name, e.shape, spec.name, spec.shape
                    )));
                }
                let n = spec.numel();
                let data = values
                    .get(e.offset..e.offset + n)
                    .ok_or_else(|| bad(format!("payload too short for {}", e.name)))?
                    .to_vec();
                match j {
                    0 => params.push(Tensor::new(&spec.shape, data)?),
                    1 => m.push(data),
                    _ => v.push(data),
                }
            }
            names.push(spec.name.clone());
        }
        let mut rng = Rng::from_seed(header.rng.seed);
        rng.set_stream(header.rng.stream);
        rng.set_word_pos(header.rng.word_pos.parse().map_err(|_| bad("bad rng position".into()))?);
        Ok(Self {
            model: header.model,
            params: ParamStore::from_parts(names, params)?,
            adam: Adam {
                config: header.adam_config,
                step: header.adam_step,
                m,
                v,
            },
            epoch: header.epoch,
            round: header.round,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lecaps_core::seeded_rng;
    use rand::RngCore;

    fn small() -> Checkpoint {
        let model = ModelConfig::le_capsnet_small([1, 28, 28]);
        let net = Network::new(&model).unwrap();
        let params = net.init_params(&mut seeded_rng(3));
        let mut adam = Adam::new(&params, AdamConfig::default());
        adam.step = 7;
        adam.m[0][0] = 0.25;
        let mut rng = seeded_rng(11);
        rng.next_u64();
        Checkpoint {
            model,
            params,
            adam,
            epoch: 2,
            round: Round::Hard,
            rng,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = small();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        let (mut a, mut b) = (ck.rng.clone(), back.rng.clone());
        assert_eq!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn corruption_detected() {
        let bytes = small().to_bytes().unwrap();
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong_magic, Path::new("m")), Err(Error::Format { .. })));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8], Path::new("m")).is_err());
    }
}
