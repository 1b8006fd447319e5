//! Single-file training checkpoint.
//!
//! Byte layout, all integers little endian:
//!
//! ```text
//! magic    8 bytes  "CSUNFOLD"
//! version  u32      currently 1
//! hlen     u32      length of the JSON header
//! header   hlen     UTF-8 JSON: train config, model config, epoch, step,
//!                   RNG seed and word position, optimizer rate and step
//! count    u32      number of tensors
//! tensor   repeated `count` times, sorted by name:
//!   nlen   u16      name length
//!   name   nlen     UTF-8
//!   dtype  u8       0 = f64
//!   ndim   u8
//!   dims   ndim × u64
//!   data   Π dims × f64, row-major
//! ```
//!
//! Tensor names: `param.<name>`, `bn.<name>`, `lambda.<k>`, `adam.m.<name>`,
//! `adam.v.<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::codec::Reader;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::training::TrainConfig;
use crate::unfolding::{ModelConfig, Pipeline};

pub const MAGIC: &[u8; 8] = b"CSUNFOLD";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Position of the training RNG.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn from_seed(seed: u64) -> Self {
        RngState::capture(&ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub pipeline: Pipeline,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    train: TrainConfig,
    model: ModelConfig,
    epoch: usize,
    step: u64,
    rng_seed: String,
    rng_word_pos: String,
    adam_lr: f64,
    adam_step: u64,
}

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        reason: reason.into(),
    }
}

impl Checkpoint {
    /// Untrained state for `config`.
    pub fn fresh(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Checkpoint {
            pipeline: Pipeline::new(config.model_config(), config.seed)?,
            optimizer: Adam::new(config.lr),
            epoch: 0,
            step: 0,
            rng: RngState::from_seed(config.seed.wrapping_add(0x7261_6e64)),
            config: config.clone(),
        })
    }

    fn tensors(&self) -> BTreeMap<String, &Tensor> {
        let mut out = BTreeMap::new();
        self.pipeline.params.visit(&mut |name, t| {
            out.insert(format!("param.{name}"), t);
        });
        self.pipeline.params.visit_state(&mut |name, t| {
            out.insert(format!("bn.{name}"), t);
        });
        for (name, (m, v)) in &self.optimizer.moments {
            out.insert(format!("adam.m.{name}"), m);
            out.insert(format!("adam.v.{name}"), v);
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            train: self.config.clone(),
            model: self.pipeline.config.clone(),
            epoch: self.epoch,
            step: self.step,
            rng_seed: self.rng.seed.iter().map(|b| format!("{b:02x}")).collect(),
            rng_word_pos: self.rng.word_pos.to_string(),
            adam_lr: self.optimizer.lr,
            adam_step: self.optimizer.step,
        };
        let json = serde_json::to_vec(&header).map_err(|e| format_err(e.to_string()))?;
        let lambdas: Vec<(String, Tensor)> = self
            .pipeline
            .lambdas
            .iter()
            .enumerate()
            .map(|(k, l)| (format!("lambda.{k}"), l.clone().into_dyn()))
            .collect();
        let mut tensors = self.tensors();
        for (name, t) in &lambdas {
            tensors.insert(name.clone(), t);
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(8)? != MAGIC {
            return Err(format_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| format_err(e.to_string()))?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u16()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|e| format_err(e.to_string()))?;
            if r.u8()? != DTYPE_F64 {
                return Err(format_err(format!("tensor {name} has an unknown dtype")));
            }
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let t = ArrayD::from_shape_vec(IxDyn(&dims), data).map_err(|e| format_err(e.to_string()))?;
            tensors.insert(name, t);
        }
        if !r.at_end() {
            return Err(format_err("trailing bytes"));
        }

        let mut pipeline = Pipeline::skeleton(header.model.clone())?;
        let mut fill = |name: String, slot: &mut Tensor, result: &mut Result<()>| {
            match tensors.remove(&name) {
                Some(t) if t.shape() == slot.shape() => *slot = t,
                Some(t) => {
                    *result = Err(format_err(format!(
                        "{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        slot.shape()
                    )))
                }
                None => *result = Err(format_err(format!("missing tensor {name}"))),
            }
        };
        let mut result = Ok(());
        pipeline.params.visit_mut(&mut |name, t| fill(format!("param.{name}"), t, &mut result));
        pipeline.params.visit_state_mut(&mut |name, t| fill(format!("bn.{name}"), t, &mut result));
        for (k, l) in pipeline.lambdas.iter_mut().enumerate() {
            let mut t = l.clone().into_dyn();
            fill(format!("lambda.{k}"), &mut t, &mut result);
            *l = t.into_dimensionality().unwrap();
        }
        result?;
        let mut optimizer = Adam::new(header.adam_lr);
        optimizer.step = header.adam_step;
        let moment_names: Vec<String> = tensors
            .keys()
            .filter_map(|k| k.strip_prefix("adam.m.").map(str::to_string))
            .collect();
        for name in moment_names {
            let m = tensors.remove(&format!("adam.m.{name}")).unwrap();
            let v = tensors
                .remove(&format!("adam.v.{name}"))
                .ok_or_else(|| format_err(format!("missing second moment of {name}")))?;
            optimizer.moments.insert(name, (m, v));
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(format_err(format!("unexpected tensor {extra}")));
        }
        pipeline.validate()?;

        let seed_hex = &header.rng_seed;
        if seed_hex.len() != 64 {
            return Err(format_err("RNG seed must be 64 hex digits"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|e| format_err(e.to_string()))?;
        }
        let word_pos = header.rng_word_pos.parse().map_err(|_| format_err("bad RNG word position"))?;
        Ok(Checkpoint {
            config: header.train,
            pipeline,
            optimizer,
            epoch: header.epoch,
            step: header.step,
            rng: RngState { seed, word_pos },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}
