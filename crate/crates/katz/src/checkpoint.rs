//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "KATZ" | u32 version (1) | u32 header length | header JSON | u32 tensor count
//! per tensor: u16 name length | name | u8 rank | u64 dims… | u8 dtype | data
//! ```
//!
//! The header holds the model configuration and, when present, the
//! optimizer bookkeeping. Optimizer moments are stored as ordinary tensors
//! named `adam.m.<param>` and `adam.v.<param>`. Dtype tag 0 is f32 and 1 is
//! f64.

use std::path::Path;

use katz_core::model::ModelWeights;
use katz_core::numerics::DType;
use katz_core::train::{Stage, TrainConfig, TrainState};
use katz_core::{Model, ModelConfig, Real, RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KATZ";
pub const VERSION: u32 = 1;

const M_PREFIX: &str = "adam.m.";
const V_PREFIX: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T: Real = f32> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
    pub state: Option<TrainState<T>>,
    /// Configuration of the run that produced `state`.
    pub train_config: Option<TrainConfig>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    rng: RngStream,
    history: Vec<f64>,
    stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TrainConfig>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_model(model: &Model<T>) -> Self {
        Self {
            config: model.config.clone(),
            weights: model.weights.clone(),
            state: None,
            train_config: None,
        }
    }

    pub fn with_state(mut self, state: TrainState<T>, config: TrainConfig) -> Self {
        self.state = Some(state);
        self.train_config = Some(config);
        self
    }

    pub fn model(&self) -> Model<T> {
        Model {
            config: self.config.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn into_model(self) -> Model<T> {
        Model {
            config: self.config,
            weights: self.weights,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        self.state.as_ref().map(|s| s.stage)
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            model: self.config.clone(),
            train: self.state.as_ref().map(|s| TrainMeta {
                step: s.step,
                rng: s.rng,
                history: s.history.clone(),
                stage: s.stage,
                config: self.train_config.clone(),
            }),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut tensors: Vec<(String, &Tensor<T>)> = self
            .weights
            .named()
            .into_iter()
            .map(|(n, _, t)| (n, t))
            .collect();
        if let Some(s) = &self.state {
            tensors.extend(s.m.iter().map(|(n, t)| (format!("{M_PREFIX}{n}"), t)));
            tensors.extend(s.v.iter().map(|(n, t)| (format!("{V_PREFIX}{n}"), t)));
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
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.push(T::DTYPE.tag());
            for &x in t.data() {
                match T::DTYPE {
                    DType::F32 => out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&x.as_f64().to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.corrupt_at(0, "bad magic, not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.corrupt_at(
                4,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let len = r.u32("header length")? as usize;
        let header_at = r.pos;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)
            .map_err(|e| r.corrupt_at(header_at, format!("header JSON: {e}")))?;
        header
            .model
            .validate_shape()
            .map_err(|e| r.corrupt_at(header_at, e.to_string()))?;

        let count = r.u32("tensor count")? as usize;
        let mut params = Vec::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_at = r.pos;
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| r.corrupt_at(name_at, "tensor name is not UTF-8"))?
                .to_string();
            let rank_at = r.pos;
            let rank = r.u8("rank")? as usize;
            if !(1..=3).contains(&rank) {
                return Err(r.corrupt_at(rank_at, format!("{name}: rank {rank} not in 1..=3")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64("dimension")? as usize);
            }
            let dtype_at = r.pos;
            let tag = r.u8("dtype")?;
            let dtype = DType::from_tag(tag).ok_or_else(|| {
                r.corrupt_at(dtype_at, format!("{name}: unknown dtype tag {tag}"))
            })?;
            if dtype != T::DTYPE {
                return Err(r.corrupt_at(
                    dtype_at,
                    format!("{name}: stored as {dtype:?}, requested {:?}", T::DTYPE),
                ));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0)
                .ok_or_else(|| r.corrupt_at(rank_at, format!("{name}: invalid shape {shape:?}")))?;
            let nbytes = n
                .checked_mul(dtype.size())
                .ok_or_else(|| r.corrupt_at(rank_at, format!("{name}: tensor too large")))?;
            let data_at = r.pos;
            let raw = r.take(nbytes, "tensor data")?;
            let data: Vec<T> = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            };
            let t = Tensor::new(&shape, data).map_err(|e| r.corrupt_at(data_at, e.to_string()))?;
            if let Some(p) = name.strip_prefix(M_PREFIX) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(V_PREFIX) {
                v.push((p.to_string(), t));
            } else {
                params.push((name, t));
            }
        }
        if r.pos != bytes.len() {
            return Err(r.corrupt_at(r.pos, "trailing bytes after the last tensor"));
        }

        let end = r.pos;
        let weights = ModelWeights::from_named(&header.model, params)
            .map_err(|e| r.corrupt_at(end, e.to_string()))?;
        let (state, train_config) = match header.train {
            None => (None, None),
            Some(meta) => {
                let mut state = TrainState::new(&weights, &TrainConfig::default());
                let order: Vec<String> = state.m.iter().map(|(n, _)| n.clone()).collect();
                let arrange = |mut src: Vec<(String, Tensor<T>)>,
                               what: &str|
                 -> Result<Vec<(String, Tensor<T>)>> {
                    if src.len() != order.len() {
                        return Err(Error::CorruptCheckpoint {
                            offset: end as u64,
                            message: format!(
                                "expected {} {what} moments, found {}",
                                order.len(),
                                src.len()
                            ),
                        });
                    }
                    order
                        .iter()
                        .map(|n| {
                            let i = src.iter().position(|(s, _)| s == n).ok_or_else(|| {
                                Error::CorruptCheckpoint {
                                    offset: end as u64,
                                    message: format!("missing {what} moment for {n}"),
                                }
                            })?;
                            Ok(src.swap_remove(i))
                        })
                        .collect()
                };
                state.m = arrange(m, "first")?;
                state.v = arrange(v, "second")?;
                state.step = meta.step;
                state.rng = meta.rng;
                state.history = meta.history;
                state.stage = meta.stage;
                (Some(state), meta.config)
            }
        };
        Ok(Self {
            config: header.model,
            weights,
            state,
            train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        std::fs::write(path, self.encode()).map_err(Error::io(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        Self::decode(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn corrupt_at(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            offset: offset as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt_at(
                self.buf.len(),
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
