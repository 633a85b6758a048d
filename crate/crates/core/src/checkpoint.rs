//! Single-file checkpoints.
//!
//! Layout: the tag line `refvsrpp-ckpt-v1`, a little-endian `u64` header
//! length, a JSON header (model configuration, stage, step, RNG state and
//! the name/shape of every array), then the arrays as little-endian `f64`
//! in header order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ModelConfig, RefVsrModel};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "refvsrpp-ckpt-v1";

/// First and second moment estimates of Adam.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// Position of the training RNG stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position, as a decimal string (it is a `u128`).
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub optimizer: AdamState,
    /// 0 for a fresh initialization, otherwise the last completed stage.
    pub stage: u8,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    stage: u8,
    step: u64,
    rng: RngState,
    adam_t: u64,
    arrays: Vec<ArrayEntry>,
}

type NamedArrays<'a> = Box<dyn Iterator<Item = (&'a String, &'a Tensor)> + 'a>;

const GROUP_PARAM: &str = "param";
const GROUP_M: &str = "adam_m";
const GROUP_V: &str = "adam_v";

impl Checkpoint {
    /// Stage-0 checkpoint of a freshly initialized model.
    pub fn initial(model: &RefVsrModel) -> Checkpoint {
        Checkpoint {
            model: model.config.clone(),
            params: model.params.clone(),
            optimizer: AdamState::default(),
            stage: 0,
            step: 0,
            rng: RngState::default(),
        }
    }

    pub fn build_model(&self) -> Result<RefVsrModel> {
        RefVsrModel::from_params(self.model.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arrays = Vec::new();
        let mut payload: Vec<&Tensor> = Vec::new();
        let groups: [(&str, NamedArrays); 3] = [
            (GROUP_PARAM, Box::new(self.params.iter())),
            (GROUP_M, Box::new(self.optimizer.m.iter())),
            (GROUP_V, Box::new(self.optimizer.v.iter())),
        ];
        for (group, items) in groups {
            for (name, t) in items {
                arrays.push(ArrayEntry {
                    group: group.to_string(),
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                });
                payload.push(t);
            }
        }
        let header = Header {
            format: FORMAT_TAG.to_string(),
            model: self.model.clone(),
            stage: self.stage,
            step: self.step,
            rng: self.rng,
            adam_t: self.optimizer.t,
            arrays,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(json.len() + 64 + payload.iter().map(|t| t.len() * 8).sum::<usize>());
        out.extend_from_slice(FORMAT_TAG.as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let tag_len = FORMAT_TAG.len() + 1;
        if bytes.len() < tag_len || &bytes[..tag_len - 1] != FORMAT_TAG.as_bytes() || bytes[tag_len - 1] != b'\n' {
            let shown = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).lines().next().unwrap_or("").to_string();
            return Err(Error::Version(format!("expected format `{FORMAT_TAG}`, found `{shown}`")));
        }
        let truncated = || Error::Format("checkpoint is truncated".into());
        let mut pos = tag_len;
        let len_bytes: [u8; 8] = bytes.get(pos..pos + 8).ok_or_else(truncated)?.try_into().expect("8 bytes");
        pos += 8;
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(pos..pos.checked_add(hlen).ok_or_else(truncated)?).ok_or_else(truncated)?;
        pos += hlen;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        if header.format != FORMAT_TAG {
            return Err(Error::Version(format!("unsupported checkpoint format `{}`", header.format)));
        }
        let mut params = ParamStore::new(header.model.seed);
        let mut optimizer = AdamState {
            t: header.adam_t,
            ..Default::default()
        };
        for a in &header.arrays {
            let n: usize = a.shape.iter().product();
            let raw = bytes.get(pos..pos + n * 8).ok_or_else(truncated)?;
            pos += n * 8;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::from_vec(&a.shape, data);
            match a.group.as_str() {
                GROUP_PARAM => params.insert(&a.name, t),
                GROUP_M => {
                    optimizer.m.insert(a.name.clone(), t);
                }
                GROUP_V => {
                    optimizer.v.insert(a.name.clone(), t);
                }
                other => return Err(Error::Format(format!("unknown array group `{other}`"))),
            }
        }
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after the last array", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            model: header.model,
            params,
            optimizer,
            stage: header.stage,
            step: header.step,
            rng: header.rng,
        })
    }

    /// Write to `path` via a temporary sibling and a rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
