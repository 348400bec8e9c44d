use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use uhpnet_autograd::{ParamStore, Tensor};

use super::HpuConfig;
use crate::baselines::BaselineConfig;
use crate::data::NormalizationConstants;
use crate::train::TrainConfig;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"UHPNCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Which network a parameter set belongs to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum ModelSpec {
    Hpu(HpuConfig),
    Baseline(BaselineConfig),
}

/// Adam moments and step counter of one optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub first: ParamStore<f32>,
    pub second: ParamStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub normalization: NormalizationConstants,
    pub train_config: Option<TrainConfig>,
    pub epochs_trained: usize,
    pub params: ParamStore<f32>,
    pub optimizers: BTreeMap<String, OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    model: ModelSpec,
    normalization: NormalizationConstants,
    train_config: Option<TrainConfig>,
    epochs_trained: usize,
    optimizers: BTreeMap<String, OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn moment_name(opt: &str, which: &str, param: &str) -> String {
    format!("opt/{opt}/{which}/{param}")
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(k, v)| (k.clone(), v)).collect();
        let mut optimizers = BTreeMap::new();
        for (name, o) in &self.optimizers {
            optimizers.insert(
                name.clone(),
                OptimizerHeader {
                    learning_rate: o.learning_rate,
                    beta1: o.beta1,
                    beta2: o.beta2,
                    eps: o.eps,
                    step: o.step,
                },
            );
            tensors.extend(o.first.iter().map(|(k, v)| (moment_name(name, "m", k), v)));
            tensors.extend(o.second.iter().map(|(k, v)| (moment_name(name, "v", k), v)));
        }
        let mut entries = Vec::with_capacity(tensors.len());
        let mut offset = 0;
        for (name, t) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.numel();
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            model: self.model.clone(),
            normalization: self.normalization,
            train_config: self.train_config.clone(),
            epochs_trained: self.epochs_trained,
            optimizers,
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(json.len() + offset * 4 + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(hlen))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let data = &bytes[20 + hlen..];
        let mut tensors = BTreeMap::new();
        for e in &header.tensors {
            let numel: usize = e.shape.iter().product();
            let raw = data
                .get(e.offset * 4..(e.offset + numel) * 4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {} is truncated", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, values)?);
        }
        let mut optimizers = BTreeMap::new();
        for (name, h) in header.optimizers {
            let mut first = ParamStore::new();
            let mut second = ParamStore::new();
            let m_prefix = moment_name(&name, "m", "");
            let v_prefix = moment_name(&name, "v", "");
            let keys: Vec<String> = tensors.keys().cloned().collect();
            for k in keys {
                if let Some(p) = k.strip_prefix(&m_prefix) {
                    first.insert(p.to_string(), tensors.remove(&k).expect("present"));
                } else if let Some(p) = k.strip_prefix(&v_prefix) {
                    second.insert(p.to_string(), tensors.remove(&k).expect("present"));
                }
            }
            optimizers.insert(
                name,
                OptimizerState {
                    learning_rate: h.learning_rate,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    step: h.step,
                    first,
                    second,
                },
            );
        }
        if let Some(stray) = tensors.keys().find(|k| k.starts_with("opt/")) {
            return Err(Error::Checkpoint(format!(
                "optimizer tensor {stray} has no optimizer entry"
            )));
        }
        if tensors.is_empty() {
            return Err(bad("checkpoint holds no parameters"));
        }
        Ok(Self {
            model: header.model,
            normalization: header.normalization,
            train_config: header.train_config,
            epochs_trained: header.epochs_trained,
            params: tensors,
            optimizers,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = ckpt.to_bytes()?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}
