//! Versioned binary checkpoints.
//!
//! Layout: the line `IIRSNN-CHECKPOINT`, the line `version <n>`, the line
//! `header <bytes>`, a JSON header of that many bytes, then every tensor as
//! little-endian `f64` at the byte offset the header lists (relative to the
//! start of the payload).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{AnnParams, BatchNorm};
use crate::conversion::SnnParams;
use crate::error::{Error, Result};
use crate::network::NetworkSpec;
use crate::tensor::Tensor;

pub const MAGIC: &str = "IIRSNN-CHECKPOINT";
pub const VERSION: u32 = 1;

/// Position of a ChaCha8 generator, enough to resume its stream exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold 128 bits portably.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// A trained (or freshly converted) SNN with its provenance in the IIR run.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCheckpoint {
    pub params: SnnParams,
    /// Timesteps the parameters were trained (or calibrated) at.
    pub timesteps: usize,
    /// Full stage list of the run and the index of this stage in it.
    pub stages: Vec<usize>,
    pub stage_index: usize,
    pub epochs: usize,
    pub best_val_acc: Option<f64>,
    pub spike_rates: Vec<f64>,
    pub rng: RngState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnCheckpoint {
    pub params: AnnParams,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Meta {
    Snn {
        spec: NetworkSpec,
        timesteps: usize,
        stages: Vec<usize>,
        stage_index: usize,
        epochs: usize,
        best_val_acc: Option<f64>,
        spike_rates: Vec<f64>,
        rng: RngState,
    },
    Ann {
        spec: NetworkSpec,
        bn_eps: Vec<Option<f64>>,
        best_epoch: usize,
        best_val_acc: Option<f64>,
        rng: RngState,
    },
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: Meta,
    tensors: Vec<TensorEntry>,
}

fn ck_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn write_file(path: &Path, meta: Meta, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 8 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header { meta, tensors: entries }).map_err(|e| ck_err(path, e.to_string()))?;
    let mut buf = Vec::with_capacity(header.len() + offset as usize + 64);
    write!(buf, "{MAGIC}\nversion {VERSION}\nheader {}\n", header.len())?;
    buf.extend_from_slice(&header);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

fn read_line<'a>(path: &Path, bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| ck_err(path, "truncated text header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| ck_err(path, "text header is not UTF-8"))
}

struct Loaded {
    meta: Meta,
    tensors: Vec<(String, Tensor)>,
}

fn read_file(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path)?;
    let mut pos = 0;
    if read_line(path, &bytes, &mut pos)? != MAGIC {
        return Err(ck_err(path, "not a checkpoint file (bad magic)"));
    }
    let version: u32 = read_line(path, &bytes, &mut pos)?
        .strip_prefix("version ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ck_err(path, "missing version line"))?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            path: path.to_path_buf(),
            found: version,
            expected: VERSION,
        });
    }
    let len: usize = read_line(path, &bytes, &mut pos)?
        .strip_prefix("header ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| ck_err(path, "missing header length"))?;
    let json = bytes
        .get(pos..pos + len)
        .ok_or_else(|| ck_err(path, "truncated JSON header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
    let payload = &bytes[pos + len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let raw = payload
            .get(start..start + 8 * n)
            .ok_or_else(|| ck_err(path, format!("tensor {} extends past end of file", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Loaded {
        meta: header.meta,
        tensors,
    })
}

fn take(path: &Path, tensors: &mut Vec<(String, Tensor)>, name: &str) -> Result<Tensor> {
    let i = tensors
        .iter()
        .position(|(n, _)| n == name)
        .ok_or_else(|| ck_err(path, format!("missing tensor {name}")))?;
    Ok(tensors.swap_remove(i).1)
}

pub fn save_checkpoint(path: &Path, ck: &StageCheckpoint) -> Result<()> {
    let p = &ck.params;
    let thresholds = Tensor::new(vec![p.thresholds.len()], p.thresholds.clone())?;
    let leaks = Tensor::new(vec![p.leaks.len()], p.leaks.clone())?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (k, (w, b)) in p.weights.iter().zip(&p.biases).enumerate() {
        tensors.push((format!("weight.{k}"), w));
        tensors.push((format!("bias.{k}"), b));
    }
    tensors.push(("thresholds".into(), &thresholds));
    tensors.push(("leaks".into(), &leaks));
    let meta = Meta::Snn {
        spec: p.spec.clone(),
        timesteps: ck.timesteps,
        stages: ck.stages.clone(),
        stage_index: ck.stage_index,
        epochs: ck.epochs,
        best_val_acc: ck.best_val_acc,
        spike_rates: ck.spike_rates.clone(),
        rng: ck.rng.clone(),
    };
    write_file(path, meta, &tensors)
}

pub fn load_checkpoint(path: &Path) -> Result<StageCheckpoint> {
    let Loaded { meta, mut tensors } = read_file(path)?;
    let Meta::Snn {
        spec,
        timesteps,
        stages,
        stage_index,
        epochs,
        best_val_acc,
        spike_rates,
        rng,
    } = meta
    else {
        return Err(ck_err(path, "expected an SNN checkpoint, found an ANN checkpoint"));
    };
    let n = spec.weighted_layers().len();
    let mut weights = Vec::with_capacity(n);
    let mut biases = Vec::with_capacity(n);
    for k in 0..n {
        weights.push(take(path, &mut tensors, &format!("weight.{k}"))?);
        biases.push(take(path, &mut tensors, &format!("bias.{k}"))?);
    }
    let params = SnnParams {
        spec,
        weights,
        biases,
        thresholds: take(path, &mut tensors, "thresholds")?.into_data(),
        leaks: take(path, &mut tensors, "leaks")?.into_data(),
    };
    params.validate().map_err(|e| ck_err(path, e.to_string()))?;
    Ok(StageCheckpoint {
        params,
        timesteps,
        stages,
        stage_index,
        epochs,
        best_val_acc,
        spike_rates,
        rng,
    })
}

pub fn save_ann_checkpoint(path: &Path, ck: &AnnCheckpoint) -> Result<()> {
    let p = &ck.params;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (k, (w, bn)) in p.weights.iter().zip(&p.bn).enumerate() {
        tensors.push((format!("weight.{k}"), w));
        if let Some(bn) = bn {
            tensors.push((format!("bn.{k}.gamma"), &bn.gamma));
            tensors.push((format!("bn.{k}.beta"), &bn.beta));
            tensors.push((format!("bn.{k}.running_mean"), &bn.running_mean));
            tensors.push((format!("bn.{k}.running_var"), &bn.running_var));
        }
    }
    let meta = Meta::Ann {
        spec: p.spec.clone(),
        bn_eps: p.bn.iter().map(|b| b.as_ref().map(|b| b.eps)).collect(),
        best_epoch: ck.best_epoch,
        best_val_acc: ck.best_val_acc,
        rng: ck.rng.clone(),
    };
    write_file(path, meta, &tensors)
}

pub fn load_ann_checkpoint(path: &Path) -> Result<AnnCheckpoint> {
    let Loaded { meta, mut tensors } = read_file(path)?;
    let Meta::Ann {
        spec,
        bn_eps,
        best_epoch,
        best_val_acc,
        rng,
    } = meta
    else {
        return Err(ck_err(path, "expected an ANN checkpoint, found an SNN checkpoint"));
    };
    let mut weights = Vec::new();
    let mut bn = Vec::new();
    for (k, eps) in bn_eps.into_iter().enumerate() {
        weights.push(take(path, &mut tensors, &format!("weight.{k}"))?);
        bn.push(match eps {
            None => None,
            Some(eps) => Some(BatchNorm {
                gamma: take(path, &mut tensors, &format!("bn.{k}.gamma"))?,
                beta: take(path, &mut tensors, &format!("bn.{k}.beta"))?,
                running_mean: take(path, &mut tensors, &format!("bn.{k}.running_mean"))?,
                running_var: take(path, &mut tensors, &format!("bn.{k}.running_var"))?,
                eps,
            }),
        });
    }
    if weights.len() != spec.weighted_layers().len() {
        return Err(ck_err(path, "layer count does not match the network spec"));
    }
    Ok(AnnCheckpoint {
        params: AnnParams { spec, weights, bn },
        best_epoch,
        best_val_acc,
        rng,
    })
}
