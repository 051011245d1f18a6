//! Binary checkpoint format with a JSON sidecar.
//!
//! ```text
//! "SISP" | u32 version | u32 tensor count
//! per tensor: u16 name length | UTF-8 name | u8 dtype | u8 rank | u32 dims[rank] | values
//! ```
//!
//! All integers and values are little-endian. Tensor names are prefixed
//! with `param.`, `best.`, `adam.m.` or `adam.v.`. The sidecar
//! (`<path>.json`) carries the model configuration, optimizer
//! hyper-parameters and free-form training metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stereoisp_tensor::{AdamConfig, AdamState, DType, ParamSet, Scalar, Shape, Tensor, BATCHES_TRACKED, RUNNING_MEAN, RUNNING_VAR};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

pub const MAGIC: &[u8; 4] = b"SISP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub model: ModelParams<T>,
    pub best: Option<ParamSet<T>>,
    pub optimizer: Option<AdamState<T>>,
    pub metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    model_config: ModelConfig,
    optimizer: Option<OptimizerMeta>,
    metadata: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn is_buffer(name: &str) -> bool {
    [RUNNING_MEAN, RUNNING_VAR, BATCHES_TRACKED].iter().any(|b| name.ends_with(&format!(".{b}")))
}

fn put_tensor<T: Scalar>(buf: &mut Vec<u8>, name: &str, shape: Shape, values: &[T]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(T::DTYPE.code());
    buf.push(4);
    for d in shape.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in values {
        match T::DTYPE {
            DType::F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

/// Serializes the tensor payload.
pub fn encode<T: Scalar>(ckpt: &Checkpoint<T>) -> Vec<u8> {
    let mut entries: Vec<(String, Shape, &[T])> = Vec::new();
    for p in ckpt.model.params.iter() {
        entries.push((format!("param.{}", p.name), p.tensor.shape(), p.tensor.data()));
    }
    if let Some(best) = &ckpt.best {
        for p in best.iter() {
            entries.push((format!("best.{}", p.name), p.tensor.shape(), p.tensor.data()));
        }
    }
    if let Some(opt) = &ckpt.optimizer {
        for (i, name) in opt.names.iter().enumerate() {
            let shape = ckpt.model.params.get(name).map(|p| p.tensor.shape()).unwrap_or(Shape::vector(opt.m[i].len()));
            entries.push((format!("adam.m.{name}"), shape, &opt.m[i]));
            entries.push((format!("adam.v.{name}"), shape, &opt.v[i]));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, values) in entries {
        put_tensor(&mut buf, &name, shape, values);
    }
    buf
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))?;
    let sidecar = Sidecar {
        format_version: FORMAT_VERSION,
        model_config: ckpt.model.config,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerMeta {
            step: o.step,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
        }),
        metadata: ckpt.metadata.clone(),
    };
    let side = sidecar_path(path);
    fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.corrupt(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn corrupt(&self, detail: impl Into<String>) -> Error {
        Error::CorruptCheckpoint { path: self.path.to_path_buf(), detail: detail.into() }
    }
}

type RawTensor<T> = (String, Shape, Vec<T>);

/// Parses the tensor payload, validating structure.
pub fn decode<T: Scalar>(path: &Path, bytes: &[u8]) -> Result<Vec<RawTensor<T>>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotACheckpoint(path.to_path_buf()));
    }
    let mut r = Reader { bytes, pos: 4, path };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { path: path.to_path_buf(), found: version, expected: FORMAT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?).map_err(|_| r.corrupt("tensor name is not UTF-8"))?.to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code).ok_or_else(|| r.corrupt(format!("unknown dtype code {code} for `{name}`")))?;
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(r.corrupt(format!("rank {rank} for `{name}`")));
        }
        let mut dims = [1usize; 4];
        for d in dims[4 - rank..].iter_mut() {
            *d = r.u32()? as usize;
        }
        let numel = dims.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d)).ok_or_else(|| r.corrupt("dimension overflow"))?;
        let raw = r.take(numel.checked_mul(dtype.size_bytes()).ok_or_else(|| r.corrupt("size overflow"))?)?;
        let values: Vec<T> = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| T::lit(f32::from_le_bytes(c.try_into().expect("4")) as f64)).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8")))).collect(),
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.corrupt(format!("non-finite value in `{name}`")));
        }
        out.push((name, Shape::from_dims(dims), values));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tensors = decode::<T>(path, &bytes)?;
    let side = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_slice(&fs::read(&side).map_err(|e| Error::io(&side, e))?)?;
    if sidecar.format_version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { path: side, found: sidecar.format_version, expected: FORMAT_VERSION });
    }
    let corrupt = |detail: String| Error::CorruptCheckpoint { path: path.to_path_buf(), detail };

    let mut params = ParamSet::new();
    let mut best = ParamSet::new();
    let mut moments: Vec<(String, Vec<T>, Option<Vec<T>>)> = Vec::new();
    for (name, shape, values) in tensors {
        let tensor = Tensor::new(shape, values)?;
        if let Some(n) = name.strip_prefix("param.") {
            params.add(n, tensor, !is_buffer(n)).map_err(|e| corrupt(e.to_string()))?;
        } else if let Some(n) = name.strip_prefix("best.") {
            best.add(n, tensor, !is_buffer(n)).map_err(|e| corrupt(e.to_string()))?;
        } else if let Some(n) = name.strip_prefix("adam.m.") {
            moments.push((n.to_string(), tensor.into_data(), None));
        } else if let Some(n) = name.strip_prefix("adam.v.") {
            match moments.last_mut() {
                Some((m_name, _, v @ None)) if m_name == n => *v = Some(tensor.into_data()),
                _ => return Err(corrupt(format!("unpaired second moment `{n}`"))),
            }
        } else {
            return Err(corrupt(format!("unexpected tensor `{name}`")));
        }
    }

    let model = ModelParams { config: sidecar.model_config, params };
    model.audit().map_err(|e| corrupt(e.to_string()))?;
    let reference = crate::model::build_model::<T>(model.config, 0)?;
    if reference.params.len() != model.params.len() {
        return Err(corrupt(format!("{} tensors, configuration needs {}", model.params.len(), reference.params.len())));
    }
    for p in reference.params.iter() {
        let got = model.params.get(&p.name).map_err(|e| corrupt(e.to_string()))?;
        if got.tensor.shape() != p.tensor.shape() {
            return Err(corrupt(format!("`{}` has shape {}, expected {}", p.name, got.tensor.shape(), p.tensor.shape())));
        }
    }

    if !best.is_empty() {
        for p in reference.params.iter() {
            let got = best.get(&p.name).map_err(|e| corrupt(format!("best weights: {e}")))?;
            if got.tensor.shape() != p.tensor.shape() {
                return Err(corrupt(format!("best `{}` has shape {}, expected {}", p.name, got.tensor.shape(), p.tensor.shape())));
            }
        }
    }

    let optimizer = match sidecar.optimizer {
        None if moments.is_empty() => None,
        None => return Err(corrupt("optimizer moments without optimizer metadata".into())),
        Some(meta) => {
            let mut state = AdamState::new(&model.params, AdamConfig { beta1: meta.beta1, beta2: meta.beta2, eps: meta.eps });
            if moments.len() != state.names.len() {
                return Err(corrupt(format!("{} moment pairs for {} parameters", moments.len(), state.names.len())));
            }
            for (i, (name, m, v)) in moments.into_iter().enumerate() {
                let v = v.ok_or_else(|| corrupt(format!("missing second moment `{name}`")))?;
                if name != state.names[i] || m.len() != state.m[i].len() || v.len() != state.v[i].len() {
                    return Err(corrupt(format!("moment `{name}` does not match parameter `{}`", state.names[i])));
                }
                state.m[i] = m;
                state.v[i] = v;
            }
            state.step = meta.step;
            Some(state)
        }
    };

    Ok(Checkpoint { model, best: (!best.is_empty()).then_some(best), optimizer, metadata: sidecar.metadata })
}
