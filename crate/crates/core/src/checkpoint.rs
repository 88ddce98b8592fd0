//! Checkpoint files.
//!
//! Layout: the line `reschunk-checkpoint v1`, one line of JSON header
//! (`config`, `param_count`, `tensors`), then the raw little-endian `f64`
//! data of every tensor in header order. Trainable tensors come first, then
//! `normalizer.mean` and `normalizer.std`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_layers::ParamSet;
use crate::model::{ModelConfig, ModelParams, Normalizer};

pub const MAGIC: &str = "reschunk-checkpoint v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub config: ModelConfig,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
}

fn named_tensors(params: &ModelParams) -> Vec<(String, Array2<f64>)> {
    let mut out = Vec::new();
    params.visit("", &mut |n, a| out.push((n, a.clone())));
    let row = |v: &Array1<f64>| v.clone().insert_axis(ndarray::Axis(0));
    out.push(("normalizer.mean".into(), row(&params.normalizer.mean)));
    out.push(("normalizer.std".into(), row(&params.normalizer.std)));
    out
}

pub fn to_bytes(params: &ModelParams, cfg: &ModelConfig) -> Result<Vec<u8>> {
    params.check(cfg)?;
    let tensors = named_tensors(params);
    let header = Header {
        config: cfg.clone(),
        param_count: params.param_count(),
        tensors: tensors
            .iter()
            .map(|(n, a)| TensorEntry { name: n.clone(), shape: [a.nrows(), a.ncols()], dtype: "f64le".into() })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(serde_json::to_string(&header).map_err(|e| Error::Checkpoint(e.to_string()))?.as_bytes());
    out.push(b'\n');
    for (_, a) in &tensors {
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let line = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((line, &bytes[end + 1..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let (magic, rest) = split_line(bytes)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("not a checkpoint (first line {magic:?})")));
    }
    let (head, mut data) = split_line(rest)?;
    let header: Header = serde_json::from_str(head).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let cfg = header.config;
    cfg.validate().map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;

    let mut stored: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for t in &header.tensors {
        if t.dtype != "f64le" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", t.name, t.dtype)));
        }
        let n = t.shape[0] * t.shape[1];
        if data.len() < 8 * n {
            return Err(Error::Checkpoint(format!("{}: data truncated", t.name)));
        }
        let values = data[..8 * n].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        data = &data[8 * n..];
        let a = Array2::from_shape_vec((t.shape[0], t.shape[1]), values).expect("length matches shape");
        if stored.insert(t.name.clone(), a).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
        }
    }
    if !data.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", data.len())));
    }

    let mut params = ModelParams::init(&cfg, 0)?;
    let mut missing = None;
    let mut mismatch = None;
    params.visit_mut("", &mut |name, a| match stored.remove(&name) {
        Some(s) if s.dim() == a.dim() => *a = s,
        Some(s) => {
            mismatch.get_or_insert(format!("{name}: stored shape {:?}, config expects {:?}", s.dim(), a.dim()));
        }
        None => {
            missing.get_or_insert(name);
        }
    });
    let k = cfg.k();
    let mut take_row = |name: &str| -> Result<Array1<f64>> {
        let a = stored.remove(name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if a.dim() != (1, k) {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected (1, {k})", a.dim())));
        }
        Ok(a.row(0).to_owned())
    };
    if let Some(name) = missing {
        return Err(Error::Checkpoint(format!("missing tensor {name}")));
    }
    if let Some(msg) = mismatch {
        return Err(Error::Checkpoint(msg));
    }
    params.normalizer = Normalizer { mean: take_row("normalizer.mean")?, std: take_row("normalizer.std")? };
    if let Some(name) = stored.keys().next() {
        return Err(Error::Checkpoint(format!("unknown tensor {name}")));
    }
    if params.param_count() != header.param_count {
        return Err(Error::Checkpoint("param_count does not match the tensors".into()));
    }
    Ok((params, cfg))
}

pub fn save(path: &Path, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    std::fs::write(path, to_bytes(params, cfg)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    from_bytes(&std::fs::read(path)?)
}
