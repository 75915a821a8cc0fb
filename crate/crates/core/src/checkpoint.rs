//! Checkpoints are safetensors archives: every parameter as a little-endian
//! f64 tensor under its stable name, plus the model configuration as JSON in
//! the `config` metadata entry.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::nn::ParamStore;

const CONFIG_KEY: &str = "config";
const FORMAT_KEY: &str = "format";
const FORMAT: &str = "ktele-f64-v1";

fn ck(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes every parameter of `ps` and `config`.
pub fn save<C: Serialize>(path: &Path, ps: &ParamStore, config: &C) -> Result<()> {
    let mut buffers = Vec::with_capacity(ps.len());
    for (name, var) in ps.named_vars() {
        let shape = var.dims().to_vec();
        let data = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
        buffers.push((name, shape, bytes));
    }
    let views = buffers
        .iter()
        .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F64, s.clone(), b).map_err(ck)?)))
        .collect::<Result<Vec<_>>>()?;
    let meta: HashMap<String, String> = [
        (CONFIG_KEY.to_string(), serde_json::to_string(config)?),
        (FORMAT_KEY.to_string(), FORMAT.to_string()),
    ]
    .into();
    safetensors::serialize_to_file(views, Some(meta), path).map_err(ck)
}

/// Tensors and configuration read from an archive.
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    config: String,
}

impl Checkpoint {
    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_str(&self.config)?)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(ck)?;
    let info = meta.metadata().clone().unwrap_or_default();
    if info.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{} is not a recognised checkpoint",
            path.display()
        )));
    }
    let config = info
        .get(CONFIG_KEY)
        .cloned()
        .ok_or_else(|| Error::Checkpoint("missing config metadata".into()))?;
    let st = SafeTensors::deserialize(&bytes).map_err(ck)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Checkpoint(format!("tensor {name} is not f64")));
        }
        let data: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        tensors.insert(name, Tensor::from_vec(data, view.shape(), &Device::Cpu)?);
    }
    Ok(Checkpoint { tensors, config })
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RestoreReport {
    pub loaded: Vec<String>,
    /// Parameters of the store absent from the checkpoint.
    pub missing: Vec<String>,
    /// Checkpoint tensors with no matching parameter.
    pub unexpected: Vec<String>,
}

/// Copies matching tensors into `ps`. Missing parameters are an error unless
/// they start with one of `optional_prefixes`.
pub fn restore(ps: &ParamStore, ckpt: &Checkpoint, optional_prefixes: &[&str]) -> Result<RestoreReport> {
    let mut report = RestoreReport::default();
    for name in ps.names() {
        match ckpt.tensors.get(name) {
            Some(t) => {
                ps.assign(name, t)?;
                report.loaded.push(name.to_string());
            }
            None if optional_prefixes.iter().any(|p| name.starts_with(p)) => report.missing.push(name.to_string()),
            None => return Err(Error::Checkpoint(format!("checkpoint lacks parameter {name}"))),
        }
    }
    report.unexpected = ckpt.tensors.keys().filter(|k| ps.get(k).is_none()).cloned().collect();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Cfg {
        width: usize,
    }

    #[test]
    fn roundtrip_and_partial_restore() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut ps = ParamStore::new(1);
        ps.normal("backbone.w", &[3, 2], 1.0).unwrap();
        ps.normal("anenc.v", &[2], 1.0).unwrap();
        save(&path, &ps, &Cfg { width: 3 }).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.config::<Cfg>().unwrap(), Cfg { width: 3 });

        let mut other = ParamStore::new(2);
        other.normal("backbone.w", &[3, 2], 1.0).unwrap();
        other.normal("anenc.v", &[2], 1.0).unwrap();
        restore(&other, &ck, &[]).unwrap();
        for n in ["backbone.w", "anenc.v"] {
            let a = ps
                .get(n)
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let b = other
                .get(n)
                .unwrap()
                .as_tensor()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            assert_eq!(a, b);
        }

        let mut ablated = ParamStore::new(3);
        ablated.normal("backbone.w", &[3, 2], 1.0).unwrap();
        let r = restore(&ablated, &ck, &[]).unwrap();
        assert_eq!(r.unexpected, vec!["anenc.v".to_string()]);

        let mut bigger = ParamStore::new(3);
        bigger.normal("backbone.w", &[3, 2], 1.0).unwrap();
        bigger.normal("anenc.extra", &[1], 1.0).unwrap();
        assert!(restore(&bigger, &ck, &[]).is_err());
        assert_eq!(
            restore(&bigger, &ck, &["anenc."]).unwrap().missing,
            vec!["anenc.extra".to_string()]
        );
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load(&path).is_err());
    }
}
