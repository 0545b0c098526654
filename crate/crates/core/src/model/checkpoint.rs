//! Checkpoint archives.
//!
//! A checkpoint is one safetensors file. Tensor names are hierarchical and
//! stable (`model.backbone.stage0.weight`, `model.head.reid.bias`,
//! `optim.velocity.head.conv1.weight`, `bank.features`, ...). Conv weights are
//! stored as `(c_out, c_in * 9)` with the kernel flattened as
//! `(c_in, ky, kx)`; linear weights as `(out, in)`. The string metadata map
//! carries JSON-encoded records such as the config hash, epoch and seed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use super::real::Real;
use super::NetParams;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorData {
    pub fn from_slice<R: Real>(shape: &[usize], values: impl IntoIterator<Item = R>) -> Self {
        let mut bytes = Vec::new();
        for v in values {
            v.write_le(&mut bytes);
        }
        TensorData {
            dtype: R::DTYPE,
            shape: shape.to_vec(),
            bytes,
        }
    }

    pub fn to_array<R: Real>(&self) -> Result<ArrayD<R>> {
        let values: Vec<R> = match self.dtype {
            Dtype::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|b| R::lit(f32::read_le(b) as f64))
                .collect(),
            Dtype::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|b| R::lit(f64::read_le(b)))
                .collect(),
            other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
        };
        ArrayD::from_shape_vec(IxDyn(&self.shape), values)
            .map_err(|e| Error::Checkpoint(format!("bad tensor shape: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, TensorData>,
    pub metadata: BTreeMap<String, String>,
}

/// Header key recording the archive layout version.
pub const FORMAT_KEY: &str = "format";
pub const FORMAT_VERSION: &str = "dicl-checkpoint-v1";

impl Checkpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_KEY.to_string(), FORMAT_VERSION.to_string());
        Checkpoint {
            tensors: BTreeMap::new(),
            metadata,
        }
    }

    pub fn put_params<R: Real>(&mut self, prefix: &str, params: &NetParams<R>) {
        for (name, t) in params.named() {
            let data = TensorData::from_slice::<R>(t.shape(), t.iter().copied());
            self.tensors.insert(format!("{prefix}.{name}"), data);
        }
    }

    /// Overwrites every tensor of `params` from the archive; shapes must match.
    pub fn take_params<R: Real>(&self, prefix: &str, params: &mut NetParams<R>) -> Result<()> {
        for (name, mut t) in params.named_mut() {
            let key = format!("{prefix}.{name}");
            let data = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            let arr = data.to_array::<R>()?;
            if arr.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {key} has shape {:?}, expected {:?}",
                    arr.shape(),
                    t.shape()
                )));
            }
            t.assign(&arr);
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let views: Vec<(String, TensorView<'_>)> = checkpoint
        .tensors
        .iter()
        .map(|(k, t)| {
            TensorView::new(t.dtype, t.shape.clone(), &t.bytes)
                .map(|v| (k.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("tensor {k}: {e:?}")))
        })
        .collect::<Result<_>>()?;
    let meta: HashMap<String, String> = checkpoint.metadata.clone().into_iter().collect();
    let bytes = safetensors::serialize(views, &Some(meta))
        .map_err(|e| Error::Checkpoint(format!("serialize: {e:?}")))?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bad = |e: safetensors::SafeTensorError| Error::Load {
        path: path.to_path_buf(),
        reason: format!("not a checkpoint archive: {e:?}"),
    };
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(bad)?;
    let metadata: BTreeMap<String, String> = header
        .metadata()
        .clone()
        .unwrap_or_default()
        .into_iter()
        .collect();
    if metadata.get(FORMAT_KEY).map(String::as_str) != Some(FORMAT_VERSION) {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "unknown checkpoint format".into(),
        });
    }
    let st = SafeTensors::deserialize(&bytes).map_err(bad)?;
    let tensors = st
        .tensors()
        .into_iter()
        .map(|(k, v)| {
            (
                k,
                TensorData {
                    dtype: v.dtype(),
                    shape: v.shape().to_vec(),
                    bytes: v.data().to_vec(),
                },
            )
        })
        .collect();
    Ok(Checkpoint { tensors, metadata })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn params_round_trip_through_file() {
        let cfg = ModelConfig::desk();
        let params = NetParams::<f32>::init(&cfg, 3);
        let mut ck = Checkpoint::new();
        ck.put_params("model", &params);
        ck.metadata.insert("epoch".into(), "2".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        save_checkpoint(&ck, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, ck);
        let mut restored = NetParams::<f32>::init(&cfg, 4);
        assert_ne!(restored, params);
        back.take_params("model", &mut restored).unwrap();
        assert_eq!(restored, params);
    }

    #[test]
    fn garbage_and_shape_mismatch_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Load { .. })));

        let small = NetParams::<f32>::init(&ModelConfig::desk(), 0);
        let mut ck = Checkpoint::new();
        ck.put_params("model", &small);
        let mut big = NetParams::<f32>::init(&ModelConfig::default(), 0);
        assert!(matches!(ck.take_params("model", &mut big), Err(Error::Checkpoint(_))));
    }
}
