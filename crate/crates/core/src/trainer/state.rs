//! Training-state checkpoints.
//!
//! Tensors: `model.*` (network), `optim.velocity.*` (SGD momentum buffers),
//! `bank.features` `(instances, dim)` and `bank.centroids` `(clusters, dim)`.
//! Metadata keys: `format`, `config_hash`, `train_config` (JSON),
//! `model_config` (JSON), `epoch`, `step`, `seed`, `data_fingerprint`,
//! `bank_keys`, `bank_clusters` (`-1` for outliers), `bank_updated_at`.

use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use super::{TrainConfig, TrainState};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::membank::{InstanceKey, MemoryBank};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, NetParams, SiameseNet, TensorData};
use crate::synth::DatasetManifest;

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";

/// Identifying metadata of a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub config_hash: String,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub data_fingerprint: String,
    pub config: TrainConfig,
}

/// SHA-256 over scene ids, boxes, identities and quantized pixels.
pub fn manifest_fingerprint(manifest: &DatasetManifest) -> String {
    let mut h = Sha256::new();
    h.update(manifest.split.as_str().as_bytes());
    h.update(manifest.seed.to_le_bytes());
    for s in &manifest.samples {
        h.update(s.scene_id.to_le_bytes());
        for b in &s.boxes {
            for v in [b.x1, b.y1, b.x2, b.y2] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        for id in &s.true_identity {
            h.update((*id as u64).to_le_bytes());
        }
        let px: Vec<u8> = s
            .image
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        h.update(&px);
    }
    super::config::hex_digest(&h.finalize())
}

fn embeddings_tensor(rows: &[Embedding], dim: usize) -> TensorData {
    TensorData::from_slice::<f64>(&[rows.len(), dim], rows.iter().flat_map(|e| e.0.iter().copied()))
}

fn tensor_embeddings(t: &TensorData) -> Result<Vec<Embedding>> {
    let a = t.to_array::<f64>()?;
    let a: Array2<f64> = a
        .into_dimensionality()
        .map_err(|e| Error::Checkpoint(format!("bank tensor: {e}")))?;
    Ok(a.outer_iter().map(|r| Embedding::new(r.to_vec())).collect())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("metadata serializes")
}

fn parse<T: serde::de::DeserializeOwned>(ck: &Checkpoint, key: &str) -> Result<T> {
    serde_json::from_str(ck.meta(key)?).map_err(|e| Error::Checkpoint(format!("metadata {key}: {e}")))
}

impl TrainState {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.put_params("model", &self.model.params);
        ck.put_params("optim.velocity", &self.velocity);
        let dim = self.model.config.embedding_dim;
        ck.tensors
            .insert("bank.features".into(), embeddings_tensor(self.bank.features(), dim));
        ck.tensors
            .insert("bank.centroids".into(), embeddings_tensor(self.bank.centroids(), dim));
        let m = &mut ck.metadata;
        m.insert("config_hash".into(), self.config.hash());
        m.insert("train_config".into(), json(&self.config));
        m.insert("model_config".into(), json(&self.model.config));
        m.insert("epoch".into(), self.epoch.to_string());
        m.insert("step".into(), self.step.to_string());
        m.insert("seed".into(), self.config.seed.to_string());
        m.insert("data_fingerprint".into(), self.data_fingerprint.clone());
        m.insert("bank_keys".into(), json(&self.bank.keys()));
        let clusters: Vec<i64> = self
            .bank
            .cluster_assignments()
            .iter()
            .map(|c| c.map_or(-1, |c| c as i64))
            .collect();
        m.insert("bank_clusters".into(), json(&clusters));
        m.insert("bank_updated_at".into(), json(&self.bank.updated_steps()));
        m.insert("bank_momentum".into(), json(&self.bank.momentum));
        ck
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: TrainConfig = parse(ck, "train_config")?;
        if config.hash() != ck.meta("config_hash")? {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut model = SiameseNet::<f32>::new(config.model.clone(), 0)?;
        ck.take_params("model", &mut model.params)?;
        let mut velocity = model.params.zeros_like();
        ck.take_params("optim.velocity", &mut velocity)?;
        let keys: Vec<InstanceKey> = parse(ck, "bank_keys")?;
        let clusters: Vec<i64> = parse(ck, "bank_clusters")?;
        let updated: Vec<u64> = parse(ck, "bank_updated_at")?;
        let momentum: f64 = parse(ck, "bank_momentum")?;
        let get = |k: &str| {
            ck.tensors
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {k}")))
        };
        let bank = MemoryBank::from_parts(
            keys,
            tensor_embeddings(get("bank.features")?)?,
            updated,
            clusters.iter().map(|&c| usize::try_from(c).ok()).collect(),
            tensor_embeddings(get("bank.centroids")?)?,
            momentum,
        )?;
        Ok(TrainState {
            epoch: parse(ck, "epoch")?,
            step: parse(ck, "step")?,
            data_fingerprint: ck.meta("data_fingerprint")?.to_string(),
            config,
            model,
            velocity,
            bank,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn info(&self) -> CheckpointInfo {
        CheckpointInfo {
            config_hash: self.config.hash(),
            epoch: self.epoch,
            step: self.step,
            seed: self.config.seed,
            data_fingerprint: self.data_fingerprint.clone(),
            config: self.config.clone(),
        }
    }
}

/// Loads only the network (and identifying metadata) from a checkpoint.
pub fn load_model(path: &Path) -> Result<(SiameseNet<f32>, CheckpointInfo)> {
    let ck = load_checkpoint(path)?;
    let model_config: ModelConfig = parse(&ck, "model_config")?;
    let mut params = NetParams::<f32>::init(&model_config, 0);
    ck.take_params("model", &mut params)?;
    let info = CheckpointInfo {
        config_hash: ck.meta("config_hash")?.to_string(),
        epoch: parse(&ck, "epoch")?,
        step: parse(&ck, "step")?,
        seed: parse(&ck, "seed")?,
        data_fingerprint: ck.meta("data_fingerprint")?.to_string(),
        config: parse(&ck, "train_config")?,
    };
    Ok((
        SiameseNet {
            config: model_config,
            params,
        },
        info,
    ))
}
