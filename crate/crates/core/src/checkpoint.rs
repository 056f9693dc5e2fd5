//! Versioned, checksummed model files.
//!
//! Layout: 8-byte magic, format version (u32 LE), payload length (u64 LE),
//! SHA-256 of the payload, then the payload. The payload holds a JSON header
//! (length-prefixed) followed by every named array as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{MixtureModel, ModelConfig};
use crate::normalize::ZScoreStats;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const MAGIC: &[u8; 8] = b"STMOECKP";
pub const VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8 + 32;
const STATS_MEAN: &str = "norm.mean";
const STATS_STD: &str = "norm.std";
const LINK_BITS: &str = "graph.link_bits";

/// A trained model with the normalisation it expects.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MixtureModel<f64>,
    pub stats: ZScoreStats,
    pub train: Option<TrainConfig>,
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config_hash: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    arrays: Vec<ArrayEntry>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Stable fingerprint of an architecture.
pub fn config_hash(config: &ModelConfig) -> String {
    let json = serde_json::to_vec(config).expect("model config serialises");
    hex(&Sha256::digest(json))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

pub fn to_bytes(ckp: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckp.model;
    let channels = model.config().channels;
    if ckp.stats.mean.len() != channels || ckp.stats.std.len() != channels {
        return Err(Error::dim("checkpoint stats", &[&[ckp.stats.mean.len(), ckp.stats.std.len()], &[channels]]));
    }
    let mut arrays: Vec<(String, Tensor<f64>)> = model
        .params()
        .iter()
        .map(|(_, name, t)| (name.to_string(), t.clone()))
        .collect();
    arrays.push((STATS_MEAN.into(), Tensor::new(vec![channels], ckp.stats.mean.clone())?));
    arrays.push((STATS_STD.into(), Tensor::new(vec![channels], ckp.stats.std.clone())?));
    if let Some(bits) = model.link_bits() {
        arrays.push((LINK_BITS.into(), bits.clone()));
    }
    let header = Header {
        version: VERSION,
        config_hash: config_hash(model.config()),
        model: model.config().clone(),
        train: ckp.train.clone(),
        arrays: arrays
            .iter()
            .map(|(name, t)| ArrayEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let head = serde_json::to_vec(&header).map_err(|e| Error::Contract(e.to_string()))?;
    let mut payload = Vec::with_capacity(8 + head.len() + arrays.iter().map(|(_, t)| t.len() * 8).sum::<usize>());
    payload.extend_from_slice(&(head.len() as u64).to_le_bytes());
    payload.extend_from_slice(&head);
    for (_, t) in &arrays {
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(PREFIX + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&payload));
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREFIX {
        return Err(corrupt(format!("file is {} bytes, shorter than the {PREFIX}-byte preamble", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let payload = &bytes[PREFIX..];
    if payload.len() as u64 != len {
        return Err(corrupt(format!("payload is {} bytes, header says {len}", payload.len())));
    }
    if Sha256::digest(payload).as_slice() != &bytes[20..52] {
        return Err(corrupt("checksum mismatch"));
    }
    if payload.len() < 8 {
        return Err(corrupt("payload too short for its header"));
    }
    let head_len = u64::from_le_bytes(payload[..8].try_into().unwrap());
    let head_end = usize::try_from(head_len)
        .ok()
        .and_then(|h| h.checked_add(8))
        .filter(|&e| e <= payload.len())
        .ok_or_else(|| corrupt("header length exceeds payload"))?;
    let header: Header =
        serde_json::from_slice(&payload[8..head_end]).map_err(|e| corrupt(format!("unreadable header: {e}")))?;
    if header.version != VERSION {
        return Err(corrupt("header version disagrees with the preamble"));
    }
    if header.config_hash != config_hash(&header.model) {
        return Err(corrupt("config hash does not match the stored config"));
    }

    let mut data = &payload[head_end..];
    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let bytes_needed = count.checked_mul(8).ok_or_else(|| corrupt("array size overflow"))?;
        if data.len() < bytes_needed {
            return Err(corrupt(format!("array {} is truncated", entry.name)));
        }
        let values = data[..bytes_needed]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        data = &data[bytes_needed..];
        arrays.push((entry.name.as_str(), Tensor::new(entry.shape.clone(), values)?));
    }
    if !data.is_empty() {
        return Err(corrupt(format!("{} trailing bytes after the arrays", data.len())));
    }

    let mut model = MixtureModel::<f64>::new(header.model.clone(), None, 0).map_err(|e| corrupt(e.to_string()))?;
    let mut stats = ZScoreStats { mean: Vec::new(), std: Vec::new() };
    let mut seen = 0;
    let mut bits = None;
    for (name, t) in arrays {
        match name {
            STATS_MEAN => stats.mean = t.data().to_vec(),
            STATS_STD => stats.std = t.data().to_vec(),
            LINK_BITS => bits = Some(t),
            _ => {
                let id = model
                    .params()
                    .find(name)
                    .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
                if model.params().get(id).shape() != t.shape() {
                    return Err(corrupt(format!("parameter {name} has shape {:?}", t.shape())));
                }
                model.params_mut().set(id, t)?;
                seen += 1;
            }
        }
    }
    if seen != model.params().len() {
        return Err(corrupt(format!("{} of {} parameters present", seen, model.params().len())));
    }
    let channels = header.model.channels;
    if stats.mean.len() != channels || stats.std.len() != channels {
        return Err(corrupt("normalisation statistics missing or mis-sized"));
    }
    model.set_link_bits(bits).map_err(|e| corrupt(e.to_string()))?;
    Ok(Checkpoint { model, stats, train: header.train })
}

pub fn save_checkpoint(ckp: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckp)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display(), e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and refuses it unless it was saved for `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ckp = load_checkpoint(path)?;
    let (want, got) = (config_hash(expected), config_hash(ckp.model.config()));
    if want != got {
        return Err(Error::Config(format!(
            "checkpoint was saved for experts {:?} (hash {}), requested {:?} (hash {})",
            ckp.model.config().experts,
            &got[..12],
            expected.experts,
            &want[..12]
        )));
    }
    Ok(ckp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adjacency::{load_static_graph, Edge};
    use crate::expert::ExpertKind;
    use crate::gating::FusionMode;
    use crate::model::Batch;

    fn config(experts: Vec<ExpertKind>) -> ModelConfig {
        ModelConfig {
            experts,
            nodes: 4,
            channels: 1,
            history: 3,
            horizon: 2,
            d_model: 8,
            heads: 2,
            d_time: 4,
            layers: 1,
            adaptive_dim: 3,
            edge_hidden: 4,
            rho: 0.7,
            dropout: 0.1,
        }
    }

    fn sample(experts: Vec<ExpertKind>) -> Checkpoint {
        let edges: Vec<Edge> = (0..4)
            .map(|i| Edge { from: i, to: (i + 1) % 4, weight: 1.0, line: i + 1 })
            .collect();
        let graph = load_static_graph(&edges, 4).unwrap();
        let model = MixtureModel::new(config(experts), Some(&graph), 11).unwrap();
        Checkpoint {
            model,
            stats: ZScoreStats { mean: vec![55.123456789], std: vec![0.1 + 0.2] },
            train: Some(TrainConfig::default()),
        }
    }

    fn batch() -> Batch<f64> {
        Batch {
            x: Tensor::from_fn(&[2, 3, 4, 1], |i| ((i * 7) % 5) as f64 * 0.3 - 0.6),
            tau_history: Tensor::from_fn(&[2, 3], |i| 0.01 * i as f64),
            tau_future: Tensor::from_fn(&[2, 2], |i| 0.03 + 0.01 * i as f64),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ckp = sample(ExpertKind::ALL.to_vec());
        let back = from_bytes(&to_bytes(&ckp).unwrap()).unwrap();
        assert_eq!(back.stats, ckp.stats);
        assert_eq!(back.train, ckp.train);
        assert_eq!(back.model.link_bits(), ckp.model.link_bits());
        for fusion in [FusionMode::Weighted, FusionMode::Top1] {
            let a = ckp.model.predict(&batch(), fusion).unwrap();
            let b = back.model.predict(&batch(), fusion).unwrap();
            assert_eq!(a.fused.data(), b.fused.data());
            assert_eq!(a.alpha.data(), b.alpha.data());
        }
    }

    #[test]
    fn every_flipped_byte_is_rejected() {
        let bytes = to_bytes(&sample(vec![ExpertKind::Identity])).unwrap();
        let step = (bytes.len() / 400).max(1);
        for i in (0..bytes.len()).step_by(step).chain([bytes.len() - 1]) {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            assert!(matches!(from_bytes(&bad), Err(Error::Integrity(_))), "byte {i}");
        }
    }

    #[test]
    fn truncation_and_extension_rejected() {
        let bytes = to_bytes(&sample(vec![ExpertKind::Adaptive])).unwrap();
        for cut in [0, 7, PREFIX - 1, PREFIX, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(from_bytes(&longer), Err(Error::Integrity(_))));
    }

    #[test]
    fn future_version_rejected() {
        let mut bytes = to_bytes(&sample(vec![ExpertKind::Identity])).unwrap();
        bytes[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        match from_bytes(&bytes) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("version"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("id.ckpt");
        save_checkpoint(&sample(vec![ExpertKind::Identity]), &path).unwrap();
        let pair = config(vec![ExpertKind::Identity, ExpertKind::Adaptive]);
        assert!(matches!(load_checkpoint_for(&path, &pair), Err(Error::Config(_))));
        assert!(load_checkpoint_for(&path, &config(vec![ExpertKind::Identity])).is_ok());
    }

    #[test]
    fn hash_tracks_architecture() {
        let a = config(vec![ExpertKind::Identity]);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.d_model = 16;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
