//! Self-describing checkpoint files: safetensors payload plus JSON metadata.
//!
//! Tensor names: `param.<name>` for learnable tensors, `bn.<i>.{running,final}.{mean,var}`
//! for batch-norm buffers, `adam.{m,v}.<name>` for optimizer moments.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::{AdamState, BnStats, Param};

pub const FORMAT_VERSION: &str = "lmdis-checkpoint/1";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    model: ModelConfig,
    finalized: bool,
    adam_step: Option<u64>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Opaque training-loop state, present in resumable checkpoints.
    pub train: Option<serde_json::Value>,
    /// Hex SHA-256 of the file bytes.
    pub hash: String,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn to_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    a.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn from_view(path: &Path, name: &str, v: &TensorView<'_>) -> Result<ArrayD<f32>> {
    if v.dtype() != Dtype::F32 {
        return Err(ckpt_err(path, format!("{name}: expected f32, found {:?}", v.dtype())));
    }
    let data: Vec<f32> = v.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    ArrayD::from_shape_vec(IxDyn(v.shape()), data).map_err(|e| ckpt_err(path, format!("{name}: {e}")))
}

/// Writes `model` (and optionally optimizer and loop state) to `path`
/// atomically. Returns the file hash.
pub fn save(
    path: impl AsRef<Path>,
    model: &mut Model<f32>,
    adam: Option<&AdamState<f32>>,
    train: Option<&serde_json::Value>,
) -> Result<String> {
    let path = path.as_ref();
    let mut tensors: BTreeMap<String, (Vec<usize>, Vec<u8>)> = BTreeMap::new();
    model.visit_params(&mut |n: &str, p: &mut Param<f32>| {
        tensors.insert(format!("param.{n}"), (p.value.shape().to_vec(), to_bytes(&p.value)));
    });
    let mut finalized = true;
    for (i, bn) in model.bns_mut().into_iter().enumerate() {
        let mut put = |key: String, a: &Array1<f32>| {
            tensors.insert(key, (vec![a.len()], a.iter().flat_map(|v| v.to_le_bytes()).collect()));
        };
        put(format!("bn.{i}.running.mean"), &bn.running.mean);
        put(format!("bn.{i}.running.var"), &bn.running.var);
        match &bn.finalized {
            Some(f) => {
                put(format!("bn.{i}.final.mean"), &f.mean);
                put(format!("bn.{i}.final.var"), &f.var);
            }
            None => finalized = false,
        }
    }
    if let Some(a) = adam {
        for (n, m) in &a.m {
            tensors.insert(format!("adam.m.{n}"), (m.shape().to_vec(), to_bytes(m)));
        }
        for (n, v) in &a.v {
            tensors.insert(format!("adam.v.{n}"), (v.shape().to_vec(), to_bytes(v)));
        }
    }
    let header = Header {
        format: FORMAT_VERSION.into(),
        model: model.config.clone(),
        finalized,
        adam_step: adam.map(|a| a.step),
    };
    let mut meta = HashMap::new();
    meta.insert("lmdis".to_string(), serde_json::to_string(&header)?);
    if let Some(t) = train {
        meta.insert("train".to_string(), serde_json::to_string(t)?);
    }
    let views: Vec<(String, TensorView<'_>)> = tensors
        .iter()
        .map(|(k, (shape, bytes))| {
            TensorView::new(Dtype::F32, shape.clone(), bytes).map(|v| (k.clone(), v)).map_err(|e| ckpt_err(path, e.to_string()))
        })
        .collect::<Result<_>>()?;
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let hash = hex::encode(Sha256::digest(&bytes));
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let (_, md) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    let meta = md.metadata().clone().unwrap_or_default();
    let header: Header = serde_json::from_str(meta.get("lmdis").ok_or_else(|| ckpt_err(path, "missing lmdis header"))?)?;
    if header.format != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format {:?}", header.format)));
    }
    // parameter values are overwritten below; the seed only fixes shapes
    let mut model = Model::<f32>::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut missing = Vec::new();
    let mut bad = None;
    model.visit_params(&mut |n: &str, p: &mut Param<f32>| {
        let key = format!("param.{n}");
        match st.tensor(&key) {
            Ok(v) => match from_view(path, &key, &v) {
                Ok(a) if a.shape() == p.value.shape() => p.value = a,
                Ok(a) => bad = Some(format!("{key}: shape {:?}, expected {:?}", a.shape(), p.value.shape())),
                Err(e) => bad = Some(e.to_string()),
            },
            Err(_) => missing.push(key),
        }
    });
    if let Some(b) = bad {
        return Err(ckpt_err(path, b));
    }
    if !missing.is_empty() {
        return Err(ckpt_err(path, format!("missing tensors: {}", missing.join(", "))));
    }
    let read1 = |key: String, len: usize| -> Result<Array1<f32>> {
        let v = st.tensor(&key).map_err(|_| ckpt_err(path, format!("missing {key}")))?;
        let a = from_view(path, &key, &v)?;
        if a.len() != len {
            return Err(ckpt_err(path, format!("{key}: length {}, expected {len}", a.len())));
        }
        Ok(a.into_shape_with_order(len).expect("1-d"))
    };
    for (i, bn) in model.bns_mut().into_iter().enumerate() {
        let c = bn.channels();
        bn.running = BnStats { mean: read1(format!("bn.{i}.running.mean"), c)?, var: read1(format!("bn.{i}.running.var"), c)? };
        bn.finalized = if header.finalized {
            Some(BnStats { mean: read1(format!("bn.{i}.final.mean"), c)?, var: read1(format!("bn.{i}.final.var"), c)? })
        } else {
            None
        };
    }
    let adam = match header.adam_step {
        Some(step) => {
            let mut state = AdamState { step, m: BTreeMap::new(), v: BTreeMap::new() };
            for (name, view) in st.tensors() {
                if let Some(n) = name.strip_prefix("adam.m.") {
                    state.m.insert(n.to_string(), from_view(path, &name, &view)?);
                } else if let Some(n) = name.strip_prefix("adam.v.") {
                    state.v.insert(n.to_string(), from_view(path, &name, &view)?);
                }
            }
            Some(state)
        }
        None => None,
    };
    let train = meta.get("train").map(|s| serde_json::from_str(s)).transpose()?;
    Ok(Checkpoint { model, adam, train, hash })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetConfig;
    use crate::nn::Resample;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: [8, 8],
            image_channels: 1,
            landmarks: 2,
            descriptor_dim: 2,
            feature_dim: 3,
            use_descriptors: true,
            decoder_sigmas: vec![0.1],
            detector: NetConfig::new(&[2, 3], &[1, 1], Resample::Same),
            feature_net: NetConfig::new(&[2, 3], &[1, 1], Resample::Same),
            decoder: NetConfig::new(&[2, 3], &[1, 1], Resample::Same),
            detector_head_scale: 1.0,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.safetensors");
        let mut model = Model::<f32>::new(cfg(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let stats: Vec<BnStats<f32>> = model
            .bns_mut()
            .iter()
            .map(|bn| BnStats { mean: Array1::from_elem(bn.channels(), 0.5), var: Array1::from_elem(bn.channels(), 2.0) })
            .collect();
        model.set_finalized(stats).unwrap();
        let mut adam = AdamState::default();
        adam.step = 3;
        adam.m.insert("proj".into(), ArrayD::from_elem(IxDyn(&[2]), 0.25));
        adam.v.insert("proj".into(), ArrayD::from_elem(IxDyn(&[2]), 0.125));
        let train = serde_json::json!({"iteration": 3});
        let hash = save(&path, &mut model, Some(&adam), Some(&train)).unwrap();
        let mut back = load(&path).unwrap();
        assert_eq!(back.hash, hash);
        assert_eq!(back.model.named_params(), model.named_params());
        assert!(back.model.is_finalized());
        assert_eq!(back.adam.unwrap(), adam);
        assert_eq!(back.train.unwrap(), train);
        assert!(!temp_path(&path).exists());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint { .. })));
    }
}
