//! Model checkpoints: one safetensors archive with every named parameter and
//! buffer, the segmenter spec and the hash of the training configuration.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use pccl_core::arch::SegmenterSpec;
use pccl_core::TrainConfig;
use safetensors::SafeTensors;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::Segmenter;

const SPEC_KEY: &str = "spec";
const SEED_KEY: &str = "seed";
const HASH_KEY: &str = "config_hash";
const CONFIG_KEY: &str = "config";

/// Hex SHA-256 of the configuration's canonical JSON.
pub fn config_hash(config: &TrainConfig) -> String {
    let json = serde_json::to_string(config).expect("config serialises");
    Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointInfo {
    pub spec: SegmenterSpec,
    pub seed: u64,
    pub config_hash: String,
    pub config: Option<TrainConfig>,
    /// Every metadata entry, including the ones parsed above.
    pub metadata: HashMap<String, String>,
}

/// Writes `model` atomically: the archive goes to a temporary sibling first
/// so an interrupted write never clobbers the previous checkpoint. `extra`
/// adds free-form metadata entries.
pub fn save(model: &Segmenter, config: Option<&TrainConfig>, extra: &[(&str, String)], path: &Path) -> Result<()> {
    let mut meta: HashMap<String, String> = extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let ser = |e: serde_json::Error| Error::Checkpoint(e.to_string());
    meta.insert(SPEC_KEY.to_string(), serde_json::to_string(model.spec()).map_err(ser)?);
    meta.insert(SEED_KEY.to_string(), model.seed().to_string());
    if let Some(config) = config {
        meta.insert(HASH_KEY.to_string(), config_hash(config));
        meta.insert(CONFIG_KEY.to_string(), serde_json::to_string(config).map_err(ser)?);
    }
    let tensors: Vec<(String, Tensor)> =
        model.store().named_tensors().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let bytes = safetensors::serialize(tensors, Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("safetensors.tmp");
    std::fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(Error::io(path))?;
    Ok(())
}

/// Reads only the metadata block.
pub fn info(path: &Path) -> Result<CheckpointInfo> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    parse_info(&bytes)
}

fn parse_info(bytes: &[u8]) -> Result<CheckpointInfo> {
    let bad = |msg: String| Error::Checkpoint(msg);
    let (_, metadata) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let meta = metadata.metadata().clone().unwrap_or_default();
    let spec_json = meta.get(SPEC_KEY).ok_or_else(|| bad("missing spec metadata".into()))?;
    let spec = serde_json::from_str(spec_json).map_err(|e| bad(format!("spec: {e}")))?;
    let seed = meta.get(SEED_KEY).and_then(|s| s.parse().ok()).unwrap_or(0);
    let config = match meta.get(CONFIG_KEY) {
        Some(c) => Some(serde_json::from_str(c).map_err(|e| bad(format!("config: {e}")))?),
        None => None,
    };
    let config_hash = meta.get(HASH_KEY).cloned().unwrap_or_default();
    Ok(CheckpointInfo { spec, seed, config_hash, config, metadata: meta })
}

/// Rebuilds the model described by the archive and loads its tensors.
pub fn load(path: &Path, device: &Device) -> Result<(Segmenter, CheckpointInfo)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let info = parse_info(&bytes)?;
    let model = Segmenter::build(&info.spec, info.seed, device)?;
    load_tensors(&model, &bytes, true)?;
    Ok((model, info))
}

/// Loads matching tensors from an archive into an existing model, for
/// example externally trained weights. With `strict`, every model tensor
/// must be present and nothing else may be.
pub fn load_into(model: &Segmenter, path: &Path, strict: bool) -> Result<usize> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    load_tensors(model, &bytes, strict)
}

fn load_tensors(model: &Segmenter, bytes: &[u8], strict: bool) -> Result<usize> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut loaded = 0;
    for (name, var) in model.store().named_tensors() {
        let view = match st.tensor(name) {
            Ok(v) => v,
            Err(_) if !strict => continue,
            Err(_) => return Err(Error::Checkpoint(format!("tensor {name} missing from archive"))),
        };
        let t = candle_core::safetensors::Load::load(&view, model.device())?;
        if t.dims() != var.dims() {
            if strict {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: archive shape {:?}, model shape {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            continue;
        }
        var.set(&t)?;
        loaded += 1;
    }
    if strict && st.len() != loaded {
        return Err(Error::Checkpoint(format!("archive holds {} tensors, model {}", st.len(), loaded)));
    }
    Ok(loaded)
}
