//! Checkpoints: tensors via [`crate::tensor::serialize`] plus a JSON sidecar
//! `<stem>.json` carrying the architecture, taxonomy and preprocessing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SgnetConfig, SgnetModel};
use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::taxonomy::Taxonomy;
use crate::tensor::{serialize, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: SgnetConfig,
    /// Taxonomy document the model was trained against.
    pub taxonomy: String,
    pub normalization: Normalization,
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: String,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SgnetModel<f32>,
    pub taxonomy: Taxonomy,
}

pub fn save(stem: &Path, model: &SgnetModel<f32>, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = stem.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let named: Vec<(&str, &Tensor<f32>)> = model.named().collect();
    serialize::save(stem, &named)?;
    let json_path = stem.with_extension("json");
    let text = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

/// Loads `<stem>.json`, `<stem>.manifest` and `<stem>.bin`. `stem` may also
/// name any one of those files.
pub fn load(stem: &Path) -> Result<Checkpoint> {
    let stem = match stem.extension().and_then(|e| e.to_str()) {
        Some("json" | "bin" | "manifest") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let json_path = stem.with_extension("json");
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Format {
        offset: 0,
        message: format!("{}: {e}", json_path.display()),
    })?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                meta.format_version
            ),
        });
    }
    let taxonomy = Taxonomy::from_json(&meta.taxonomy)?;
    if taxonomy.num_finer() != meta.config.num_finer || taxonomy.num_super() != meta.config.num_super {
        return Err(Error::shape(format!(
            "checkpoint taxonomy has {}/{} classes but the architecture expects {}/{}",
            taxonomy.num_super(),
            taxonomy.num_finer(),
            meta.config.num_super,
            meta.config.num_finer
        )));
    }
    let tensors = serialize::load::<f32>(&stem)?;
    let model = SgnetModel::from_named(&meta.config, tensors)?;
    Ok(Checkpoint {
        meta,
        model,
        taxonomy,
    })
}
