//! Embedding store: one `views x T x d` MVT1 tensor per sequence plus a
//! manifest listing them.

use std::fs;
use std::path::Path;

use mvweak_core::{mvt, CoreError, Tensor};
use mvweak_model::BaseModel;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Result, TrainError};
use crate::train::compute_latents;

pub const EMBEDDINGS_MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingEntry {
    pub sequence_id: String,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingManifest {
    /// Latent spaces per sequence: one per view, or one in single mode.
    pub views: usize,
    pub frames: usize,
    pub d: usize,
    pub entries: Vec<EmbeddingEntry>,
}

/// Runs the frozen base model over `samples` and writes the store to `out`.
pub fn extract_embeddings(model: &BaseModel<f32>, samples: &[Sample], out: &Path) -> Result<EmbeddingManifest> {
    fs::create_dir_all(out).map_err(|e| CoreError::io(out, e))?;
    let latents = compute_latents(model, samples)?;
    let mut entries = Vec::with_capacity(samples.len());
    for (s, rho) in samples.iter().zip(&latents) {
        let file = format!("{}.mvt", s.id);
        mvt::write_tensor(out.join(&file), rho)?;
        entries.push(EmbeddingEntry {
            sequence_id: s.id.clone(),
            file,
        });
    }
    let manifest = EmbeddingManifest {
        views: model.cfg.num_latent_heads(),
        frames: model.cfg.num_frames,
        d: model.cfg.d_model,
        entries,
    };
    let path = out.join(EMBEDDINGS_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
    Ok(manifest)
}

/// Loads the embeddings of `ids`, in that order.
pub fn load_embeddings(dir: &Path, ids: &[&str]) -> Result<Vec<Tensor<f32>>> {
    let path = dir.join(EMBEDDINGS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    let manifest: EmbeddingManifest = serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))?;
    let want = [manifest.views, manifest.frames, manifest.d];
    ids.iter()
        .map(|id| {
            let entry = manifest
                .entries
                .iter()
                .find(|e| e.sequence_id == *id)
                .ok_or_else(|| TrainError::Data(format!("{}: no embeddings for sequence {id}", dir.display())))?;
            let t: Tensor<f32> = mvt::read_tensor(dir.join(&entry.file))?;
            if t.shape() != want {
                return Err(TrainError::Data(format!(
                    "{}: shape {:?}, manifest says {:?}",
                    entry.file,
                    t.shape(),
                    want
                )));
            }
            Ok(t)
        })
        .collect()
}
