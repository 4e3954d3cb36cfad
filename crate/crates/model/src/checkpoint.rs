//! Parameter checkpoints: `manifest.json` naming every tensor and its MVT1
//! file, next to the files themselves. Reload is bit-exact.

use std::fs;
use std::path::Path;

use mvweak_core::{mvt, CoreError, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::params::ParamSet;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Model kind, e.g. `"base"` or `"downstream"`.
    pub kind: String,
    /// The configuration the parameters were built for.
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub fn save(dir: &Path, kind: &str, config: &impl Serialize, params: &ParamSet<f32>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
    let mut entries = Vec::with_capacity(params.len());
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let file = format!("{name}.mvt");
        mvt::write_tensor(dir.join(&file), t)?;
        entries.push(ManifestEntry {
            name: name.clone(),
            file,
            shape: t.shape().to_vec(),
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config).map_err(|e| ModelError::Invalid(e.to_string()))?,
        params: entries,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CoreError::json(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| CoreError::io(&path, e))?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CoreError::io(&path, e))?;
    Ok(serde_json::from_str(&text).map_err(|e| CoreError::json(&path, e))?)
}

/// Loads a checkpoint of `kind`, returning its manifest and parameters.
pub fn load(dir: &Path, kind: &str) -> Result<(Manifest, ParamSet<f32>)> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != kind {
        return Err(ModelError::Invalid(format!(
            "{} holds a {} checkpoint, expected {kind}",
            dir.display(),
            manifest.kind
        )));
    }
    let mut ps = ParamSet::default();
    for e in &manifest.params {
        let t: Tensor<f32> = mvt::read_tensor(dir.join(&e.file))?;
        if t.shape() != e.shape.as_slice() {
            return Err(ModelError::shape(
                &e.name,
                format!("file has shape {:?}, manifest says {:?}", t.shape(), e.shape),
            ));
        }
        ps.add(e.name.clone(), t);
    }
    Ok((manifest, ps))
}

/// Parses the stored configuration.
pub fn config<C: for<'de> Deserialize<'de>>(manifest: &Manifest) -> Result<C> {
    serde_json::from_value(manifest.config.clone())
        .map_err(|e| ModelError::Config(format!("checkpoint configuration: {e}")))
}
