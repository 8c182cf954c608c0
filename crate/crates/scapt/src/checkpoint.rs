//! Versioned JSON checkpoints: parameter name → shape + flat float array.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Result, ScaptError};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const CKPT_FORMAT: &str = "scapt-ckpt-v1";

#[derive(Debug, Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    params: IndexMap<String, StoredParam>,
    /// Run configuration the checkpoint was produced under, for reproducibility.
    #[serde(skip_serializing_if = "Option::is_none")]
    run_config: Option<Value>,
}

pub fn save(path: &Path, params: &ParamSet, run_config: Option<Value>) -> Result<()> {
    let stored: IndexMap<String, StoredParam> = params
        .iter()
        .map(|(name, t)| {
            (
                name.clone(),
                StoredParam {
                    shape: t.shape.clone(),
                    values: t.data.clone(),
                },
            )
        })
        .collect();
    let file = CheckpointFile {
        format: CKPT_FORMAT.to_string(),
        params: stored,
        run_config,
    };
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec(&file)?)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, Option<Value>)> {
    let bytes = fs::read(path)?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != CKPT_FORMAT {
        return Err(ScaptError::CheckpointMismatch(format!(
            "unsupported checkpoint format `{}` (expected `{CKPT_FORMAT}`)",
            file.format
        )));
    }
    let mut params = ParamSet::new();
    for (name, sp) in file.params {
        params.insert(name, Tensor::new(sp.shape, sp.values)?);
    }
    Ok((params, file.run_config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.json");
        let mut params = ParamSet::new();
        params.insert("w", Tensor::new(vec![2, 2], vec![0.1, -2.5, 1e-17, 3.0]).unwrap());
        save(&path, &params, None).unwrap();
        let (loaded, cfg) = load(&path).unwrap();
        assert!(cfg.is_none());
        assert_eq!(loaded.get("w").unwrap(), params.get("w").unwrap());
    }

    #[test]
    fn wrong_format_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        fs::write(&path, r#"{"format":"scapt-ckpt-v0","params":{}}"#).unwrap();
        assert!(matches!(
            load(&path),
            Err(ScaptError::CheckpointMismatch(_))
        ));
    }
}
