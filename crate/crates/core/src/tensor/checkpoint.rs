//! Parameter archives: a JSON document mapping parameter names to shape and
//! values, plus free-form metadata.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::ParamStore;
use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, meta: serde_json::Value) -> Self {
        let params = store
            .iter()
            .map(|(_, name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self { version: CHECKPOINT_VERSION, params, meta }
    }

    /// Overwrites every parameter of `store` from the archive. Names and
    /// shapes must match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "archive holds {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for rec in &self.params {
            let id =
                store.id(&rec.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{}'", rec.name)))?;
            if store.get(id).shape() != rec.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, model expects {:?}",
                    rec.name,
                    rec.shape,
                    store.get(id).shape()
                )));
            }
            *store.get_mut(id) = Tensor::new(rec.shape.clone(), rec.values.clone())
                .map_err(|e| Error::Checkpoint(format!("parameter '{}': {e}", rec.name)))?;
        }
        Ok(())
    }

    /// Writes atomically: a sibling temp file is renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        match raw.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported checkpoint version {v}"))),
            None => return Err(Error::Checkpoint("checkpoint has no version field".into())),
        }
        Ok(serde_json::from_value(raw)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 0.1 + 0.2]).unwrap());
        s.add("b", Tensor::vector(vec![-1e-300, 7.5]));
        s
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let src = store();
        Checkpoint::from_store(&src, serde_json::json!({"k": 1})).save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.meta["k"], 1);
        let mut dst = store();
        for id in dst.ids().collect::<Vec<_>>() {
            dst.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        ck.restore_into(&mut dst).unwrap();
        for id in src.ids() {
            assert_eq!(src.get(id), dst.get(id));
        }
    }

    #[test]
    fn version_is_mandatory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        fs::write(&path, r#"{"params": []}"#).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
        fs::write(&path, r#"{"version": 99, "params": []}"#).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut ck = Checkpoint::from_store(&store(), serde_json::Value::Null);
        ck.params[1].shape = vec![1, 2];
        assert!(ck.restore_into(&mut store()).is_err());
    }
}
