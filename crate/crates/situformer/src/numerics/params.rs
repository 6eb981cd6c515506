use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::{Tape, TensorError, TensorId};
use super::Result;

pub const CHECKPOINT_FORMAT: &str = "situformer-checkpoint-v1";

/// Named parameter arrays, the single owner of all trainable state. Keys are
/// stable names (query tables are keyed by verb/role *names*), so loading a
/// checkpoint against a re-ordered lexicon still lands every array in the
/// right place.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape/data mismatch"
        );
        self.params.insert(name.to_string(), (shape, data));
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.params.get(name).map(|(s, _)| s.as_slice())
    }

    pub fn values(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).map(|(_, d)| d.as_slice())
    }

    pub fn values_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.params.get_mut(name).map(|(_, d)| d)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(|(_, d)| d.len()).sum()
    }

    /// Merge another store into this one, e.g. TNM + Verb-c checkpoints
    /// loaded side by side. Name collisions are an error.
    pub fn absorb(&mut self, other: ParamStore) -> Result<()> {
        for (k, v) in other.params {
            if self.params.contains_key(&k) {
                return Err(TensorError::Checkpoint(format!("duplicate parameter {k}")));
            }
            self.params.insert(k, v);
        }
        Ok(())
    }
}

/// Binds store parameters onto a tape on first use and remembers the mapping,
/// so gradient maps can be translated back to parameter names.
pub struct TapeCtx<'a> {
    pub tape: &'a mut Tape,
    store: &'a ParamStore,
    trainable: bool,
    bound: BTreeMap<String, TensorId>,
}

impl<'a> TapeCtx<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a ParamStore, trainable: bool) -> Self {
        TapeCtx {
            tape,
            store,
            trainable,
            bound: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        if let Some(id) = self.bound.get(name) {
            return Ok(*id);
        }
        let (shape, data) = self
            .store
            .params
            .get(name)
            .ok_or_else(|| TensorError::Checkpoint(format!("unknown parameter {name}")))?;
        let id = self.tape.leaf(data.clone(), shape.clone(), self.trainable)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Translate a backward() gradient map into parameter names.
    pub fn named_grads(&self, grads: &BTreeMap<TensorId, Vec<f64>>) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, id) in &self.bound {
            if let Some(g) = grads.get(id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config_hash: String,
    model_hash: String,
    data_hash: String,
    params: BTreeMap<String, CheckpointEntry>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Hashes a checkpoint carries so downstream artifacts can detect staleness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub config_hash: String,
    pub model_hash: String,
    pub data_hash: String,
}

pub fn save_checkpoint(store: &ParamStore, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.to_string(),
        config_hash: meta.config_hash.clone(),
        model_hash: meta.model_hash.clone(),
        data_hash: meta.data_hash.clone(),
        params: store
            .params
            .iter()
            .map(|(k, (s, d))| {
                (
                    k.clone(),
                    CheckpointEntry {
                        shape: s.clone(),
                        data: d.clone(),
                    },
                )
            })
            .collect(),
    };
    let json = serde_json::to_string(&file)
        .map_err(|e| TensorError::Checkpoint(format!("serialize: {e}")))?;
    std::fs::write(path, json).map_err(|e| TensorError::Checkpoint(format!("write {}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| TensorError::Checkpoint(format!("read {}: {e}", path.display())))?;
    let file: CheckpointFile =
        serde_json::from_str(&raw).map_err(|e| TensorError::Checkpoint(format!("parse {}: {e}", path.display())))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(TensorError::Checkpoint(format!(
            "unsupported format tag {:?} (expected {CHECKPOINT_FORMAT})",
            file.format
        )));
    }
    let mut store = ParamStore::new();
    for (k, e) in file.params {
        if e.shape.iter().product::<usize>() != e.data.len() {
            return Err(TensorError::Checkpoint(format!("param {k}: shape/data mismatch")));
        }
        store.params.insert(k, (e.shape, e.data));
    }
    Ok((
        store,
        CheckpointMeta {
            config_hash: file.config_hash,
            model_hash: file.model_hash,
            data_hash: file.data_hash,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.insert("w", vec![2, 2], vec![0.1, -0.25, 1.0 / 3.0, 1e-17]);
        store.insert("b", vec![2], vec![f64::MIN_POSITIVE, 2.0_f64.sqrt()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let meta = CheckpointMeta {
            config_hash: "abc".into(),
            model_hash: "m".into(),
            data_hash: "d".into(),
        };
        save_checkpoint(&store, &path, &meta).unwrap();
        let (loaded, got_meta) = load_checkpoint(&path).unwrap();
        assert_eq!(got_meta, meta);
        for name in store.names() {
            assert_eq!(store.shape(name), loaded.shape(name));
            // bit-exact round trip
            for (a, b) in store.values(name).unwrap().iter().zip(loaded.values(name).unwrap()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn load_rejects_bad_format_tag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        std::fs::write(
            &path,
            r#"{"format":"something-else","config_hash":"","model_hash":"","data_hash":"","params":{}}"#,
        )
        .unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
