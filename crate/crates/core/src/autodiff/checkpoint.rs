use std::collections::BTreeMap;

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::graph::json_error;

use super::Tensor;

const META_KEY: &str = "__meta__";

/// Named tensors plus free-form string metadata.
///
/// Serialised as a JSON object `name → {"shape": [r, c], "data": [...]}`.
/// Metadata sits under the reserved key `__meta__` and is skipped by readers
/// that only want tensors. Floats are written in shortest round-trip form, so
/// loading restores bit-identical values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut root = Map::new();
        if !self.meta.is_empty() {
            let meta: Map<String, Value> =
                self.meta.iter().map(|(k, v)| (k.clone(), Value::String(v.clone()))).collect();
            root.insert(META_KEY.to_string(), Value::Object(meta));
        }
        for (name, t) in &self.tensors {
            if name == META_KEY {
                return Err(Error::contract("tensor name `__meta__` is reserved"));
            }
            if !t.is_finite() {
                return Err(Error::contract(format!("tensor `{name}` holds non-finite values")));
            }
            root.insert(name.clone(), serde_json::to_value(t).expect("tensor serialises"));
        }
        let mut out = serde_json::to_vec(&Value::Object(root)).expect("value serialises");
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        #[derive(serde::Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            shape: [usize; 2],
            data: Vec<f64>,
        }
        let root: Map<String, Value> = serde_json::from_slice(bytes).map_err(|e| json_error(&e))?;
        let mut ck = Checkpoint::default();
        for (name, value) in root {
            if name == META_KEY {
                let meta: BTreeMap<String, String> = serde_json::from_value(value)
                    .map_err(|e| Error::Validation(format!("bad `{META_KEY}` entry: {e}")))?;
                ck.meta = meta;
                continue;
            }
            let doc: Doc = serde_json::from_value(value)
                .map_err(|e| Error::Validation(format!("tensor `{name}`: {e}")))?;
            let t = Tensor::from_vec(doc.shape[0], doc.shape[1], doc.data)
                .map_err(|e| Error::Validation(format!("tensor `{name}`: {e}")))?;
            ck.tensors.insert(name, t);
        }
        Ok(ck)
    }

    /// Copies every parameter of `store` in under `prefix.name`.
    pub fn insert_store(&mut self, prefix: &str, store: &super::ParamStore) {
        for id in store.ids() {
            self.tensors.insert(format!("{prefix}.{}", store.name(id)), store.value(id).clone());
        }
    }

    /// Loads every parameter of `store` from `prefix.name`.
    pub fn load_store(&self, prefix: &str, store: &mut super::ParamStore) -> Result<()> {
        let mut sub = Checkpoint::default();
        let head = format!("{prefix}.");
        for (name, t) in self.tensors.range(head.clone()..) {
            let Some(rest) = name.strip_prefix(&head) else { break };
            sub.tensors.insert(rest.to_string(), t.clone());
        }
        store.load(&sub)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }
}
