//! Checkpoint container: `manifest.json` lists every tensor with its
//! shape and byte offset into `params.bin`, a little-endian f32 blob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelSpec, TigrModel};
use crate::error::{Result, TigrError};
use crate::numerics::{Adam, ParamId, Tensor};

pub const CHECKPOINT_FORMAT: &str = "tigr-checkpoint-1";
const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Kind {
    Anchor,
    Target,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    kind: Kind,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    step: u64,
    spec: ModelSpec,
    adam: Option<AdamState>,
    run: serde_json::Value,
    entries: Vec<Entry>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TigrModel<f32>,
    pub adam: Option<Adam<f32>>,
    /// Optimizer steps taken when saved.
    pub step: u64,
    /// Free-form run configuration snapshot.
    pub run: serde_json::Value,
}

pub fn save_checkpoint(
    dir: &Path,
    model: &TigrModel<f32>,
    adam: Option<&Adam<f32>>,
    step: u64,
    run: &serde_json::Value,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| TigrError::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut put = |name: &str, kind: Kind, t: &Tensor<f32>| {
        entries.push(Entry {
            name: name.to_string(),
            kind,
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (id, p) in model.store.iter() {
        put(&p.name, Kind::Anchor, &p.value);
        if let Some(t) = model.shadow.get(id) {
            put(&p.name, Kind::Target, t);
        }
        if let Some(a) = adam {
            put(&p.name, Kind::AdamM, &a.m[id.0]);
            put(&p.name, Kind::AdamV, &a.v[id.0]);
        }
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        step,
        spec: model.spec.clone(),
        adam: adam.map(|a| AdamState {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            step: a.step,
        }),
        run: run.clone(),
        entries,
    };
    let blob_path = dir.join(BLOB);
    std::fs::write(&blob_path, &blob).map_err(|e| TigrError::io(&blob_path, e))?;
    let man_path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(&man_path, text + "\n").map_err(|e| TigrError::io(&man_path, e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let man_path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&man_path).map_err(|e| TigrError::io(&man_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(TigrError::Checkpoint(format!("unsupported format {:?}", manifest.format)));
    }
    let blob_path = dir.join(BLOB);
    let blob = std::fs::read(&blob_path).map_err(|e| TigrError::io(&blob_path, e))?;

    let mut model = TigrModel::<f32>::new(manifest.spec.clone())?;
    let mut adam = manifest.adam.as_ref().map(|s| {
        let mut a = Adam::new(&model.store, s.lr);
        a.beta1 = s.beta1;
        a.beta2 = s.beta2;
        a.eps = s.eps;
        a.step = s.step;
        a
    });
    let mut seen = vec![[false; 4]; model.store.len()];
    for e in &manifest.entries {
        let id: ParamId = model
            .store
            .id(&e.name)
            .ok_or_else(|| TigrError::Checkpoint(format!("unknown parameter {}", e.name)))?;
        let expected = model.store.get(id).value.shape().to_vec();
        if e.shape != expected {
            return Err(TigrError::Checkpoint(format!(
                "{}: stored shape {:?}, model expects {:?}",
                e.name, e.shape, expected
            )));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let bytes = blob
            .get(start..start + 4 * n)
            .ok_or_else(|| TigrError::Checkpoint(format!("{}: blob truncated", e.name)))?;
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        let slot = match e.kind {
            Kind::Anchor => {
                model.store.get_mut(id).value = t;
                0
            }
            Kind::Target => {
                if model.shadow.get(id).is_none() {
                    return Err(TigrError::Checkpoint(format!("{} has no target copy", e.name)));
                }
                model.shadow.set(id, t);
                1
            }
            Kind::AdamM | Kind::AdamV => {
                let a = adam
                    .as_mut()
                    .ok_or_else(|| TigrError::Checkpoint("optimizer moments without optimizer state".into()))?;
                if e.kind == Kind::AdamM {
                    a.m[id.0] = t;
                    2
                } else {
                    a.v[id.0] = t;
                    3
                }
            }
        };
        seen[id.0][slot] = true;
    }
    for (id, p) in model.store.iter() {
        let s = seen[id.0];
        let missing = !s[0] || (model.shadow.get(id).is_some() && !s[1]) || (adam.is_some() && !(s[2] && s[3]));
        if missing {
            return Err(TigrError::Checkpoint(format!("{} is missing from the checkpoint", p.name)));
        }
    }
    Ok(Checkpoint {
        model,
        adam,
        step: manifest.step,
        run: manifest.run,
    })
}
