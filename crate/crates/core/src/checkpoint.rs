//! Model and adapter checkpoints.
//!
//! Layout:
//!
//! ```text
//! SELORA-CKPT v1\n
//! {"precision": "f64", "config": {..}, "plan": {..} | null, "params": [{"name", "shape", "layer_id", "trainable"}, ..]}\n
//! <little-endian values of every listed parameter, in listed order>
//! ```
//!
//! Loading rebuilds the model from `config` (and `plan`, if present) and then overwrites
//! the listed parameters, so an adapter-only file restores a full model as long as the
//! base initialization is deterministic.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::select::LoraPlan;
use crate::tensor::{Precision, Real, Tensor};

const MAGIC: &str = "SELORA-CKPT v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointScope {
    Full,
    AdaptersOnly,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    layer_id: Option<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    precision: Precision,
    config: ModelConfig,
    plan: Option<LoraPlan>,
    params: Vec<Entry>,
}

pub fn save_checkpoint<F: Real>(model: &TransformerModel<F>, scope: CheckpointScope, path: &Path) -> Result<()> {
    let kept: Vec<_> =
        model.params().iter().filter(|(id, _)| scope == CheckpointScope::Full || model.is_adapter_param(*id)).map(|(_, p)| p).collect();
    let header = Header {
        precision: F::PRECISION,
        config: model.config().clone(),
        plan: model.plan().cloned(),
        params: kept
            .iter()
            .map(|p| Entry { name: p.name.clone(), shape: p.value.shape().to_vec(), layer_id: p.layer_id, trainable: p.trainable })
            .collect(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for p in kept {
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<TransformerModel<F>> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let bytes = fs::read(path)?;
    let mut lines = bytes.splitn(3, |&b| b == b'\n');
    if lines.next() != Some(MAGIC.as_bytes()) {
        return Err(bad("missing magic line".into()));
    }
    let header: Header = serde_json::from_slice(lines.next().ok_or_else(|| bad("missing header".into()))?)?;
    let body = lines.next().unwrap_or(&[]);
    if header.precision != F::PRECISION {
        return Err(bad(format!("stored as {:?}, requested {:?}", header.precision, F::PRECISION)));
    }
    let expected: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>() * F::BYTES).sum();
    if body.len() != expected {
        return Err(bad(format!("payload is {} bytes, header describes {expected}", body.len())));
    }

    let mut model = TransformerModel::<F>::new(&header.config)?;
    if let Some(plan) = &header.plan {
        model.inject_lora(plan)?;
    }
    let mut offset = 0;
    for entry in &header.params {
        let id = model.params().find(&entry.name).ok_or_else(|| bad(format!("unknown parameter {}", entry.name)))?;
        let param = model.params_mut().get_mut(id);
        if param.value.shape() != entry.shape.as_slice() || param.layer_id != entry.layer_id {
            return Err(bad(format!("parameter {} has shape {:?}, file says {:?}", entry.name, param.value.shape(), entry.shape)));
        }
        let n: usize = entry.shape.iter().product();
        let data = body[offset..offset + n * F::BYTES].chunks_exact(F::BYTES).map(F::read_le).collect();
        offset += n * F::BYTES;
        param.value = Tensor::new(entry.shape.clone(), data)?;
        param.trainable = entry.trainable;
    }
    Ok(model)
}
