//! Self-describing model checkpoints.
//!
//! Layout: the 8-byte magic `CSUNETCK`, a little-endian `u32` format
//! version, a little-endian `u64` header length, a JSON header, then every
//! tensor's values as little-endian `f32` in header order.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::cascade::{CascadeConfig, CascadeModel};
use crate::error::{Error, Result};
use crate::preprocess::PreprocessParams;

const MAGIC: &[u8; 8] = b"CSUNETCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub cascade: CascadeConfig,
    pub grid: [usize; 3],
    pub preprocess: PreprocessParams,
    pub epoch: Option<usize>,
    pub loss: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: CascadeModel<f32>,
}

impl Checkpoint {
    pub fn new(model: CascadeModel<f32>, preprocess: PreprocessParams, epoch: Option<usize>, loss: Option<f64>) -> Self {
        let tensors = model
            .store
            .iter()
            .map(|(_, p)| TensorEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect();
        Checkpoint {
            header: CheckpointHeader {
                cascade: model.config.clone(),
                grid: model.grid,
                preprocess,
                epoch,
                loss,
                tensors,
            },
            model,
        }
    }

    /// Rejects a checkpoint whose architecture or input grid differs from the
    /// given configuration.
    pub fn check_compatible(&self, cascade: &CascadeConfig, preprocess: &PreprocessParams) -> Result<()> {
        if &self.header.cascade != cascade {
            return Err(Error::Checkpoint(format!(
                "checkpoint cascade {:?} does not match configured cascade {:?}",
                self.header.cascade, cascade
            )));
        }
        if self.header.grid != preprocess.target_grid {
            return Err(Error::Checkpoint(format!(
                "checkpoint grid {:?} does not match configured target_grid {:?}",
                self.header.grid, preprocess.target_grid
            )));
        }
        Ok(())
    }
}

pub fn save(path: &Path, model: &CascadeModel<f32>, preprocess: &PreprocessParams, epoch: Option<usize>, loss: Option<f64>) -> Result<()> {
    let ck = Checkpoint::new(model.clone(), preprocess.clone(), epoch, loss);
    let header = serde_json::to_vec(&ck.header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(20 + header.len() + 4 * model.store.element_count());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, p) in model.store.iter() {
        for v in p.value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so an interrupted run never leaves a torn checkpoint
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut model = CascadeModel::<f32>::new(&header.cascade, header.grid, 0)?;
    if header.tensors.len() != model.store.len() {
        return Err(bad(&format!(
            "holds {} tensors, the configured cascade has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }
    let mut offset = 20 + len;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes.get(offset..offset + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        offset += 4 * n;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let value = ArrayD::from_shape_vec(IxDyn(&t.shape), values).map_err(|e| bad(&e.to_string()))?;
        model.store.set(&t.name, value)?;
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint { header, model })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> CascadeConfig {
        CascadeConfig {
            scales: vec![2, 1],
            base_filters: 1,
            levels: 1,
            context_filters: 2,
            ..CascadeConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = CascadeModel::<f32>::new(&tiny(), [8, 8, 8], 5).unwrap();
        let params = PreprocessParams {
            target_grid: [8, 8, 8],
            ..Default::default()
        };
        save(&path, &model, &params, Some(3), Some(0.25)).unwrap();
        let ck = load(&path).unwrap();
        assert_eq!(ck.header.epoch, Some(3));
        assert_eq!(ck.header.preprocess, params);
        for ((_, a), (_, b)) in model.store.iter().zip(ck.model.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert!(ck.check_compatible(&tiny(), &params).is_ok());
        assert!(ck.check_compatible(&CascadeConfig::desk(), &params).is_err());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"hello").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
        let model = CascadeModel::<f32>::new(&tiny(), [8, 8, 8], 5).unwrap();
        save(&path, &model, &PreprocessParams::default(), None, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, bytes).unwrap();
        assert!(load(&path).is_err());
    }
}
