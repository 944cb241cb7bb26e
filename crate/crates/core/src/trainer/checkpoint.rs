//! Binary checkpoint format.
//!
//! Layout: 8-byte magic, little-endian u32 format version, little-endian u64
//! JSON header length, the header itself, then the raw array payload —
//! every array as little-endian f64 in directory order. Parameters are bit
//! copies, so save/load round-trips reproduce forward passes exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::{Model, TrainConfig, TrainError};
use crate::diffcore::Tensor;
use crate::ssm::CohortSchema;

const MAGIC: &[u8; 8] = b"DSSMCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: CohortSchema,
    config: TrainConfig,
    epoch: usize,
    adam_step: u64,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::CheckpointIo {
        path: path.display().to_string(),
        detail: source.to_string(),
    }
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    adam: &Adam,
    config: &TrainConfig,
    epoch: usize,
) -> Result<(), TrainError> {
    let named = model.named_params();
    let mut arrays: Vec<ArrayEntry> = Vec::new();
    let mut payload: Vec<&Tensor> = Vec::new();
    for (name, tensor) in &named {
        arrays.push(ArrayEntry {
            name: format!("param.{name}"),
            shape: tensor.shape().to_vec(),
        });
        payload.push(tensor);
    }
    for (kind, moments) in [("m", &adam.m), ("v", &adam.v)] {
        for ((name, _), tensor) in named.iter().zip(moments) {
            arrays.push(ArrayEntry {
                name: format!("adam.{kind}.{name}"),
                shape: tensor.shape().to_vec(),
            });
            payload.push(tensor);
        }
    }

    let header = Header {
        schema: model.schema.clone(),
        config: config.clone(),
        epoch,
        adam_step: adam.step,
        rng: RngState {
            seed: config.seed,
            next_epoch: epoch,
        },
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| TrainError::CheckpointFormat {
        detail: e.to_string(),
    })?;

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(MAGIC).map_err(|e| io_err(path, e))?;
    writer
        .write_all(&FORMAT_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    writer
        .write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    writer.write_all(&header_bytes).map_err(|e| io_err(path, e))?;
    for tensor in payload {
        for value in tensor.data() {
            writer
                .write_all(&value.to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    writer.flush().map_err(|e| io_err(path, e))?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: Model,
    pub adam: Adam,
    pub config: TrainConfig,
    pub epoch: usize,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, TrainError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 8];
    reader.read_exact(&mut magic).map_err(|e| io_err(path, e))?;
    if &magic != MAGIC {
        return Err(TrainError::CheckpointFormat {
            detail: "bad magic".into(),
        });
    }
    let mut version = [0u8; 4];
    reader.read_exact(&mut version).map_err(|e| io_err(path, e))?;
    let version = u32::from_le_bytes(version);
    if version != FORMAT_VERSION {
        return Err(TrainError::CheckpointFormat {
            detail: format!("unsupported format version {version}"),
        });
    }
    let mut len = [0u8; 8];
    reader.read_exact(&mut len).map_err(|e| io_err(path, e))?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|e| io_err(path, e))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| TrainError::CheckpointFormat {
            detail: e.to_string(),
        })?;

    let mut arrays: Vec<(String, Tensor)> = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let count: usize = entry.shape.iter().product();
        let mut data = vec![0.0f64; count];
        let mut buf = [0u8; 8];
        for value in &mut data {
            reader.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
            *value = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| {
            TrainError::CheckpointFormat {
                detail: format!("array `{}`: {e}", entry.name),
            }
        })?;
        arrays.push((entry.name.clone(), tensor));
    }

    // Rebuild the model structure from schema + config, then overwrite every
    // tensor by name.
    let mut model = Model::init(header.schema.clone(), &header.config);
    let mut adam = Adam::new(
        header.config.learning_rate,
        &model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect::<Vec<_>>(),
    );
    adam.step = header.adam_step;

    let lookup: std::collections::BTreeMap<&str, &Tensor> = arrays
        .iter()
        .map(|(name, tensor)| (name.as_str(), tensor))
        .collect();
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    for (idx, name) in names.iter().enumerate() {
        let fetch = |key: String| -> Result<Tensor, TrainError> {
            lookup
                .get(key.as_str())
                .map(|t| (*t).clone())
                .ok_or_else(|| TrainError::CheckpointFormat {
                    detail: format!("missing array `{key}`"),
                })
        };
        let param = fetch(format!("param.{name}"))?;
        let m = fetch(format!("adam.m.{name}"))?;
        let v = fetch(format!("adam.v.{name}"))?;
        let target = &mut model.params_mut()[idx];
        if target.shape() != param.shape() {
            return Err(TrainError::CheckpointFormat {
                detail: format!("array `{name}` has shape {:?}, expected {:?}",
                    param.shape(), target.shape()),
            });
        }
        **target = param;
        adam.m[idx] = m;
        adam.v[idx] = v;
    }

    Ok(LoadedCheckpoint {
        model,
        adam,
        config: header.config,
        epoch: header.epoch,
    })
}
