//! Checkpoint files.
//!
//! ```text
//! "SDCK"            magic
//! u32               format version
//! u64               header length
//! header            UTF-8 JSON: config, epoch, Adam step counts, random
//!                   streams, batch iterators, training log
//! rest              SDT1 container: `param/<name>`,
//!                   `adam/{main,dis}/{m,v}/<name>`
//! ```
//! Integers are little-endian. Every float is stored in its training type,
//! so save → load → save reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Streamset, TrainConfig, TrainLog, Trainer};
use crate::data::sdtensor::{self, TensorData, TensorMap};
use crate::data::BatchIterator;
use crate::error::{Error, Result};
use crate::networks::{ModelState, Net};
use crate::tensor::{AdamState, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TrainConfig,
    epoch: usize,
    adam_main_step: u64,
    adam_dis_step: u64,
    rngs: Streamset,
    outer: BatchIterator,
    inner: BatchIterator,
    log: TrainLog,
}

fn adam_entries(map: &mut TensorMap, group: &str, opt: &AdamState<f32>) {
    for (name, (m, v)) in &opt.moments {
        map.insert(format!("adam/{group}/m/{name}"), TensorData::F32(m.clone()));
        map.insert(format!("adam/{group}/v/{name}"), TensorData::F32(v.clone()));
    }
}

fn take_f32(map: &mut TensorMap, key: &str) -> Result<Tensor<f32>> {
    let t = map
        .remove(key)
        .ok_or_else(|| Error::Data(format!("checkpoint has no entry {key}")))?;
    t.as_exact::<f32>()
        .ok_or_else(|| Error::Data(format!("checkpoint entry {key} is not f32")))
}

impl Trainer {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            adam_main_step: self.state.opt_main.step,
            adam_dis_step: self.state.opt_dis.step,
            rngs: self.rngs.clone(),
            outer: self.outer.clone(),
            inner: self.inner.clone(),
            log: self.log.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut map = TensorMap::new();
        for (name, t) in &self.state.params {
            map.insert(format!("param/{name}"), TensorData::F32(t.clone()));
        }
        adam_entries(&mut map, "main", &self.state.opt_main);
        adam_entries(&mut map, "dis", &self.state.opt_dis);

        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&sdtensor::encode(&map)?);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Trainer> {
        let fail = |offset: usize, detail: &str| Error::Format {
            offset: offset as u64,
            detail: detail.into(),
        };
        if bytes.len() < 16 {
            return Err(fail(bytes.len(), "checkpoint shorter than its preamble"));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail(0, "bad magic, expected SDCK"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4"));
        if version != CHECKPOINT_VERSION {
            return Err(fail(4, &format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8"));
        let end = usize::try_from(len)
            .ok()
            .and_then(|l| l.checked_add(16))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| fail(8, "header length runs past the end of the file"))?;
        let header: Header = serde_json::from_slice(&bytes[16..end])?;
        let mut map = sdtensor::decode(&bytes[end..]).map_err(|e| match e {
            Error::Format { offset, detail } => Error::Format {
                offset: offset + end as u64,
                detail,
            },
            e => e,
        })?;

        let arch = header.config.arch.clone();
        arch.validate()?;
        let mut params = BTreeMap::new();
        for net in Net::ALL {
            for layer in net.layers(&arch) {
                for (name, shape) in [
                    (layer.weight(), [layer.fan_in, layer.fan_out]),
                    (layer.bias(), [1, layer.fan_out]),
                ] {
                    let t = take_f32(&mut map, &format!("param/{name}"))?;
                    if t.shape() != shape {
                        return Err(Error::Shape {
                            op: "load_checkpoint",
                            lhs: shape.to_vec(),
                            rhs: t.shape().to_vec(),
                        });
                    }
                    params.insert(name, t);
                }
            }
        }
        let mut adam = |group: &str, step: u64, dis: bool| -> Result<AdamState<f32>> {
            let mut moments = BTreeMap::new();
            for name in params.keys() {
                if (Net::of_param(name) == Some(Net::Discriminator)) != dis {
                    continue;
                }
                let m = take_f32(&mut map, &format!("adam/{group}/m/{name}"))?;
                let v = take_f32(&mut map, &format!("adam/{group}/v/{name}"))?;
                moments.insert(name.clone(), (m, v));
            }
            Ok(AdamState {
                config: header.config.adam,
                step,
                moments,
            })
        };
        let opt_main = adam("main", header.adam_main_step, false)?;
        let opt_dis = adam("dis", header.adam_dis_step, true)?;
        if let Some(extra) = map.keys().next() {
            return Err(Error::Data(format!("unexpected checkpoint entry {extra}")));
        }
        Ok(Trainer {
            state: ModelState {
                arch,
                params,
                opt_main,
                opt_dis,
            },
            config: header.config,
            epoch: header.epoch,
            log: header.log,
            rngs: header.rngs,
            outer: header.outer,
            inner: header.inner,
            observer: None,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Trainer> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Trainer::from_bytes(&bytes)
    }
}

/// The configuration and model stored in a checkpoint.
pub fn load_model(path: impl AsRef<Path>) -> Result<(TrainConfig, ModelState<f32>)> {
    let t = Trainer::load(path)?;
    Ok((t.config, t.state))
}
