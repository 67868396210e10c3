//! Model and optimizer snapshots stored as a VESC container.
//!
//! Record 0 is a `1 × 1` matrix holding `log τ` whose label is the TOML
//! [`CheckpointMeta`]. It is followed by one `1 × len` record per parameter
//! buffer labeled `param:<name>`, then `adam.m:<name>` and `adam.v:<name>`
//! records in the same order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::head::ParamSet;
use super::optim::OptimizerState;
use super::train::{Trainer, TrainConfig};
use crate::cache::{decode, encode, write_atomic, CacheRecord};
use crate::error::{Error, Result};
use crate::objective::{Model, Temperature};
use crate::tensor::{Matrix, Real};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format: u32,
    pub step: u64,
    pub adam_step: u64,
    pub d_audio_in: usize,
    pub d_visual_in: usize,
    /// Training-set size, needed to replay the sampler when resuming.
    pub n_train: usize,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
}

impl<T: Real> Checkpoint<T> {
    pub fn from_trainer(t: &Trainer<T>, n_train: usize) -> Self {
        Self {
            meta: CheckpointMeta {
                format: FORMAT_VERSION,
                step: t.step,
                adam_step: t.optimizer.step,
                d_audio_in: t.model.audio.d_in(),
                d_visual_in: t.model.visual.d_in(),
                n_train,
                train: t.config.clone(),
            },
            model: t.model.clone(),
            optimizer: t.optimizer.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer<T>> {
        Trainer::resume(self.meta.train, self.model, Some(self.optimizer), self.meta.step, self.meta.n_train)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = toml::to_string(&self.meta).map_err(|e| Error::InvalidArgument(format!("serializing checkpoint meta: {e}")))?;
        let mut records = vec![CacheRecord::new(
            Matrix::filled(1, 1, self.model.temperature.log_value),
            None,
            meta.into_bytes(),
        )];
        let row = |s: &[T]| Matrix::from_vec(1, s.len(), s.to_vec()).expect("row");
        self.model.visit(&mut |name, s| {
            if name != "log_tau" {
                records.push(CacheRecord::new(row(s), None, format!("param:{name}").into_bytes()));
            }
        });
        let layout = self.model.layout();
        for (prefix, moments) in [("adam.m", &self.optimizer.first_moment), ("adam.v", &self.optimizer.second_moment)] {
            for ((name, _), m) in layout.iter().zip(moments) {
                records.push(CacheRecord::new(row(m), None, format!("{prefix}:{name}").into_bytes()));
            }
        }
        encode(&records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let records = decode::<T>(bytes, path)?;
        let bad = |detail: String| Error::Parse {
            what: "checkpoint",
            path: path.to_path_buf(),
            detail,
        };
        let (head, rest) = records.split_first().ok_or_else(|| bad("no records".into()))?;
        let text = std::str::from_utf8(&head.label).map_err(|e| bad(format!("meta label: {e}")))?;
        let meta: CheckpointMeta = toml::from_str(text).map_err(|e| bad(format!("meta: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(bad(format!("format {} is not supported", meta.format)));
        }
        meta.train.validate()?;
        if head.matrix.shape() != (1, 1) {
            return Err(bad("meta record must be 1x1".into()));
        }

        let mut model = Model {
            audio: super::head::ProjectionHead::zeros(meta.d_audio_in, meta.train.hidden_dim, meta.train.embed_dim),
            visual: super::head::ProjectionHead::zeros(meta.d_visual_in, meta.train.hidden_dim, meta.train.embed_dim),
            temperature: Temperature { log_value: head.matrix[(0, 0)] },
        };
        let layout = model.layout();
        if rest.len() != (layout.len() - 1) + 2 * layout.len() {
            return Err(bad(format!("{} buffer records for a layout of {}", rest.len(), layout.len())));
        }
        let mut it = rest.iter();
        let mut take = |expected: &str, len: usize| -> Result<Vec<T>> {
            let r = it.next().expect("count checked");
            if r.label != expected.as_bytes() || r.matrix.as_slice().len() != len {
                return Err(bad(format!(
                    "expected {expected} with {len} values, found {} with {}",
                    String::from_utf8_lossy(&r.label),
                    r.matrix.as_slice().len()
                )));
            }
            Ok(r.matrix.as_slice().to_vec())
        };
        let mut flat = Vec::with_capacity(model.num_params());
        for (name, len) in &layout {
            if name == "log_tau" {
                flat.push(model.temperature.log_value);
            } else {
                flat.extend(take(&format!("param:{name}"), *len)?);
            }
        }
        model.assign_flat(&flat);
        let mut optimizer = OptimizerState::new(&model);
        optimizer.step = meta.adam_step;
        for (prefix, slot) in [("adam.m", 0), ("adam.v", 1)] {
            for (i, (name, len)) in layout.iter().enumerate() {
                let v = take(&format!("{prefix}:{name}"), *len)?;
                if slot == 0 {
                    optimizer.first_moment[i] = v;
                } else {
                    optimizer.second_moment[i] = v;
                }
            }
        }
        Ok(Self { meta, model, optimizer })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
