//! Checkpoints: parameters, optimizer state, and the run configuration,
//! serialized as JSON. Values are written with shortest-round-trip f64
//! formatting, so a reloaded model reproduces forward passes bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::nn::Module;
use crate::numerics::Tensor;
use crate::trainer::adamw::AdamW;
use crate::trainer::model::AnyModel;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor in serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorBlob {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorBlob {
    pub fn from_tensor(t: &Tensor) -> Self {
        TensorBlob {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

/// Optimizer moments plus the live learning rate, keyed like the
/// parameters they track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub first_moment: BTreeMap<String, TensorBlob>,
    pub second_moment: BTreeMap<String, TensorBlob>,
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: TrainConfig,
    pub epoch: usize,
    /// Best dev mean CCC seen so far; absent before the first successful
    /// evaluation (JSON has no quiet NaN).
    pub best_dev_mean_ccc: Option<f64>,
    pub parameters: BTreeMap<String, TensorBlob>,
    pub optimizer: OptimizerState,
}

impl Checkpoint {
    /// Snapshot the model and optimizer.
    pub fn capture(
        config: &TrainConfig,
        epoch: usize,
        best_dev_mean_ccc: Option<f64>,
        model: &AnyModel,
        optimizer: &AdamW,
        learning_rate: f64,
    ) -> Self {
        let parameters = model
            .params()
            .into_iter()
            .map(|p| (p.name.clone(), TensorBlob::from_tensor(&p.value)))
            .collect();
        let blob_map = |m: &BTreeMap<String, Tensor>| {
            m.iter()
                .map(|(k, v)| (k.clone(), TensorBlob::from_tensor(v)))
                .collect()
        };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            epoch,
            best_dev_mean_ccc,
            parameters,
            optimizer: OptimizerState {
                step_count: optimizer.step_count,
                learning_rate,
                weight_decay: optimizer.weight_decay,
                first_moment: blob_map(&optimizer.first_moment),
                second_moment: blob_map(&optimizer.second_moment),
            },
        }
    }

    /// Rebuild the model with every parameter restored by name.
    pub fn build_model(&self) -> Result<AnyModel> {
        // The initializer draws are immediately overwritten, so any
        // seed works.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = AnyModel::new(&self.config.model, &mut rng)?;
        let mut restored = 0usize;
        for p in model.params_mut() {
            let blob = self.parameters.get(&p.name).ok_or_else(|| {
                Error::data(format!("checkpoint is missing parameter {}", p.name))
            })?;
            let value = blob.to_tensor()?;
            if value.shape() != p.value.shape() {
                return Err(Error::shape(format!(
                    "checkpoint parameter {} is {:?}, model expects {:?}",
                    p.name,
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value;
            restored += 1;
        }
        if restored != self.parameters.len() {
            return Err(Error::data(format!(
                "checkpoint carries {} parameters, model uses {restored}",
                self.parameters.len()
            )));
        }
        Ok(model)
    }

    /// Rebuild the optimizer with its moments restored.
    pub fn build_optimizer(&self) -> Result<AdamW> {
        let mut opt = AdamW::new(self.optimizer.weight_decay);
        opt.step_count = self.optimizer.step_count;
        for (name, blob) in &self.optimizer.first_moment {
            opt.first_moment.insert(name.clone(), blob.to_tensor()?);
        }
        for (name, blob) in &self.optimizer.second_moment {
            opt.second_moment.insert(name.clone(), blob.to_tensor()?);
        }
        Ok(opt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string(self)
            .map_err(|e| Error::data(format!("checkpoint encode failed: {e}")))?;
        fs::write(path.as_ref(), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| {
            Error::data(format!("checkpoint {} is unreadable: {e}", path.display()))
        })?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "checkpoint {} has version {}, this build reads {CHECKPOINT_VERSION}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
