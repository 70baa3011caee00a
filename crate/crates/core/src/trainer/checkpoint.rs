use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::decoder::BatteryConfig;
use crate::diffcore::{Matrix, Parameters};
use crate::encoder::HrmConfig;
use crate::error::{Error, Result};
use crate::model::SeqBattNet;
use crate::objective::LossConfig;

pub const CHECKPOINT_FORMAT: &str = "seqbattnet-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
}

/// Serialized model plus the configuration that produced it. Numbers are
/// written in shortest round-trip form, so reloading is exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub hrm: HrmConfig,
    pub battery: BatteryConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Epoch (1-based) at which these weights were recorded.
    pub epoch: usize,
    pub best_val_loss: f64,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn capture(
        model: &SeqBattNet,
        loss: &LossConfig,
        train: &TrainConfig,
        seed: u64,
        epoch: usize,
        best_val_loss: f64,
    ) -> Self {
        let params = model
            .named_params("")
            .into_iter()
            .map(|(name, m)| NamedArray {
                name,
                rows: m.nrows(),
                cols: m.ncols(),
                values: m.iter().copied().collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            hrm: model.hrm.clone(),
            battery: model.battery.clone(),
            loss: loss.clone(),
            train: train.clone(),
            seed,
            epoch,
            best_val_loss,
            params,
        }
    }

    /// Rebuilds the model, checking every array name and shape.
    pub fn model(&self) -> Result<SeqBattNet> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format `{}`", self.format)));
        }
        let mut model = SeqBattNet::init(
            self.hrm.clone(),
            self.battery.clone(),
            &mut crate::rng::seeded(0),
        )?;
        let expected: Vec<(String, (usize, usize))> = model
            .named_params("")
            .into_iter()
            .map(|(n, m)| (n, m.dim()))
            .collect();
        if expected.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} arrays, model needs {}",
                self.params.len(),
                expected.len()
            )));
        }
        let mut arrays = Vec::with_capacity(expected.len());
        for ((name, dim), stored) in expected.iter().zip(&self.params) {
            if *name != stored.name || *dim != (stored.rows, stored.cols) {
                return Err(Error::Shape(format!(
                    "checkpoint array `{}` {}x{} does not match `{name}` {dim:?}",
                    stored.name, stored.rows, stored.cols
                )));
            }
            arrays.push(
                Matrix::from_shape_vec(*dim, stored.values.clone())
                    .map_err(|e| Error::Shape(format!("{name}: {e}")))?,
            );
        }
        let mut k = 0;
        model.visit_mut(&mut |m| {
            *m = arrays[k].clone();
            k += 1;
        });
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
