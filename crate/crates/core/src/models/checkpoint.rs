//! JSON checkpoints holding every parameter set plus the metadata needed to
//! rebuild the networks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Models, NetConfig};
use crate::autodiff::Tensor;
use crate::dynamics::DynamicsKind;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub dynamics: DynamicsKind,
    pub net: NetConfig,
    pub delta_max: u64,
    pub ts: f64,
    pub training_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_models<F: Scalar>(models: &Models<F>, training_step: u64) -> Self {
        let params = models
            .store
            .ids()
            .map(|id| {
                let t = models.store.get(id);
                (
                    models.store.name(id).to_string(),
                    StoredTensor {
                        shape: t.shape(),
                        data: t.data.iter().map(|v| v.to_f64_lossy()).collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                dynamics: models.kind,
                net: models.net.clone(),
                delta_max: models.predictor.delta_max,
                ts: models.predictor.ts,
                training_step,
            },
            params,
        }
    }

    /// Rebuilds the networks and loads every tensor, checking names and shapes.
    pub fn to_models<F: Scalar>(&self) -> Result<Models<F>> {
        if self.meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.meta.format_version
            )));
        }
        let m = &self.meta;
        let mut models = Models::<F>::new(m.dynamics, &m.net, m.delta_max, m.ts, 0);
        let items: Vec<(&str, Tensor<F>)> = self
            .params
            .iter()
            .map(|(name, t)| {
                (
                    name.as_str(),
                    Tensor {
                        rows: t.shape[0],
                        cols: t.shape[1],
                        data: t.data.iter().map(|&v| F::lit(v)).collect(),
                    },
                )
            })
            .collect();
        if items.len() != models.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                models.store.len(),
                items.len()
            )));
        }
        models.store.load(items)?;
        Ok(models)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Errors unless the checkpoint was trained for `kind`.
    pub fn check_kind(&self, kind: DynamicsKind) -> Result<()> {
        if self.meta.dynamics != kind {
            return Err(Error::Checkpoint(format!(
                "checkpoint is for {} dynamics, scenario uses {}",
                self.meta.dynamics.name(),
                kind.name()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let m = Models::<f64>::new(DynamicsKind::DubinsCar, &NetConfig::default(), 10, 0.03, 9);
        let ck = Checkpoint::from_models(&m, 42);
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        let m2: Models<f64> = back.to_models().unwrap();
        assert_eq!(m2.store, m.store);
        assert_eq!(Checkpoint::from_models(&m2, 42).to_json().unwrap(), text);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let m = Models::<f64>::new(DynamicsKind::SingleIntegrator, &NetConfig::default(), 5, 0.03, 1);
        let mut ck = Checkpoint::from_models(&m, 0);
        let t = ck.params.get_mut("cbf.head.l0.w").unwrap();
        t.shape = [t.shape[1], t.shape[0]];
        assert!(ck.to_models::<f64>().is_err());
        let mut ck = Checkpoint::from_models(&m, 0);
        ck.params.remove("pred.head.l0.b");
        assert!(ck.to_models::<f64>().is_err());
        assert!(Checkpoint::from_models(&m, 0).check_kind(DynamicsKind::DubinsCar).is_err());
    }
}
