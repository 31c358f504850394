//! Versioned JSON checkpoints: every named tensor with its shape and
//! row-major values, plus what inference needs to rebuild the model.

use std::fs;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Normalizer;
use crate::model::{Model, ModelConfig};
use crate::mtr::N_TARGETS;

pub const FORMAT: &str = "bayesmtr-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub onset: NaiveDate,
    pub residual_var: Option<[f64; N_TARGETS]>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, normalizer: Normalizer, onset: NaiveDate) -> Result<Self> {
        let mut tensors = Vec::with_capacity(model.params.len());
        for t in model.params.tensors() {
            if t.value.iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("tensor `{}` holds a non-finite value", t.name)));
            }
            let (r, c) = t.value.dim();
            tensors.push(TensorRecord { name: t.name.clone(), shape: [r, c], values: t.value.iter().copied().collect() });
        }
        Ok(Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model: model.config.clone(),
            normalizer,
            onset,
            residual_var: model.residual_var,
            tensors,
        })
    }

    /// Rebuilds the model. The tensor list must match the configured layout
    /// exactly, by name, order and shape.
    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        let mut model = Model::new(self.model, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                self.tensors.len()
            )));
        }
        for (slot, rec) in model.params.tensors_mut().iter_mut().zip(self.tensors) {
            if slot.name != rec.name {
                return Err(Error::Checkpoint(format!("expected tensor `{}`, found `{}`", slot.name, rec.name)));
            }
            let shape = (rec.shape[0], rec.shape[1]);
            if slot.value.dim() != shape {
                return Err(Error::Checkpoint(format!("tensor `{}` has shape {:?}, expected {:?}", rec.name, shape, slot.value.dim())));
            }
            slot.value = Array2::from_shape_vec(shape, rec.values)
                .map_err(|_| Error::Checkpoint(format!("tensor `{}` value count does not match its shape", rec.name)))?;
        }
        model.residual_var = self.residual_var;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::default_onset;
    use crate::model::Ablation;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.attention.d_model = 8;
        c.attention.d_k = 4;
        c.attention.d_v = 4;
        c.attention.n_heads = 2;
        c.d_latent = 6;
        c.max_visits = 5;
        c.trunk = vec![7, 5];
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for ablation in [Ablation::Full, Ablation::NoDeepmtr] {
            let mut model = Model::new(ModelConfig { ablation, ..small() }, 13).unwrap();
            model.params.tensors_mut()[0].value[[0, 0]] = 1.0 / 3.0;
            model.params.tensors_mut()[1].value[[0, 1]] = -2.2250738585072014e-308;
            model.residual_var = Some([0.1, 1e-300, 0.3, 7.0 / 9.0]);
            let ck = Checkpoint::from_model(&model, Normalizer::default(), default_onset()).unwrap();
            let json = serde_json::to_string(&ck).unwrap();
            let back: Checkpoint = serde_json::from_str(&json).unwrap();
            let restored = back.into_model().unwrap();
            for (a, b) in model.params.tensors().iter().zip(restored.params.tensors()) {
                assert_eq!(a.name, b.name);
                assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(model.residual_var, restored.residual_var);
            assert_eq!(model.config, restored.config);
        }
    }

    #[test]
    fn mismatches_are_rejected() {
        let model = Model::new(small(), 1).unwrap();
        let ck = Checkpoint::from_model(&model, Normalizer::default(), default_onset()).unwrap();

        let mut bad = ck.clone();
        bad.version = 99;
        assert!(matches!(bad.into_model(), Err(Error::Checkpoint(_))));

        let mut bad = ck.clone();
        bad.tensors[2].shape = [1, 1];
        assert!(matches!(bad.into_model(), Err(Error::Checkpoint(_))));

        let mut bad = ck.clone();
        bad.tensors.pop();
        assert!(matches!(bad.into_model(), Err(Error::Checkpoint(_))));

        let mut bad = ck;
        bad.tensors[0].name = "renamed".into();
        assert!(matches!(bad.into_model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn non_finite_weights_cannot_be_saved() {
        let mut model = Model::new(small(), 1).unwrap();
        model.params.tensors_mut()[3].value[[0, 0]] = f64::NAN;
        assert!(Checkpoint::from_model(&model, Normalizer::default(), default_onset()).is_err());
    }
}
