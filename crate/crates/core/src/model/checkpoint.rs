use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamState, ModelConfig, ModelParams};
use crate::error::{GdrtError, Result};
use crate::io;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlice {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Enough to resume a ChaCha stream exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// Self-describing JSON container: named parameter tensors, optimizer
/// moments, model config and shuffle RNG position. Floats are written in
/// shortest round-trip form, so loading reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub epoch: usize,
    pub step: usize,
    pub slices: Vec<NamedSlice>,
    pub optimizer: Option<AdamState>,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn capture(
        params: &ModelParams,
        epoch: usize,
        step: usize,
        optimizer: Option<&AdamState>,
        rng: Option<RngState>,
    ) -> Self {
        Checkpoint {
            config: params.config.clone(),
            epoch,
            step,
            slices: params
                .named_slices()
                .map(|(name, shape, range)| NamedSlice {
                    name: name.to_string(),
                    shape: shape.to_vec(),
                    values: params.data[range].to_vec(),
                })
                .collect(),
            optimizer: optimizer.cloned(),
            rng,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        let template = ModelParams::from_data(&self.config, vec![0.0; super::ParamLayout::new(&self.config).total])?;
        let mut data = Vec::with_capacity(template.len());
        for ((name, shape, range), slice) in template.named_slices().zip(&self.slices) {
            if slice.name != name || slice.shape != shape || slice.values.len() != range.len() {
                return Err(GdrtError::ShapeMismatch(format!(
                    "checkpoint slice `{}` {:?} does not match expected `{name}` {shape:?}",
                    slice.name, slice.shape
                )));
            }
            data.extend_from_slice(&slice.values);
        }
        if self.slices.len() != template.named_slices().count() {
            return Err(GdrtError::ShapeMismatch(
                "checkpoint has the wrong number of slices".into(),
            ));
        }
        ModelParams::from_data(&self.config, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let config = ModelConfig {
            embed_dim: 8,
            ..ModelConfig::new(12, 10, 4)
        };
        let params = ModelParams::init(&config).unwrap();
        let mut adam = AdamState::new(params.len());
        for (i, m) in adam.m.iter_mut().enumerate() {
            *m = (i as f64 * 0.37).sin() / 3.0;
        }
        let ckpt = Checkpoint::capture(
            &params,
            2,
            17,
            Some(&adam),
            Some(RngState {
                seed: 9,
                word_pos: 12345,
            }),
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        let restored = loaded.params().unwrap();
        for (a, b) in restored.data.iter().zip(&params.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
