//! Recurrent (variational) dropout: one mask per sequence and site, reused
//! at every time step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{DropoutMasks, ModelConfig};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DropoutRates {
    /// Source and target embeddings.
    pub embedding: f64,
    /// Encoder states (both directions) and the decoder state.
    pub hidden: f64,
    /// Attention context vector.
    pub context: f64,
}

impl DropoutRates {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (site, rate) in [
            ("embedding", self.embedding),
            ("hidden", self.hidden),
            ("context", self.context),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(TrainError::DropoutRate { site, rate });
            }
        }
        Ok(())
    }

    pub fn is_off(&self) -> bool {
        self.embedding == 0.0 && self.hidden == 0.0 && self.context == 0.0
    }
}

/// Masks for one minibatch (one row per sequence).
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutPlan {
    pub rates: DropoutRates,
    pub seed: u64,
    pub masks: DropoutMasks,
}

fn mask(rng: &mut ChaCha8Rng, rows: usize, width: usize, rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    let data = (0..rows * width)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(vec![rows, width], data).expect("length matches shape")
}

/// Draws `Bernoulli(1 - rate) / (1 - rate)` masks for every site.
pub fn make_dropout_plan(
    config: &ModelConfig,
    rates: DropoutRates,
    rows: usize,
    seed: u64,
) -> Result<DropoutPlan, TrainError> {
    rates.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = DropoutMasks {
        source_embedding: Some(mask(&mut rng, rows, config.source_embedding_dim, rates.embedding)),
        target_embedding: Some(mask(&mut rng, rows, config.target_embedding_dim, rates.embedding)),
        encoder_forward: Some(mask(&mut rng, rows, config.encoder_dim, rates.hidden)),
        encoder_backward: Some(mask(&mut rng, rows, config.encoder_dim, rates.hidden)),
        decoder_state: Some(mask(&mut rng, rows, config.decoder_dim, rates.hidden)),
        context: Some(mask(&mut rng, rows, config.annotation_dim(), rates.context)),
    };
    Ok(DropoutPlan { rates, seed, masks })
}
