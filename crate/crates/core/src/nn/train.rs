//! Local SGD: the per-round client update that produces the uplink payload.

use rand_chacha::ChaCha8Rng;

use super::{backward, Batch, LayeredModel};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Hyperparameters of the local training process and the loss-drop bound.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainingHyperparams {
    /// SGD learning rate (eta).
    pub eta: f64,
    /// Local steps per round (tau).
    pub tau: u32,
    /// Mini-batch size per local step.
    pub batch_size: usize,
    /// Smoothness constant L of the loss-drop surrogate.
    pub l_smooth: f64,
    /// Gradient-noise variance sigma^2 of the surrogate.
    pub sigma_sq: f64,
    /// Participating clients n.
    pub n_clients: usize,
}

impl TrainingHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!("eta must be finite >= 0, got {}", self.eta)));
        }
        if self.tau < 1 {
            return Err(Error::config("tau must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if !(self.l_smooth > 0.0) {
            return Err(Error::config(format!(
                "l_smooth must be > 0, got {}",
                self.l_smooth
            )));
        }
        if !(self.sigma_sq >= 0.0) {
            return Err(Error::config(format!(
                "sigma_sq must be >= 0, got {}",
                self.sigma_sq
            )));
        }
        if self.n_clients == 0 {
            return Err(Error::config("n_clients must be >= 1"));
        }
        Ok(())
    }
}

/// What local training hands to the planner and the uplink.
#[derive(Debug, Clone)]
pub struct GradientStats {
    /// Sum of squared stochastic-gradient norms over the tau steps.
    pub sq_norm_sum: f64,
    /// Per-layer model update (final minus initial weights).
    pub per_layer_update: Vec<Vec<f64>>,
}

/// Run `tau` mini-batch SGD steps on a shard.
///
/// Returns the post-training model and the update. The update is accumulated
/// directly (delta -= eta * grad each step, weights recomputed as
/// initial + delta), so `updated == initial + delta` holds exactly and a
/// single full-batch step returns exactly `-eta * grad`.
pub fn local_train(
    model: &LayeredModel,
    shard: &Dataset,
    hp: &TrainingHyperparams,
    rng: &mut ChaCha8Rng,
) -> Result<(LayeredModel, GradientStats)> {
    hp.validate()?;
    if shard.len() < hp.batch_size {
        return Err(Error::config(format!(
            "shard has {} samples, batch_size is {}",
            shard.len(),
            hp.batch_size
        )));
    }
    let mut delta = model.zero_delta();
    let mut current = model.clone();
    let mut sq_norm_sum = 0.0;

    for step in 0..hp.tau {
        let batch = if hp.batch_size == shard.len() {
            Batch::full(shard)
        } else {
            let picks = rand::seq::index::sample(rng, shard.len(), hp.batch_size).into_vec();
            Batch::from_indices(shard, &picks)
        };
        let out = backward(&current, &batch)?;
        let mut sq = 0.0;
        for layer in &out.grads {
            for &g in layer {
                sq += g * g;
            }
        }
        sq_norm_sum += sq;
        for (d_layer, g_layer) in delta.iter_mut().zip(&out.grads) {
            for (d, &g) in d_layer.iter_mut().zip(g_layer) {
                *d -= hp.eta * g;
            }
        }
        current = model.plus(&delta);
        if let Some(bad) = current
            .params
            .iter()
            .flat_map(|p| p.iter())
            .find(|v| !v.is_finite())
        {
            return Err(Error::numeric(format!(
                "non-finite weight {bad} after local step {step}"
            )));
        }
    }

    Ok((
        current,
        GradientStats {
            sq_norm_sum,
            per_layer_update: delta,
        },
    ))
}
