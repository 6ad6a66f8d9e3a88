//! The training objective: convex/concave decomposition of the max-margin
//! energy.

use rayon::prelude::*;

use crate::inference::InferenceConfig;
use crate::model::Model;

use super::latents::{estimate_latent, top_windows, TrainingSample};

/// Term-by-term breakdown of the objective `f(w) - g(w)`: the regularizer
/// and the loss-augmented maxima form the convex part, the latent maxima of
/// the positives form the concave part.
#[derive(Debug, Clone, Copy)]
pub struct EnergyReport {
    pub objective: f64,
    pub regularizer: f64,
    pub hinge_term: f64,
    pub concave_term: f64,
}

/// Evaluates the energy at the model's current parameters. One latent-domain
/// maximization per positive serves both the convex and the concave term;
/// negatives contribute their best whole-image window plus the unit loss.
pub fn energy(
    model: &Model,
    samples: &[TrainingSample],
    lambda: f64,
    latent_cfg: &InferenceConfig,
    mining_cfg: &InferenceConfig,
) -> EnergyReport {
    let regularizer = 0.5 * model.params.flat.iter().map(|v| v * v).sum::<f64>();
    let terms: Vec<(f64, f64)> = samples
        .par_iter()
        .map(|sample| {
            if sample.label > 0 {
                let gt = sample.gt_window.expect("positive carries a window");
                let latent_max = estimate_latent(model, &sample.map, &gt, latent_cfg)
                    .map(|p| p.score)
                    .unwrap_or(0.0);
                (latent_max.max(1.0), latent_max)
            } else {
                let best = top_windows(model, &sample.map, mining_cfg, 1)
                    .first()
                    .map(|p| p.score)
                    .unwrap_or(f64::NEG_INFINITY);
                ((best + 1.0).max(0.0), 0.0)
            }
        })
        .collect();
    let hinge_term: f64 = lambda * terms.iter().map(|t| t.0).sum::<f64>();
    let concave_term: f64 = lambda * terms.iter().map(|t| t.1).sum::<f64>();
    EnergyReport {
        objective: regularizer + hinge_term - concave_term,
        regularizer,
        hinge_term,
        concave_term,
    }
}
