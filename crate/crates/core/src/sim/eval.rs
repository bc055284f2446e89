//! Model evaluation on held-out batches.

use serde::Serialize;

use crate::backbone::{mse, Backbone, Batch};
use crate::error::Result;
use crate::sim::domains::Scenario;

/// Mean over samples of the squared residual norm divided by the output
/// dimension.
pub fn evaluate(backbone: &Backbone, batch: &Batch) -> Result<f64> {
    mse(&backbone.forward(&batch.inputs)?, &batch.targets)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairScore {
    pub pair: [usize; 2],
    pub mse: f64,
}

/// In-domain and cross-domain errors of one model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelScores {
    pub in_domain: Vec<f64>,
    pub cross_domain: Vec<PairScore>,
    pub mean_in_domain: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cross_domain: Option<f64>,
}

pub fn score_model(backbone: &Backbone, scenario: &Scenario) -> Result<ModelScores> {
    let in_domain: Vec<f64> = scenario
        .domains
        .iter()
        .map(|d| evaluate(backbone, &d.test))
        .collect::<Result<_>>()?;
    let cross_domain: Vec<PairScore> = scenario
        .cross
        .iter()
        .map(|t| {
            Ok(PairScore {
                pair: [t.pair.0, t.pair.1],
                mse: evaluate(backbone, &t.test)?,
            })
        })
        .collect::<Result<_>>()?;
    let mean_in_domain = in_domain.iter().sum::<f64>() / in_domain.len() as f64;
    let mean_cross_domain = (!cross_domain.is_empty())
        .then(|| cross_domain.iter().map(|p| p.mse).sum::<f64>() / cross_domain.len() as f64);
    Ok(ModelScores {
        in_domain,
        cross_domain,
        mean_in_domain,
        mean_cross_domain,
    })
}
