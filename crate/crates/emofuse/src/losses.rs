//! Combined objective: weighted Euclidean loss over the 26 discrete
//! categories, smooth-L1 loss over the 3 continuous dimensions, and the
//! lambda-weighted combination, all differentiable on the tape.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::N_CATEGORIES;
use crate::tensor::{Result as TensorResult, Tape, VarId};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("invalid loss weights: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_disc: f32,
    pub lambda_cont: f32,
    /// Weight-range constant: w_i = 1 / ln(c + p_i).
    pub c: f32,
    /// Per-dimension continuous weights.
    pub v: [f32; 3],
    /// Training-split category priors.
    pub priors: Vec<f32>,
    pub huber_delta: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_disc: 1.0,
            lambda_cont: 1.0,
            c: 1.2,
            v: [1.0, 1.0, 1.0],
            priors: vec![0.5; N_CATEGORIES],
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.lambda_disc < 0.0 {
            return Err(LossError::Invalid("lambda_disc must be nonnegative".into()));
        }
        if self.lambda_cont < 0.0 {
            return Err(LossError::Invalid("lambda_cont must be nonnegative".into()));
        }
        if self.v.iter().any(|&v| v < 0.0) {
            return Err(LossError::Invalid("v entries must be nonnegative".into()));
        }
        if self.huber_delta <= 0.0 {
            return Err(LossError::Invalid("huber_delta must be positive".into()));
        }
        if self.priors.len() != N_CATEGORIES {
            return Err(LossError::Invalid(format!(
                "priors has length {}, expected {N_CATEGORIES}",
                self.priors.len()
            )));
        }
        for (i, &p) in self.priors.iter().enumerate() {
            if self.c + p <= 1.0 {
                return Err(LossError::Invalid(format!(
                    "c + p_{i} = {} <= 1 gives a non-positive log",
                    self.c + p
                )));
            }
        }
        Ok(())
    }
}

/// w_i = 1 / ln(c + p_i). Rarer categories weigh more.
pub fn category_weights(lw: &LossWeights) -> Result<Vec<f32>, LossError> {
    lw.validate()?;
    Ok(lw
        .priors
        .iter()
        .map(|&p| (1.0 / (f64::from(lw.c) + f64::from(p)).ln()) as f32)
        .collect())
}

/// Weighted Euclidean loss: sum_i w_i (y_i^real - y_i^pred)^2.
pub fn loss_disc(tape: &mut Tape, pred: VarId, real: &[f32], w: &[f32]) -> TensorResult<VarId> {
    tape.weighted_sq_sum(pred, real, w)
}

/// Smooth-L1 continuous loss: sum_k v_k h(y_k^real - y_k^pred).
pub fn loss_cont(
    tape: &mut Tape,
    pred: VarId,
    real: &[f32],
    v: &[f32],
    delta: f32,
) -> TensorResult<VarId> {
    tape.weighted_huber_sum(pred, real, v, delta)
}

/// L_comb = lambda_disc * L_disc + lambda_cont * L_cont.
pub fn loss_comb(
    tape: &mut Tape,
    disc: VarId,
    cont: VarId,
    lambda_disc: f32,
    lambda_cont: f32,
) -> TensorResult<VarId> {
    let d = tape.scale(disc, lambda_disc)?;
    let c = tape.scale(cont, lambda_cont)?;
    tape.add(d, c)
}
