//! BCE + soft-IoU supervision and the λ-weighted multi-level total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

pub const LEVELS: usize = 5;
pub const BRANCHES: usize = 3;

/// Per-level weights λ_1..λ_5.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights(pub [f64; LEVELS]);

impl Default for LossWeights {
    fn default() -> Self {
        Self([1.0, 0.8, 0.6, 0.4, 0.2])
    }
}

impl LossWeights {
    pub fn new(lambdas: [f64; LEVELS]) -> Result<Self> {
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::invalid(format!("loss weights must be non-negative: {lambdas:?}")));
        }
        Ok(Self(lambdas))
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.map(|l| l * c))
    }
}

/// Mean binary cross-entropy, predictions clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    pred.bce(gt)
}

/// `1 − (Σpg + 1) / (Σp + Σg − Σpg + 1)`.
pub fn iou_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    pred.iou(gt)
}

/// BCE + IoU of one output map.
pub fn level_loss<'t>(pred: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    bce_loss(pred, gt)?.add(iou_loss(pred, gt)?)
}

/// `Σ_i λ_i (L_i(R) + L_i(D) + L_i(S))` over `maps[branch][level]`.
pub fn multilevel_loss<'t>(maps: &[Vec<Var<'t>>], gt: &Tensor, weights: &LossWeights) -> Result<Var<'t>> {
    if maps.len() != BRANCHES {
        return Err(Error::invalid(format!(
            "multilevel_loss: expected {BRANCHES} branches, got {}",
            maps.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for (level, lambda) in weights.0.iter().enumerate() {
        for (b, branch) in maps.iter().enumerate() {
            let pred = *branch.get(level).ok_or_else(|| {
                Error::invalid(format!("multilevel_loss: branch {b} has no level {}", level + 1))
            })?;
            let term = level_loss(pred, gt)?.scale(*lambda);
            total = Some(match total {
                None => term,
                Some(t) => t.add(term)?,
            });
        }
    }
    for (b, branch) in maps.iter().enumerate() {
        if branch.len() != LEVELS {
            return Err(Error::invalid(format!(
                "multilevel_loss: branch {b} has {} levels, expected {LEVELS}",
                branch.len()
            )));
        }
    }
    Ok(total.expect("non-empty"))
}
