//! BCE + Dice objective with supervision on every round's map.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Inference threshold on similarity maps; values at the threshold count as foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_bce: f64,
    pub lambda_dice: f64,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_bce: 1.0, lambda_dice: 1.0, dice_eps: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_bce < 0.0 || self.lambda_dice < 0.0 || self.dice_eps < 0.0 {
            return Err(Error::Config("loss weights and dice_eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean cross-entropy over all phrase/pixel pairs.
pub fn bce_loss(tape: &mut Tape, h: Var, y: &Tensor) -> Result<Var> {
    tape.bce(h, y)
}

pub fn dice_loss(tape: &mut Tape, h: Var, y: &Tensor, eps: f64) -> Result<Var> {
    tape.dice(h, y, eps)
}

/// Per-round breakdown of the objective.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub per_round: Vec<f64>,
}

/// Sum over rounds of `λ_bce·BCE + λ_dice·Dice`.
pub fn total_loss(tape: &mut Tape, history: &[Var], y: &Tensor, cfg: &LossConfig) -> Result<(Var, LossParts)> {
    if history.is_empty() {
        return Err(Error::Contract("loss over an empty map history".into()));
    }
    let mut total: Option<Var> = None;
    let mut parts = LossParts { total: 0.0, bce: 0.0, dice: 0.0, per_round: Vec::with_capacity(history.len()) };
    for &h in history {
        let b = bce_loss(tape, h, y)?;
        let d = dice_loss(tape, h, y, cfg.dice_eps)?;
        let (bv, dv) = (tape.value(b).item(), tape.value(d).item());
        let wb = tape.scale(b, cfg.lambda_bce);
        let wd = tape.scale(d, cfg.lambda_dice);
        let round = tape.add(wb, wd)?;
        parts.bce += bv;
        parts.dice += dv;
        parts.per_round.push(tape.value(round).item());
        total = Some(match total {
            Some(t) => tape.add(t, round)?,
            None => round,
        });
    }
    let total = total.expect("non-empty history");
    parts.total = tape.value(total).item();
    Ok((total, parts))
}

/// Binary masks `H ≥ threshold`.
pub fn infer(h: &Tensor, threshold: f64) -> Vec<Vec<bool>> {
    (0..h.rows()).map(|j| h.row(j).iter().map(|&v| v >= threshold).collect()).collect()
}
