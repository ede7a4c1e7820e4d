use serde::{Deserialize, Serialize};

use super::network::{LossKind, Network, SiteMask, Tensor};
use super::DynfitError;
use crate::kernels::BitWidth;

/// Per-neuron-group bit widths with their penalty weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantAssignment {
    pub q: Vec<BitWidth>,
    pub c: Vec<f64>,
    pub lambda: f64,
}

impl QuantAssignment {
    pub fn uniform(groups: usize, bits: BitWidth, cost: f64, lambda: f64) -> Self {
        Self { q: vec![bits; groups], c: vec![cost; groups], lambda }
    }

    pub fn validate(&self) -> Result<(), DynfitError> {
        if self.q.len() != self.c.len() {
            return Err(DynfitError::ShapeMismatch(format!("{} bit widths but {} costs", self.q.len(), self.c.len())));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || self.c.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(DynfitError::Config("lambda and costs must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `lambda * sum c_i q_i` with `q_i` in bits.
    pub fn penalty(&self) -> f64 {
        self.lambda * self.q.iter().zip(&self.c).map(|(q, c)| c * q.bits() as f64).sum::<f64>()
    }

    pub fn mean_bits(&self) -> f64 {
        if self.q.is_empty() {
            return 0.0;
        }
        self.q.iter().map(|q| q.bits() as f64).sum::<f64>() / self.q.len() as f64
    }
}

pub fn quant_penalty_loss(base_loss: f64, quant: &QuantAssignment) -> f64 {
    base_loss + quant.penalty()
}

/// Greedy bit-width reduction over the groups flagged `at_risk`: each one
/// steps down the ladder while that lowers the penalized loss on the batch.
pub fn optimize_quant_levels(
    net: &Network,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    loss: LossKind,
    quant: &QuantAssignment,
    at_risk: &[bool],
) -> Result<QuantAssignment, DynfitError> {
    let ones = SiteMask::all_ones(net);
    let eval = |qa: &QuantAssignment| -> Result<f64, DynfitError> {
        let l = net.fake_quantized(&qa.q)?.loss(xs, targets, &ones, loss)?;
        if !l.is_finite() {
            return Err(DynfitError::NonFiniteLoss);
        }
        Ok(quant_penalty_loss(l, qa))
    };
    let mut best = quant.clone();
    let mut best_loss = eval(&best)?;
    for (g, _) in at_risk.iter().enumerate().filter(|(_, &r)| r) {
        while let Some(lower) = best.q[g].step_down() {
            let mut trial = best.clone();
            trial.q[g] = lower;
            let l = eval(&trial)?;
            if l < best_loss {
                best = trial;
                best_loss = l;
            } else {
                break;
            }
        }
    }
    Ok(best)
}
