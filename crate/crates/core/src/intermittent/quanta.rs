use serde::{Deserialize, Serialize};

use super::IntermittentError;
use crate::devmodel::{HardwareProfile, KernelKind};

/// Largest `l` in `1..=extent` with `l * e_iter + e_ckpt <= budget`.
///
/// Every quanta pays one checkpoint, so the longest feasible quanta gives
/// the fewest checkpoints and the smallest total energy over the loop.
pub fn optimize_quanta(extent: u64, e_iter: f64, e_ckpt: f64, budget: f64) -> Result<u64, IntermittentError> {
    if extent == 0 {
        return Err(IntermittentError::InvalidArgument("extent must be >= 1".into()));
    }
    if !(e_iter > 0.0 && e_iter.is_finite() && e_ckpt > 0.0 && e_ckpt.is_finite()) {
        return Err(IntermittentError::InvalidArgument(format!(
            "per-iteration ({e_iter}) and checkpoint ({e_ckpt}) energies must be positive"
        )));
    }
    let fits = |l: u64| l as f64 * e_iter + e_ckpt <= budget;
    if !fits(1) {
        return Err(IntermittentError::InfeasibleBudget { e_iter, e_ckpt, budget });
    }
    let guess = ((budget - e_ckpt) / e_iter).floor();
    let mut l = if guess >= extent as f64 { extent } else { (guess as u64).clamp(1, extent) };
    while l < extent && fits(l + 1) {
        l += 1;
    }
    while l > 1 && !fits(l) {
        l -= 1;
    }
    Ok(l)
}

/// Loop cursor `(outer, inner)` of a linear iteration index.
pub fn cursor_of(index: u64, inner_extent: u64) -> (u64, u64) {
    let inner = inner_extent.max(1);
    (index / inner, index % inner)
}

/// A run of `l` consecutive loop iterations executed without interruption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quanta {
    pub kernel: KernelKind,
    pub start: u64,
    pub loop_cursor: (u64, u64),
    pub l: u64,
    /// Estimated energy in microjoules, checkpoint write included.
    pub e: f64,
}

impl Quanta {
    pub fn end(&self) -> u64 {
        self.start + self.l
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantaPlan {
    pub quanta: Vec<Quanta>,
    /// Per-quanta energy budget `E_b` in microjoules.
    pub budget: f64,
    pub e_iter: f64,
    pub e_ckpt: f64,
    pub extent: u64,
    pub inner_extent: u64,
}

impl QuantaPlan {
    /// Plans `extent` iterations as consecutive quanta of the given lengths.
    pub fn from_lengths(
        kernel: KernelKind,
        lengths: &[u64],
        inner_extent: u64,
        e_iter: f64,
        e_ckpt: f64,
        budget: f64,
    ) -> Result<Self, IntermittentError> {
        let mut start = 0;
        let mut quanta = Vec::with_capacity(lengths.len());
        for &l in lengths {
            if l == 0 {
                return Err(IntermittentError::InvalidArgument("quanta length must be >= 1".into()));
            }
            quanta.push(Quanta { kernel, start, loop_cursor: cursor_of(start, inner_extent), l, e: l as f64 * e_iter + e_ckpt });
            start += l;
        }
        let plan = Self { quanta, budget, e_iter, e_ckpt, extent: start, inner_extent };
        plan.validate()?;
        Ok(plan)
    }

    /// Splits `extent` iterations into quanta of `l` (the last may be shorter).
    pub fn uniform(
        kernel: KernelKind,
        extent: u64,
        inner_extent: u64,
        l: u64,
        e_iter: f64,
        e_ckpt: f64,
        budget: f64,
    ) -> Result<Self, IntermittentError> {
        if l == 0 {
            return Err(IntermittentError::InvalidArgument("quanta length must be >= 1".into()));
        }
        let mut lengths = vec![l; (extent / l) as usize];
        if extent % l != 0 {
            lengths.push(extent % l);
        }
        Self::from_lengths(kernel, &lengths, inner_extent, e_iter, e_ckpt, budget)
    }

    /// Optimal uniform plan for a kernel loop on `profile` under `budget` µJ.
    pub fn optimized(
        profile: &HardwareProfile,
        kernel: KernelKind,
        extent: u64,
        inner_extent: u64,
        macs_per_iter: u64,
        budget: f64,
    ) -> Result<Self, IntermittentError> {
        let e_iter = profile.iteration_energy_uj(kernel, macs_per_iter.max(1))?;
        let e_ckpt = profile.checkpoint_energy_uj();
        let l = optimize_quanta(extent, e_iter, e_ckpt, budget)?;
        Self::uniform(kernel, extent, inner_extent, l, e_iter, e_ckpt, budget)
    }

    /// One checkpoint per iteration, the naive baseline.
    pub fn per_iteration(
        profile: &HardwareProfile,
        kernel: KernelKind,
        extent: u64,
        inner_extent: u64,
        macs_per_iter: u64,
        budget: f64,
    ) -> Result<Self, IntermittentError> {
        let e_iter = profile.iteration_energy_uj(kernel, macs_per_iter.max(1))?;
        Self::uniform(kernel, extent, inner_extent, 1, e_iter, profile.checkpoint_energy_uj(), budget)
    }

    pub fn validate(&self) -> Result<(), IntermittentError> {
        let mut next = 0;
        for (i, q) in self.quanta.iter().enumerate() {
            if q.start != next || q.l == 0 {
                return Err(IntermittentError::InvalidPlan(format!("quanta {i} does not continue the tiling")));
            }
            if q.e > self.budget {
                return Err(IntermittentError::InvalidPlan(format!(
                    "quanta {i} needs {} uJ over the {} uJ budget",
                    q.e, self.budget
                )));
            }
            next = q.end();
        }
        if next != self.extent {
            return Err(IntermittentError::InvalidPlan(format!("plan covers {next} of {} iterations", self.extent)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.quanta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quanta.is_empty()
    }

    pub fn checkpoints(&self) -> usize {
        self.quanta.len()
    }

    pub fn total_energy(&self) -> f64 {
        self.quanta.iter().map(|q| q.e).sum()
    }

    pub fn max_quanta_energy(&self) -> f64 {
        self.quanta.iter().map(|q| q.e).fold(0.0, f64::max)
    }

    pub fn mean_quanta_energy(&self) -> f64 {
        if self.quanta.is_empty() {
            0.0
        } else {
            self.total_energy() / self.quanta.len() as f64
        }
    }
}

/// Greedily merges consecutive quanta while one merged quanta (all of its
/// iterations plus a single checkpoint) still fits in `budget`.
pub fn fuse_tasks(plan: &QuantaPlan, budget: f64) -> QuantaPlan {
    let energy = |l: u64| l as f64 * plan.e_iter + plan.e_ckpt;
    let mut fused: Vec<Quanta> = Vec::with_capacity(plan.quanta.len());
    for q in &plan.quanta {
        match fused.last_mut() {
            Some(cur) if cur.e <= budget && energy(cur.l + q.l) <= budget => {
                cur.l += q.l;
                cur.e = energy(cur.l);
            }
            _ => fused.push(*q),
        }
    }
    QuantaPlan { quanta: fused, budget, ..plan.clone() }
}
