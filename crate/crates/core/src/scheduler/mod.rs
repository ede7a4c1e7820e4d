use serde::{Deserialize, Serialize};
use thiserror::Error;

mod run;

pub use run::{run_inference, Escalation, InferenceConfig, InferenceOutcome, InferenceReport, SchedEvent, SchedEventKind};

use crate::devmodel::{HardwareProfile, KernelKind};
use crate::dynfit::{DynfitError, Network};
use crate::intermittent::{fuse_tasks, IntermittentError, QuantaPlan};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error(transparent)]
    Intermittent(#[from] IntermittentError),
    #[error(transparent)]
    Dynfit(#[from] DynfitError),
    #[error("invalid task graph: {0}")]
    InvalidGraph(String),
    #[error("invalid inference config: {0}")]
    Config(String),
}

impl SchedulerError {
    /// Whether the device ran out of energy, as opposed to bad input.
    pub fn is_starvation(&self) -> bool {
        matches!(self, SchedulerError::Intermittent(IntermittentError::Starvation { .. }))
    }
}

/// How layer loops are cut into checkpointed quanta.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    /// Optimal quanta length, then task fusion.
    #[default]
    Optimized,
    /// A checkpoint after every iteration.
    PerIteration,
}

/// Builds the loop plan of one layer under `budget_uj`.
pub fn plan_for(
    profile: &HardwareProfile,
    kind: KernelKind,
    extent: u64,
    inner_extent: u64,
    macs_per_iter: u64,
    budget_uj: f64,
    mode: PlanMode,
) -> Result<QuantaPlan, IntermittentError> {
    match mode {
        PlanMode::Optimized => {
            let plan = QuantaPlan::optimized(profile, kind, extent, inner_extent, macs_per_iter, budget_uj)?;
            Ok(fuse_tasks(&plan, budget_uj))
        }
        PlanMode::PerIteration => QuantaPlan::per_iteration(profile, kind, extent, inner_extent, macs_per_iter, budget_uj),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: usize,
    /// Weighted layer this task computes.
    pub layer: usize,
    pub kind: KernelKind,
    /// Unweighted layers that follow and run on this task's output.
    pub post: Vec<usize>,
    pub deps: Vec<usize>,
    pub criticality: f64,
    pub deadline_ms: f64,
    pub e_est_uj: f64,
    pub quanta: QuantaPlan,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskGraph {
    /// Unweighted layers before the first task.
    pub prelude: Vec<usize>,
    pub tasks: Vec<Task>,
}

/// One task per weighted layer with its full-width loop plan. Tasks form a
/// chain in layer order and criticality grows with depth as `(i+1)/L`.
pub fn decompose(net: &Network, profile: &HardwareProfile, budget_uj: f64, mode: PlanMode) -> Result<TaskGraph, SchedulerError> {
    let weighted = net.weighted_layers();
    let prelude: Vec<usize> = (0..weighted.first().copied().unwrap_or(net.layers.len())).collect();
    let mut tasks = Vec::with_capacity(weighted.len());
    let count = weighted.len();
    let mut active_in = net.input.c;
    for (id, &li) in weighted.iter().enumerate() {
        let layer = &net.layers[li];
        let shape = layer
            .loop_shape(active_in, layer.units())
            .ok_or_else(|| SchedulerError::InvalidGraph(format!("layer {li} has no kernel")))?;
        let quanta = plan_for(profile, shape.kind, shape.extent, shape.inner_extent, shape.macs_per_iter, budget_uj, mode)?;
        let next = weighted.get(id + 1).copied().unwrap_or(net.layers.len());
        tasks.push(Task {
            id,
            layer: li,
            kind: shape.kind,
            post: (li + 1..next).collect(),
            deps: if id == 0 { Vec::new() } else { vec![id - 1] },
            criticality: (id + 1) as f64 / count as f64,
            deadline_ms: f64::INFINITY,
            e_est_uj: quanta.total_energy(),
            quanta,
        });
        active_in = layer.units();
    }
    Ok(TaskGraph { prelude, tasks })
}

impl TaskGraph {
    /// Spreads an end-to-end deadline over tasks in proportion to their
    /// cumulative estimated energy along the topological order.
    pub fn assign_deadlines(&mut self, slo_ms: f64) {
        let total: f64 = self.tasks.iter().map(|t| t.e_est_uj).sum();
        let mut acc = 0.0;
        let n = self.tasks.len();
        for (i, t) in self.tasks.iter_mut().enumerate() {
            acc += t.e_est_uj;
            t.deadline_ms = if total > 0.0 { slo_ms * acc / total } else { slo_ms * (i + 1) as f64 / n as f64 };
        }
        if let Some(last) = self.tasks.last_mut() {
            last.deadline_ms = slo_ms;
        }
    }

    /// Checks ids, dependency references, and acyclicity.
    pub fn validate(&self) -> Result<(), SchedulerError> {
        for (i, t) in self.tasks.iter().enumerate() {
            if t.id != i {
                return Err(SchedulerError::InvalidGraph(format!("task at index {i} has id {}", t.id)));
            }
            if let Some(d) = t.deps.iter().find(|&&d| d >= self.tasks.len()) {
                return Err(SchedulerError::InvalidGraph(format!("task {i} depends on missing task {d}")));
            }
        }
        let order = self.topological_order();
        if order.len() != self.tasks.len() {
            return Err(SchedulerError::InvalidGraph("dependency cycle".into()));
        }
        Ok(())
    }

    fn topological_order(&self) -> Vec<usize> {
        let mut done = vec![false; self.tasks.len()];
        let mut order = Vec::new();
        loop {
            let before = order.len();
            for t in &self.tasks {
                if !done[t.id] && t.deps.iter().all(|&d| done[d]) {
                    done[t.id] = true;
                    order.push(t.id);
                }
            }
            if order.len() == before {
                return order;
            }
        }
    }

    /// Tasks whose dependencies are all in `done` and that have not run.
    pub fn ready(&self, done: &[bool]) -> Vec<usize> {
        self.tasks.iter().filter(|t| !done[t.id] && t.deps.iter().all(|&d| done[d])).map(|t| t.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorityWeights {
    pub w_d: f64,
    pub w_c: f64,
    pub w_e: f64,
}

impl Default for PriorityWeights {
    fn default() -> Self {
        Self { w_d: 1.0, w_c: 1.0, w_e: 1.0 }
    }
}

impl PriorityWeights {
    pub fn scaled(self, k: f64) -> Self {
        Self { w_d: self.w_d * k, w_c: self.w_c * k, w_e: self.w_e * k }
    }
}

/// `w_d / max(deadline - now, 1 ms) + w_c * criticality + w_e * [energy
/// covers the first quanta]`.
pub fn priority(task: &Task, now_ms: f64, energy_now_uj: f64, w: PriorityWeights) -> f64 {
    let slack = (task.deadline_ms - now_ms).max(1.0);
    let first = task.quanta.quanta.first().map_or(0.0, |q| q.e);
    let fits = if energy_now_uj >= first { 1.0 } else { 0.0 };
    w.w_d / slack + w.w_c * task.criticality + w.w_e * fits
}

/// Highest-priority ready task; ties go to the earlier deadline, then the
/// lower id.
pub fn select_next(graph: &TaskGraph, ready: &[usize], now_ms: f64, energy_now_uj: f64, w: PriorityWeights) -> Option<usize> {
    ready.iter().copied().max_by(|&a, &b| {
        let (ta, tb) = (&graph.tasks[a], &graph.tasks[b]);
        priority(ta, now_ms, energy_now_uj, w)
            .total_cmp(&priority(tb, now_ms, energy_now_uj, w))
            .then(tb.deadline_ms.total_cmp(&ta.deadline_ms))
            .then(tb.id.cmp(&ta.id))
    })
}

/// Outcome of one inference against its latency objective. A late correct
/// answer does not count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloRecord {
    pub latency_ms: f64,
    pub deadline_ms: f64,
    pub correct: bool,
    pub counted_correct: bool,
}

impl SloRecord {
    pub fn new(latency_ms: f64, deadline_ms: f64, correct: bool) -> Self {
        Self { latency_ms, deadline_ms, correct, counted_correct: correct && latency_ms <= deadline_ms }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devmodel::{builtin, HardwareProfile};
    use crate::dynfit::{Activation, LayerSpec, Shape};

    fn task(id: usize, deadline_ms: f64, criticality: f64, first_e: f64) -> Task {
        let quanta = QuantaPlan::uniform(KernelKind::Matvec, 4, 4, 2, (first_e - 1.0) / 2.0, 1.0, first_e).unwrap();
        Task { id, layer: id, kind: KernelKind::Matvec, post: vec![], deps: vec![], criticality, deadline_ms, e_est_uj: quanta.total_energy(), quanta }
    }

    fn mlp(sizes: &[usize]) -> Network {
        let specs: Vec<LayerSpec> = sizes.iter().map(|&o| LayerSpec::Dense { outputs: o, activation: Activation::Relu }).collect();
        Network::initialized(Shape::flat(4), &specs, 1).unwrap()
    }

    #[test]
    fn priority_reference_score() {
        let t = task(0, 10.0, 0.5, 5.0);
        assert!((priority(&t, 0.0, 100.0, PriorityWeights::default()) - 1.6).abs() < 1e-12);
        assert!((priority(&t, 0.0, 1.0, PriorityWeights::default()) - 0.6).abs() < 1e-12);
        // Past the deadline the slack floors at 1 ms.
        assert!((priority(&t, 50.0, 100.0, PriorityWeights::default()) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn ordering_rules() {
        let g = TaskGraph { prelude: vec![], tasks: vec![task(0, 100.0, 0.5, 5.0), task(1, 10.0, 0.5, 5.0)] };
        assert_eq!(select_next(&g, &[0, 1], 0.0, 100.0, PriorityWeights::default()), Some(1));
        let g = TaskGraph { prelude: vec![], tasks: vec![task(0, 50.0, 0.2, 5.0), task(1, 50.0, 0.9, 5.0)] };
        assert_eq!(select_next(&g, &[0, 1], 0.0, 100.0, PriorityWeights::default()), Some(1));
        let g = TaskGraph { prelude: vec![], tasks: vec![task(0, 50.0, 0.5, 5.0), task(1, 50.0, 0.5, 5.0)] };
        assert_eq!(select_next(&g, &[1, 0], 0.0, 100.0, PriorityWeights::default()), Some(0));
    }

    #[test]
    fn decompose_chains() {
        let p = builtin::synthetic_mid();
        let g = decompose(&mlp(&[6, 5, 3]), &p, 50.0, PlanMode::Optimized).unwrap();
        assert_eq!(g.tasks.len(), 3);
        assert_eq!(g.tasks.iter().map(|t| t.deps.clone()).collect::<Vec<_>>(), vec![vec![], vec![0], vec![1]]);
        assert_eq!(g.tasks.iter().map(|t| t.criticality).collect::<Vec<_>>(), vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        g.validate().unwrap();
        let g1 = decompose(&mlp(&[3]), &p, 50.0, PlanMode::Optimized).unwrap();
        assert_eq!(g1.tasks.len(), 1);
        assert!(g1.tasks[0].deps.is_empty());
    }

    #[test]
    fn decompose_uses_optimal_quanta() {
        // 8 outputs over 4 inputs: 4 MACs per iteration at 0.5 nJ/MAC gives
        // e_iter = 2 nJ; with e_ckpt = 3 nJ and E_b = 11 nJ the optimum is 4.
        let p = HardwareProfile::uniform("t", 0.5, 1.0, 3.0, 1.0, vec![]);
        let g = decompose(&mlp(&[8]), &p, 0.011, PlanMode::Optimized).unwrap();
        assert_eq!(g.tasks[0].quanta.quanta.iter().map(|q| q.l).collect::<Vec<_>>(), vec![4, 4]);
        let naive = decompose(&mlp(&[8]), &p, 0.011, PlanMode::PerIteration).unwrap();
        assert_eq!(naive.tasks[0].quanta.len(), 8);
        assert!(decompose(&mlp(&[8]), &p, 0.004, PlanMode::Optimized).is_err());
    }

    #[test]
    fn cycles_are_rejected() {
        let mut a = task(0, 1.0, 0.1, 5.0);
        let mut b = task(1, 1.0, 0.1, 5.0);
        a.deps = vec![1];
        b.deps = vec![0];
        assert!(TaskGraph { prelude: vec![], tasks: vec![a, b] }.validate().is_err());
    }

    #[test]
    fn slo_rule() {
        assert!(!SloRecord::new(5.0, 0.0, true).counted_correct);
        assert!(SloRecord::new(5.0, 5.0, true).counted_correct);
        assert!(!SloRecord::new(1.0, 5.0, false).counted_correct);
    }

    #[test]
    fn deadlines_follow_energy() {
        let mut g = decompose(&mlp(&[6, 5, 3]), &builtin::synthetic_mid(), 50.0, PlanMode::Optimized).unwrap();
        g.assign_deadlines(300.0);
        let d: Vec<f64> = g.tasks.iter().map(|t| t.deadline_ms).collect();
        assert!(d.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(d[2], 300.0);
    }
}
