use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::quanta::{cursor_of, QuantaPlan};
use super::snapshot::{load_state, save_state, Nvm, PartialOutput, SnapshotError};
use super::IntermittentError;
use crate::devmodel::{HardwareProfile, KernelKind};
use crate::ehsim::{uj_to_nj, EnergySim};
use crate::kernels::{conv2d_fixed_element, gemm_fixed_element, FixedTensor, KernelError, QFormat, Requantizer};

/// A loop nest that can run one linearized iteration at a time and whose
/// whole progress lives in a [`PartialOutput`].
pub trait ResumableKernel {
    fn kind(&self) -> KernelKind;
    fn extent(&self) -> u64;
    /// Length of the innermost planned loop, used to report loop cursors.
    fn inner_extent(&self) -> u64;
    fn macs_per_iter(&self) -> u64;
    fn init_output(&self) -> PartialOutput;
    fn run_iteration(&self, n: u64, out: &mut PartialOutput) -> Result<(), KernelError>;
}

fn codes_mut(out: &mut PartialOutput) -> Result<&mut Vec<i32>, KernelError> {
    match out {
        PartialOutput::Codes(c) => Ok(c),
        PartialOutput::Real(_) => Err(KernelError::ShapeMismatch("expected a code buffer".into())),
    }
}

/// Fixed-point GEMM, one output element per iteration.
#[derive(Debug, Clone)]
pub struct GemmTask {
    a: FixedTensor,
    b: FixedTensor,
    out: QFormat,
    rq: Requantizer,
    m: usize,
    n: usize,
    k: usize,
}

impl GemmTask {
    pub fn new(a: FixedTensor, b: FixedTensor, out: QFormat) -> Result<Self, KernelError> {
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return Err(KernelError::ShapeMismatch("gemm operands must be 2-D".into()));
        };
        if k != k2 {
            return Err(KernelError::ShapeMismatch(format!("gemm inner dimensions {k} vs {k2}")));
        }
        let rq = Requantizer::new(a.qformat(), b.qformat(), out);
        Ok(Self { a, b, out, rq, m, n, k })
    }

    pub fn finish(&self, out: PartialOutput) -> Result<FixedTensor, KernelError> {
        match out {
            PartialOutput::Codes(c) => FixedTensor::new(vec![self.m, self.n], c, self.out),
            PartialOutput::Real(_) => Err(KernelError::ShapeMismatch("expected a code buffer".into())),
        }
    }
}

impl ResumableKernel for GemmTask {
    fn kind(&self) -> KernelKind {
        KernelKind::Gemm
    }

    fn extent(&self) -> u64 {
        (self.m * self.n) as u64
    }

    fn inner_extent(&self) -> u64 {
        self.n as u64
    }

    fn macs_per_iter(&self) -> u64 {
        self.k as u64
    }

    fn init_output(&self) -> PartialOutput {
        PartialOutput::Codes(vec![0; self.m * self.n])
    }

    fn run_iteration(&self, n: u64, out: &mut PartialOutput) -> Result<(), KernelError> {
        let idx = n as usize;
        let v = gemm_fixed_element(&self.a, &self.b, &self.rq, idx / self.n, idx % self.n)?;
        codes_mut(out)?[idx] = v;
        Ok(())
    }
}

/// Fixed-point valid-mode 2-D cross-correlation, one output pixel per iteration.
#[derive(Debug, Clone)]
pub struct Conv2dTask {
    x: FixedTensor,
    k: FixedTensor,
    out: QFormat,
    rq: Requantizer,
    oh: usize,
    ow: usize,
}

impl Conv2dTask {
    pub fn new(x: FixedTensor, k: FixedTensor, out: QFormat) -> Result<Self, KernelError> {
        let (&[h, w], &[kh, kw]) = (x.shape(), k.shape()) else {
            return Err(KernelError::ShapeMismatch("conv2d operands must be 2-D".into()));
        };
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(KernelError::KernelLongerThanInput { kernel: kh.max(kw), input: h.min(w) });
        }
        let rq = Requantizer::new(x.qformat(), k.qformat(), out);
        Ok(Self { x, k, out, rq, oh: h - kh + 1, ow: w - kw + 1 })
    }

    pub fn finish(&self, out: PartialOutput) -> Result<FixedTensor, KernelError> {
        match out {
            PartialOutput::Codes(c) => FixedTensor::new(vec![self.oh, self.ow], c, self.out),
            PartialOutput::Real(_) => Err(KernelError::ShapeMismatch("expected a code buffer".into())),
        }
    }
}

impl ResumableKernel for Conv2dTask {
    fn kind(&self) -> KernelKind {
        KernelKind::Conv2d
    }

    fn extent(&self) -> u64 {
        (self.oh * self.ow) as u64
    }

    fn inner_extent(&self) -> u64 {
        self.ow as u64
    }

    fn macs_per_iter(&self) -> u64 {
        (self.k.shape()[0] * self.k.shape()[1]) as u64
    }

    fn init_output(&self) -> PartialOutput {
        PartialOutput::Codes(vec![0; self.oh * self.ow])
    }

    fn run_iteration(&self, n: u64, out: &mut PartialOutput) -> Result<(), KernelError> {
        let idx = n as usize;
        let v = conv2d_fixed_element(&self.x, &self.k, &self.rq, idx / self.ow, idx % self.ow)?;
        codes_mut(out)?[idx] = v;
        Ok(())
    }
}

/// Where an injected power failure strikes during a quanta launch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePoint {
    /// After this fraction (in `[0, 1)`) of the quanta's iterations.
    During(f64),
    /// Right after the quanta's checkpoint committed.
    AfterCommit,
}

/// Deterministic failure injection keyed by quanta launch ordinal (1-based,
/// counting every launch including re-executions).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FailureSchedule {
    pub points: BTreeMap<u64, FailurePoint>,
}

impl FailureSchedule {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn at(mut self, launch: u64, point: FailurePoint) -> Self {
        self.points.insert(launch, point);
        self
    }

    /// Fails after every commit of launches `1..=n`.
    pub fn after_every_commit(n: u64) -> Self {
        Self { points: (1..=n).map(|i| (i, FailurePoint::AfterCommit)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Longest contiguous wait for energy before giving up, in seconds.
    pub max_wait_s: f64,
    /// Wait granularity; `None` uses the trace's sample interval.
    pub wait_step_s: Option<f64>,
    pub failures: FailureSchedule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self { max_wait_s: 3_600.0, wait_step_s: None, failures: FailureSchedule::none() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Wait,
    Quanta,
    Checkpoint,
    PowerLoss,
    Restore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub t: f64,
    pub kind: EventKind,
    /// Energy drawn by the event, or harvested for waits, in nanojoules.
    pub energy_nj: u64,
    pub plan_position: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionLog {
    pub events: Vec<LogEvent>,
}

impl ExecutionLog {
    fn push(&mut self, t: f64, kind: EventKind, energy_nj: u64, plan_position: usize) {
        self.events.push(LogEvent { t, kind, energy_nj, plan_position });
    }

    pub fn count(&self, kind: EventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub output: PartialOutput,
    pub log: ExecutionLog,
    pub restores: usize,
    pub power_losses: usize,
    /// Energy spent on iterations whose results were lost mid-quanta.
    pub lost_work_nj: u64,
    /// Energy that left the capacitor during the run (delivered plus drained).
    pub consumed_nj: u64,
    pub elapsed_s: f64,
}

/// Executes `plan` over `kernel` on harvested power.
///
/// Before every quanta the stored energy must cover the quanta's estimate;
/// otherwise the device waits and harvests. After a quanta the partial
/// output is checkpointed. When what is left cannot pay for the next quanta
/// the device loses power, volatile state is gone, and it restores from the
/// last snapshot once enough energy (quanta plus restore) has accumulated.
pub fn run_intermittent(
    kernel: &dyn ResumableKernel,
    plan: &QuantaPlan,
    profile: &HardwareProfile,
    sim: &mut EnergySim<'_>,
    cfg: &EngineConfig,
) -> Result<RunOutcome, IntermittentError> {
    plan.validate()?;
    if plan.extent != kernel.extent() {
        return Err(IntermittentError::InvalidPlan(format!(
            "plan covers {} iterations, kernel has {}",
            plan.extent,
            kernel.extent()
        )));
    }
    if let Some(q) = plan.quanta.iter().find(|q| q.kernel != kernel.kind()) {
        return Err(IntermittentError::InvalidPlan(format!("quanta for {} in a {} plan", q.kernel, kernel.kind())));
    }
    let macs = kernel.macs_per_iter();
    let inner = kernel.inner_extent();
    let restore_nj = uj_to_nj(profile.restore_energy_uj());
    let wait_step = cfg.wait_step_s.unwrap_or_else(|| sim.trace().sample_interval()).max(1e-6);
    let t0 = sim.now();
    let debit0 = sim.ledger().debited_nj();

    let cursor = |start: u64| {
        let (o, i) = cursor_of(start, inner);
        [o as u32, i as u32]
    };

    let mut log = ExecutionLog::default();
    let mut nvm = Nvm::default();
    let mut out = kernel.init_output();
    // The initial image is part of the program and costs nothing to store.
    nvm.commit(&save_state(&cursor(0), &out, 0));

    let mut pos = 0usize;
    let mut needs_restore = false;
    let mut launches = 0u64;
    let mut waited = 0.0;
    let (mut restores, mut losses, mut lost_work_nj) = (0usize, 0usize, 0u64);

    while pos < plan.len() {
        let q = plan.quanta[pos];
        let need = uj_to_nj(q.e);
        let required = need + if needs_restore { restore_nj } else { 0 };
        if required > sim.capacitor().max_nj() {
            return Err(IntermittentError::Starvation { waited_s: waited, needed_nj: required, stored_nj: sim.stored_nj() });
        }
        if sim.stored_nj() < required {
            if waited >= cfg.max_wait_s {
                return Err(IntermittentError::Starvation { waited_s: waited, needed_nj: required, stored_nj: sim.stored_nj() });
            }
            let step = sim.advance(wait_step, 0);
            waited += wait_step;
            log.push(sim.now(), EventKind::Wait, step.harvested_nj, pos);
            continue;
        }
        waited = 0.0;

        if needs_restore {
            sim.advance(0.0, restore_nj);
            let (idx, saved, saved_pos) = load_state(&nvm.load()?)?;
            let saved_pos = saved_pos as usize;
            let expected = plan.quanta.get(saved_pos).map_or(plan.extent, |q| q.start);
            if saved_pos > plan.len() || idx != cursor(expected) {
                return Err(SnapshotError::CorruptSnapshot("cursor does not match plan position".into()).into());
            }
            out = saved;
            pos = saved_pos;
            needs_restore = false;
            restores += 1;
            log.push(sim.now(), EventKind::Restore, restore_nj, pos);
            continue;
        }

        launches += 1;
        let failure = cfg.failures.points.get(&launches).copied();
        if let Some(FailurePoint::During(frac)) = failure {
            let done = ((frac.clamp(0.0, 1.0) * q.l as f64).floor() as u64).min(q.l.saturating_sub(1));
            for n in q.start..q.start + done {
                kernel.run_iteration(n, &mut out)?;
            }
            let spent = uj_to_nj(done as f64 * plan.e_iter).min(need);
            sim.advance(profile.compute_time_s(q.kernel, done, macs)?, spent);
            let drain = sim.advance(0.0, u64::MAX);
            lost_work_nj += spent;
            losses += 1;
            log.push(sim.now(), EventKind::PowerLoss, spent + drain.drained_nj, pos);
            out = kernel.init_output();
            needs_restore = true;
            continue;
        }

        for n in q.start..q.end() {
            kernel.run_iteration(n, &mut out)?;
        }
        let compute_nj = uj_to_nj(q.l as f64 * plan.e_iter).min(need);
        let step = sim.advance(profile.compute_time_s(q.kernel, q.l, macs)?, need);
        debug_assert!(!step.brownout);
        log.push(sim.now(), EventKind::Quanta, compute_nj, pos);
        pos += 1;
        let next_start = plan.quanta.get(pos).map_or(plan.extent, |q| q.start);
        nvm.commit(&save_state(&cursor(next_start), &out, pos as u32));
        log.push(sim.now(), EventKind::Checkpoint, need - compute_nj, pos);

        if pos < plan.len() {
            let forced = failure == Some(FailurePoint::AfterCommit);
            if forced || sim.stored_nj() < uj_to_nj(plan.quanta[pos].e) {
                let drained = if forced { sim.advance(0.0, u64::MAX).drained_nj } else { 0 };
                losses += 1;
                log.push(sim.now(), EventKind::PowerLoss, drained, pos);
                out = kernel.init_output();
                needs_restore = true;
            }
        }
    }

    Ok(RunOutcome {
        output: out,
        log,
        restores,
        power_losses: losses,
        lost_work_nj,
        consumed_nj: sim.ledger().debited_nj() - debit0,
        elapsed_s: sim.now() - t0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::devmodel::builtin;
    use crate::ehsim::{CapacitorState, EnergyTrace};
    use crate::kernels::{conv2d_fixed, gemm_fixed, quantize};

    fn gemm_task() -> GemmTask {
        let a: Vec<f64> = (0..6 * 5).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let b: Vec<f64> = (0..5 * 4).map(|i| ((i * 3 % 7) as f64 - 3.0) / 3.0).collect();
        let a = quantize(&a, &[6, 5], 8, 1.0).unwrap();
        let b = quantize(&b, &[5, 4], 8, 1.0).unwrap();
        GemmTask::new(a, b, QFormat::new(16, 8.0).unwrap()).unwrap()
    }

    fn full_cap() -> CapacitorState {
        CapacitorState::new(100e-6, 3.6, 1.8, 3.6, 1.0).unwrap()
    }

    #[test]
    fn continuous_power_matches_reference() {
        let task = gemm_task();
        let p = builtin::synthetic_low();
        let plan = QuantaPlan::optimized(&p, KernelKind::Gemm, task.extent(), task.inner_extent(), task.macs_per_iter(), 5.0).unwrap();
        let trace = EnergyTrace::constant(1e6, 100.0, 1.0);
        let mut sim = EnergySim::new(&trace, full_cap(), 0.0);
        let run = run_intermittent(&task, &plan, &p, &mut sim, &EngineConfig::default()).unwrap();
        let reference = gemm_fixed(&task.a, &task.b, task.out).unwrap();
        assert_eq!(task.finish(run.output).unwrap(), reference);
        assert_eq!(run.restores, 0);
        assert!(sim.balanced());
    }

    #[test]
    fn loss_after_every_commit_restores_each_time() {
        let task = gemm_task();
        let p = builtin::synthetic_low();
        let plan = QuantaPlan::uniform(KernelKind::Gemm, 24, 4, 5, p.iteration_energy_uj(KernelKind::Gemm, 5).unwrap(), p.checkpoint_energy_uj(), 10.0).unwrap();
        let trace = EnergyTrace::constant(500.0, 10_000.0, 0.05);
        let mut sim = EnergySim::new(&trace, full_cap(), 0.0);
        let cfg = EngineConfig { failures: FailureSchedule::after_every_commit(100), ..Default::default() };
        let run = run_intermittent(&task, &plan, &p, &mut sim, &cfg).unwrap();
        assert_eq!(run.restores, plan.len() - 1);
        assert_eq!(task.finish(run.output).unwrap(), gemm_fixed(&task.a, &task.b, task.out).unwrap());
        assert!(sim.balanced());
    }

    #[test]
    fn mid_quanta_loss_reexecutes_from_checkpoint() {
        let x: Vec<f64> = (0..8 * 8).map(|i| ((i * 5 % 13) as f64 - 6.0) / 6.0).collect();
        let k = [0.5, -0.25, 0.75, 1.0, 0.0, -1.0, 0.25, 0.5, -0.5];
        let x = quantize(&x, &[8, 8], 8, 1.0).unwrap();
        let k = quantize(&k, &[3, 3], 8, 1.0).unwrap();
        let task = Conv2dTask::new(x.clone(), k.clone(), QFormat::new(16, 8.0).unwrap()).unwrap();
        let p = builtin::synthetic_mid();
        let plan = QuantaPlan::optimized(&p, KernelKind::Conv2d, 36, 6, 9, 1.7).unwrap();
        let trace = EnergyTrace::constant(2_000.0, 10_000.0, 0.01);
        let mut sim = EnergySim::new(&trace, full_cap(), 0.0);
        let cfg = EngineConfig {
            failures: FailureSchedule::none().at(2, FailurePoint::During(0.5)).at(4, FailurePoint::During(0.0)),
            ..Default::default()
        };
        let run = run_intermittent(&task, &plan, &p, &mut sim, &cfg).unwrap();
        assert_eq!(run.restores, 2);
        assert!(run.lost_work_nj > 0);
        assert_eq!(task.finish(run.output).unwrap(), conv2d_fixed(&x, &k, task.out).unwrap());
        assert!(sim.balanced());
        let launched = run.log.count(EventKind::Quanta);
        assert_eq!(launched, plan.len());
    }

    #[test]
    fn starvation_is_reported() {
        let task = gemm_task();
        let p = builtin::synthetic_low();
        let plan = QuantaPlan::optimized(&p, KernelKind::Gemm, 24, 4, 5, 5.0).unwrap();
        let trace = EnergyTrace::constant(0.0, 10.0, 1.0);
        let empty = full_cap().with_stored_nj(0);
        let mut sim = EnergySim::new(&trace, empty, 0.0);
        let cfg = EngineConfig { max_wait_s: 5.0, ..Default::default() };
        assert!(matches!(run_intermittent(&task, &plan, &p, &mut sim, &cfg), Err(IntermittentError::Starvation { .. })));
    }

    #[test]
    fn plan_must_match_kernel() {
        let task = gemm_task();
        let p = builtin::synthetic_low();
        let plan = QuantaPlan::optimized(&p, KernelKind::Gemm, 10, 4, 5, 5.0).unwrap();
        let trace = EnergyTrace::constant(1.0, 10.0, 1.0);
        let mut sim = EnergySim::new(&trace, full_cap(), 0.0);
        assert!(run_intermittent(&task, &plan, &p, &mut sim, &EngineConfig::default()).is_err());
    }
}
