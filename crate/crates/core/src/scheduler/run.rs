use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{decompose, plan_for, select_next, PlanMode, PriorityWeights, SchedulerError, SloRecord};
use crate::devmodel::{HardwareProfile, KernelKind};
use crate::dynfit::policy::sample_mask_with;
use crate::dynfit::{argmax, DynfitError, Layer, LayerSpec, LoopShape, Model, Network, Tensor};
use crate::ehsim::{nj_to_uj, EnergySim};
use crate::intermittent::{run_intermittent, EngineConfig, EventKind, PartialOutput, ResumableKernel};
use crate::kernels::KernelError;

/// Inference-time reaction to low stored energy: before a task runs with
/// less than `threshold` available, drop probabilities of its output units
/// are multiplied by `factor` (compounding per escalation) and, optionally,
/// its neurons lose one bit-width step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Escalation {
    pub enabled: bool,
    /// Fixed threshold in µJ; `None` uses twice the mean quanta energy of
    /// the tasks still to run.
    pub threshold_uj: Option<f64>,
    pub factor: f64,
    pub p_max: f64,
    pub step_down_quant: bool,
    /// Drop probability used when the model carries none.
    pub base_p: f64,
}

impl Default for Escalation {
    fn default() -> Self {
        Self { enabled: true, threshold_uj: None, factor: 1.5, p_max: 0.9, step_down_quant: false, base_p: 0.1 }
    }
}

impl Escalation {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub deadline_ms: f64,
    /// Per-quanta energy budget in µJ.
    pub budget_uj: f64,
    pub plan_mode: PlanMode,
    pub weights: PriorityWeights,
    pub escalation: Escalation,
    pub engine: EngineConfig,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            deadline_ms: 300.0,
            budget_uj: 20.0,
            plan_mode: PlanMode::Optimized,
            weights: PriorityWeights::default(),
            escalation: Escalation::default(),
            engine: EngineConfig::default(),
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), SchedulerError> {
        if !(self.deadline_ms >= 0.0) {
            return Err(SchedulerError::Config(format!("deadline must be non-negative, got {}", self.deadline_ms)));
        }
        if !(self.budget_uj > 0.0 && self.budget_uj.is_finite()) {
            return Err(SchedulerError::Config(format!("budget must be positive, got {}", self.budget_uj)));
        }
        let e = &self.escalation;
        if !(e.factor >= 1.0 && e.p_max >= 0.0 && e.p_max <= 1.0 && (0.0..=1.0).contains(&e.base_p)) {
            return Err(SchedulerError::Config("escalation needs factor >= 1 and probabilities in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedEventKind {
    TaskStart,
    TaskDone,
    Escalation,
    Wait,
    Quanta,
    Checkpoint,
    PowerLoss,
    Restore,
}

impl From<EventKind> for SchedEventKind {
    fn from(k: EventKind) -> Self {
        match k {
            EventKind::Wait => SchedEventKind::Wait,
            EventKind::Quanta => SchedEventKind::Quanta,
            EventKind::Checkpoint => SchedEventKind::Checkpoint,
            EventKind::PowerLoss => SchedEventKind::PowerLoss,
            EventKind::Restore => SchedEventKind::Restore,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedEvent {
    /// Simulated time since the inference started, in ms.
    pub t_ms: f64,
    pub task: usize,
    pub kind: SchedEventKind,
    pub energy_nj: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceOutcome {
    pub prediction: usize,
    pub output: Vec<f64>,
    pub record: SloRecord,
    pub events: Vec<SchedEvent>,
    /// Task ids in execution order.
    pub order: Vec<usize>,
    pub restores: usize,
    pub power_losses: usize,
    pub escalations: usize,
    pub energy_consumed_uj: f64,
}

impl InferenceOutcome {
    pub fn count(&self, kind: SchedEventKind) -> usize {
        self.events.iter().filter(|e| e.kind == kind).count()
    }

    pub fn report(&self) -> InferenceReport {
        InferenceReport {
            prediction: self.prediction,
            correct: self.record.correct,
            latency_ms: self.record.latency_ms,
            deadline_ms: self.record.deadline_ms,
            counted_correct: self.record.counted_correct,
            restores: self.restores,
            escalations: self.escalations,
            energy_consumed_uj: self.energy_consumed_uj,
        }
    }
}

/// Per-inference report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub prediction: usize,
    pub correct: bool,
    pub latency_ms: f64,
    pub deadline_ms: f64,
    pub counted_correct: bool,
    pub restores: usize,
    pub escalations: usize,
    #[serde(rename = "energy_consumed_uJ")]
    pub energy_consumed_uj: f64,
}

/// One layer's kernel over its surviving output units, producing real
/// activations in a full-size buffer (dropped units stay 0).
struct LayerTask<'a> {
    layer: &'a Layer,
    input: &'a Tensor,
    units: Vec<usize>,
    shape: LoopShape,
}

impl ResumableKernel for LayerTask<'_> {
    fn kind(&self) -> KernelKind {
        self.shape.kind
    }

    fn extent(&self) -> u64 {
        self.shape.extent
    }

    fn inner_extent(&self) -> u64 {
        self.shape.inner_extent
    }

    fn macs_per_iter(&self) -> u64 {
        self.shape.macs_per_iter
    }

    fn init_output(&self) -> PartialOutput {
        PartialOutput::Real(vec![0.0; self.layer.out_shape.len()])
    }

    fn run_iteration(&self, n: u64, out: &mut PartialOutput) -> Result<(), KernelError> {
        let PartialOutput::Real(buf) = out else {
            return Err(KernelError::ShapeMismatch("expected a real buffer".into()));
        };
        let n = n as usize;
        let act = self.layer.activation();
        let os = self.layer.out_shape;
        let plane = os.plane();
        match self.layer.spec {
            LayerSpec::Dense { .. } => {
                let o = self.units[n];
                buf[o] = act.apply(self.layer.dense_unit(&self.input.data, o));
            }
            LayerSpec::Conv2d { .. } => {
                let (o, p) = (self.units[n / plane], n % plane);
                buf[o * plane + p] = act.apply(self.layer.conv_unit(self.input, o, p / os.w, p % os.w));
            }
            LayerSpec::DwsConv2d { .. } => {
                let d = self.layer.dws_depthwise_pixel(self.input, n / os.w, n % os.w);
                for &o in &self.units {
                    buf[o * plane + n] = act.apply(self.layer.dws_pointwise_unit(&d, o));
                }
            }
            LayerSpec::AvgPool { .. } => return Err(KernelError::ShapeMismatch("pooling has no kernel loop".into())),
        }
        Ok(())
    }
}

fn apply_unweighted(net: &Network, layers: &[usize], mut x: Tensor) -> Tensor {
    for &li in layers {
        x = net.layers[li].avg_pool(&x);
    }
    x
}

/// Runs one inference as a task graph on harvested power. Each task is
/// re-planned for the units that actually survive, executed through the
/// checkpointing engine, and judged against `cfg.deadline_ms`.
pub fn run_inference(
    model: &Model,
    x: &Tensor,
    label: Option<usize>,
    profile: &HardwareProfile,
    sim: &mut EnergySim<'_>,
    cfg: &InferenceConfig,
) -> Result<InferenceOutcome, SchedulerError> {
    cfg.validate()?;
    let net = model.effective_network()?;
    if x.shape != net.input {
        return Err(DynfitError::ShapeMismatch(format!("input {:?}, network expects {:?}", x.shape, net.input)).into());
    }
    let mut graph = decompose(&net, profile, cfg.budget_uj, cfg.plan_mode)?;
    graph.assign_deadlines(cfg.deadline_ms);
    graph.validate()?;

    let esc = &cfg.escalation;
    let sizes = net.site_sizes();
    let base_p: Vec<Vec<f64>> = match &model.site_probs {
        Some(p) => p.clone(),
        None => sizes.iter().map(|&n| vec![esc.base_p; n]).collect(),
    };
    let mut keep: Vec<Vec<bool>> = sizes.iter().map(|&n| vec![true; n]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let t0 = sim.now();
    let debit0 = sim.ledger().debited_nj();
    let ms = |sim: &EnergySim<'_>| (sim.now() - t0) * 1_000.0;
    let prelude_out = apply_unweighted(&net, &graph.prelude, x.clone());
    let mut outputs: Vec<Option<Tensor>> = vec![None; graph.tasks.len()];
    let mut done = vec![false; graph.tasks.len()];
    let mut events = Vec::new();
    let mut order = Vec::new();
    let (mut restores, mut power_losses, mut escalations) = (0, 0, 0);
    let mut level = 0i32;

    loop {
        let ready = graph.ready(&done);
        let energy_uj = nj_to_uj(sim.stored_nj());
        let Some(id) = select_next(&graph, &ready, ms(sim), energy_uj, cfg.weights) else { break };
        let task = graph.tasks[id].clone();
        let li = task.layer;
        let mut layer = net.layers[li].clone();

        if esc.enabled {
            let threshold = esc.threshold_uj.unwrap_or_else(|| {
                let remaining: Vec<f64> =
                    graph.tasks.iter().filter(|t| !done[t.id]).flat_map(|t| t.quanta.quanta.iter().map(|q| q.e)).collect();
                2.0 * remaining.iter().sum::<f64>() / remaining.len().max(1) as f64
            });
            if energy_uj < threshold {
                escalations += 1;
                level += 1;
                events.push(SchedEvent { t_ms: ms(sim), task: id, kind: SchedEventKind::Escalation, energy_nj: sim.stored_nj() });
                if let Some(s) = net.site_of_layer(li) {
                    let boost = esc.factor.powi(level);
                    let p: Vec<f64> = base_p[s].iter().map(|&p| (p * boost).clamp(0.0, esc.p_max)).collect();
                    keep[s] = sample_mask_with(&p, &mut rng).m;
                }
                if esc.step_down_quant {
                    if let Some(q) = &model.quant {
                        let groups = model.net.neuron_groups();
                        let stepped: Vec<_> =
                            q.iter().zip(&groups).map(|(&b, g)| if g.layer == li { b.step_down().unwrap_or(b) } else { b }).collect();
                        layer = model.net.fake_quantized(&stepped)?.layers[li].clone();
                    }
                }
            }
        }

        events.push(SchedEvent { t_ms: ms(sim), task: id, kind: SchedEventKind::TaskStart, energy_nj: sim.stored_nj() });
        order.push(id);
        let input = match task.deps.last() {
            Some(&d) => outputs[d].clone().expect("dependency finished"),
            None => prelude_out.clone(),
        };
        let in_site = (0..li).rev().find_map(|l| net.site_of_layer(l)).unwrap_or(0);
        let active_in = keep[in_site].iter().filter(|&&k| k).count();
        let units: Vec<usize> = match net.site_of_layer(li) {
            Some(s) => (0..layer.units()).filter(|&u| keep[s][u]).collect(),
            None => (0..layer.units()).collect(),
        };
        let mut out = Tensor::zeros(layer.out_shape);
        if let Some(shape) = layer.loop_shape(active_in, units.len()).filter(|s| s.extent > 0) {
            let plan = plan_for(profile, shape.kind, shape.extent, shape.inner_extent, shape.macs_per_iter, cfg.budget_uj, cfg.plan_mode)?;
            let kernel = LayerTask { layer: &layer, input: &input, units, shape };
            let run = run_intermittent(&kernel, &plan, profile, sim, &cfg.engine)?;
            restores += run.restores;
            power_losses += run.power_losses;
            events.extend(run.log.events.iter().map(|e| SchedEvent {
                t_ms: (e.t - t0) * 1_000.0,
                task: id,
                kind: e.kind.into(),
                energy_nj: e.energy_nj,
            }));
            let PartialOutput::Real(data) = run.output else { unreachable!("layer tasks produce real buffers") };
            out.data = data;
        }
        outputs[id] = Some(apply_unweighted(&net, &task.post, out));
        done[id] = true;
        events.push(SchedEvent { t_ms: ms(sim), task: id, kind: SchedEventKind::TaskDone, energy_nj: sim.stored_nj() });
    }

    let last = graph.tasks.iter().rev().find(|t| done[t.id]).map(|t| t.id);
    let output = match last {
        Some(id) => outputs[id].take().expect("finished").data,
        None => prelude_out.data,
    };
    let prediction = argmax(&output);
    let record = SloRecord::new(ms(sim), cfg.deadline_ms, label == Some(prediction));
    Ok(InferenceOutcome {
        prediction,
        output,
        record,
        events,
        order,
        restores,
        power_losses,
        escalations,
        energy_consumed_uj: nj_to_uj(sim.ledger().debited_nj() - debit0),
    })
}
