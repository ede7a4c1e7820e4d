use std::cmp::Ordering;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::devmodel::HardwareProfile;
use crate::dynfit::train::{accuracy, train_step, TrainState};
use crate::dynfit::{Activation, Dataset, DropoutPolicy, DynfitError, LayerSpec, Network, PolicyKind, Shape, SiteMask, TrainConfig};
use crate::ehsim::EnergyTrace;
use crate::intermittent::IntermittentError;
use crate::scheduler::{plan_for, PlanMode};

#[derive(Debug, Error)]
pub enum NasError {
    #[error("search space is empty")]
    EmptySpace,
    #[error("no candidate meets the latency objective")]
    NoFeasibleCandidate,
    #[error(transparent)]
    Dynfit(#[from] DynfitError),
    #[error(transparent)]
    Intermittent(#[from] IntermittentError),
    #[error("writing report: {0}")]
    Csv(#[from] csv::Error),
}

/// Grid of small CNNs: `n` conv layers of one width and kernel, an average
/// pool, and a dense classifier, crossed with dropout policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub input: Shape,
    pub classes: usize,
    pub conv_counts: Vec<usize>,
    pub filters: Vec<usize>,
    /// Kernel sizes as `[kh, kw]`.
    pub kernels: Vec<[usize; 2]>,
    pub policies: Vec<PolicyKind>,
    pub pool: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            input: Shape::image(1, 20, 20),
            classes: 4,
            conv_counts: vec![2, 3, 4],
            filters: vec![8, 16],
            kernels: vec![[3, 3], [5, 5], [5, 3]],
            policies: vec![PolicyKind::L2],
            pool: 2,
        }
    }
}

impl SearchSpace {
    /// Number of candidates [`enumerate`] yields.
    pub fn size(&self) -> usize {
        self.conv_counts.len() * self.filters.len() * self.kernels.len() * self.policies.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvChoice {
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub convs: Vec<ConvChoice>,
    pub pool: usize,
    pub policy: PolicyKind,
}

impl Candidate {
    /// Compact architecture string, e.g.
    /// `3xCONV2D:8[3x3],16[3x3],16[3x3],AvgPool,FC`.
    pub fn descriptor(&self) -> String {
        let convs: Vec<String> = self.convs.iter().map(|c| format!("{}[{}x{}]", c.filters, c.kh, c.kw)).collect();
        format!("{}xCONV2D:{},AvgPool,FC", self.convs.len(), convs.join(","))
    }

    /// Layer list for `input`; the pool shrinks when the feature map is
    /// smaller than the configured window.
    pub fn specs(&self, input: Shape, classes: usize) -> Result<Vec<LayerSpec>, DynfitError> {
        let (mut h, mut w) = (input.h, input.w);
        let mut specs = Vec::with_capacity(self.convs.len() + 2);
        for c in &self.convs {
            if c.kh > h || c.kw > w {
                return Err(DynfitError::ShapeMismatch(format!("{} does not fit a {}x{} input", self.descriptor(), input.h, input.w)));
            }
            h -= c.kh - 1;
            w -= c.kw - 1;
            specs.push(LayerSpec::Conv2d { filters: c.filters, kh: c.kh, kw: c.kw, activation: Activation::Relu });
        }
        specs.push(LayerSpec::AvgPool { size: self.pool.min(h).min(w).max(1) });
        specs.push(LayerSpec::Dense { outputs: classes, activation: Activation::Identity });
        Ok(specs)
    }

    pub fn network(&self, input: Shape, classes: usize, seed: u64) -> Result<Network, DynfitError> {
        Network::initialized(input, &self.specs(input, classes)?, seed)
    }
}

/// Every point of the grid, ids in enumeration order.
pub fn enumerate(space: &SearchSpace) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(space.size());
    for &n in &space.conv_counts {
        for &f in &space.filters {
            for &[kh, kw] in &space.kernels {
                for &policy in &space.policies {
                    out.push(Candidate {
                        id: out.len(),
                        convs: vec![ConvChoice { filters: f, kh, kw }; n],
                        pool: space.pool,
                        policy,
                    });
                }
            }
        }
    }
    out
}

/// What latency estimation needs to know about the deployment.
#[derive(Debug, Clone, Copy)]
pub struct NasEnv<'a> {
    pub profile: &'a HardwareProfile,
    pub trace: &'a EnergyTrace,
    /// Usable energy in the capacitor when an inference starts, µJ.
    pub initial_uj: f64,
    /// Per-quanta budget, µJ.
    pub budget_uj: f64,
}

/// Compute time plus expected stall: energy not covered by the initial
/// charge has to be harvested at the trace's mean power.
pub fn estimate_latency(net: &Network, env: &NasEnv<'_>) -> Result<(f64, f64), NasError> {
    let mut active_in = net.input.c;
    let (mut compute_s, mut energy_uj) = (0.0, 0.0);
    for layer in &net.layers {
        if let Some(shape) = layer.loop_shape(active_in, layer.units()) {
            let plan = plan_for(env.profile, shape.kind, shape.extent, shape.inner_extent, shape.macs_per_iter, env.budget_uj, PlanMode::Optimized)?;
            energy_uj += plan.total_energy();
            compute_s += env.profile.compute_time_s(shape.kind, shape.extent, shape.macs_per_iter).map_err(IntermittentError::from)?;
        }
        active_in = layer.out_shape.c;
    }
    let deficit = energy_uj - env.initial_uj;
    let stall_s = if deficit <= 0.0 {
        0.0
    } else {
        let p = env.trace.mean_power_uw();
        if p > 0.0 {
            deficit / p
        } else {
            f64::INFINITY
        }
    };
    Ok(((compute_s + stall_s) * 1_000.0, energy_uj))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accepted,
    /// Over the latency objective.
    RejectedSlo,
    /// Another feasible candidate is at least as fast and at least as
    /// accurate, and strictly better on one of the two.
    RejectedDominated,
    /// Does not fit the input or the energy budget.
    Unbuildable,
}

/// Latency-objective filter followed by the dominance rule over the
/// survivors that have a loss. `entries` are `(latency_ms, loss)`.
pub fn filter_verdicts(entries: &[(f64, Option<f64>)], slo_ms: f64) -> Vec<Verdict> {
    let mut v: Vec<Verdict> =
        entries.iter().map(|&(lat, _)| if lat <= slo_ms { Verdict::Accepted } else { Verdict::RejectedSlo }).collect();
    for i in 0..entries.len() {
        let (li, Some(ei)) = entries[i] else { continue };
        if v[i] != Verdict::Accepted {
            continue;
        }
        let dominated = (0..entries.len()).any(|j| {
            j != i
                && v[j] != Verdict::RejectedSlo
                && v[j] != Verdict::Unbuildable
                && entries[j].1.is_some_and(|ej| entries[j].0 <= li && ej <= ei && (entries[j].0 < li || ej < ei))
        });
        if dominated {
            v[i] = Verdict::RejectedDominated;
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluated {
    pub candidate: Candidate,
    pub descriptor: String,
    pub est_latency_ms: f64,
    pub est_energy_uj: f64,
    pub feasible: bool,
    pub verdict: Verdict,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

/// Enumerates the space and estimates every candidate. Candidates over the
/// objective stay in the result, flagged infeasible.
pub fn enumerate_and_filter(space: &SearchSpace, env: &NasEnv<'_>, slo_ms: f64) -> Result<Vec<Evaluated>, NasError> {
    let cands = enumerate(space);
    if cands.is_empty() {
        return Err(NasError::EmptySpace);
    }
    evaluate_candidates(cands, space, env, slo_ms)
}

/// Estimates and filters an explicit candidate list.
pub fn evaluate_candidates(cands: Vec<Candidate>, space: &SearchSpace, env: &NasEnv<'_>, slo_ms: f64) -> Result<Vec<Evaluated>, NasError> {
    if cands.is_empty() {
        return Err(NasError::EmptySpace);
    }
    let mut out = Vec::with_capacity(cands.len());
    for c in cands {
        let est = c.network(space.input, space.classes, 0).map_err(NasError::from).and_then(|net| estimate_latency(&net, env));
        let (lat, energy, buildable) = match est {
            Ok((l, e)) => (l, e, true),
            Err(NasError::Dynfit(_)) | Err(NasError::Intermittent(IntermittentError::InfeasibleBudget { .. })) => {
                (f64::INFINITY, f64::INFINITY, false)
            }
            Err(e) => return Err(e),
        };
        let verdict = if !buildable {
            Verdict::Unbuildable
        } else if lat <= slo_ms {
            Verdict::Accepted
        } else {
            Verdict::RejectedSlo
        };
        out.push(Evaluated {
            descriptor: c.descriptor(),
            candidate: c,
            est_latency_ms: lat,
            est_energy_uj: energy,
            feasible: verdict == Verdict::Accepted,
            verdict,
            val_loss: None,
            val_accuracy: None,
        });
    }
    Ok(out)
}

/// Trains one candidate for `steps` masked steps and scores it on `val`.
pub fn train_candidate(
    cand: &Candidate,
    train: &Dataset,
    val: &Dataset,
    steps: usize,
    base: &TrainConfig,
) -> Result<(f64, f64), DynfitError> {
    let net = cand.network(train.input, train.classes, base.seed)?;
    let cfg = TrainConfig { policy: DropoutPolicy { kind: cand.policy, ..base.policy.clone() }, ..base.clone() };
    cfg.validate()?;
    let mut state = TrainState::new(net, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ cand.id as u64);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        if order.len() < cfg.batch_size.min(train.len()) {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            idx.shuffle(&mut rng);
            order.extend(idx);
        }
        let batch: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let (xs, ts) = train.batch(&batch);
        train_step(&mut state, &xs, &ts, &cfg, None)?;
    }
    let eff = state.net.fake_quantized(&state.quant.q)?;
    let (xs, ts) = val.all();
    let loss = eff.loss(&xs, &ts, &SiteMask::all_ones(&eff), cfg.loss)?;
    Ok((loss, accuracy(&eff, val)?))
}

/// Trains every feasible candidate (in parallel), applies the dominance
/// rule, and ranks accepted candidates by validation loss, then id.
/// Rejected candidates follow in id order.
pub fn search(
    evaluated: &[Evaluated],
    train: &Dataset,
    val: &Dataset,
    steps: usize,
    base: &TrainConfig,
    slo_ms: f64,
) -> Result<Vec<Evaluated>, NasError> {
    if !evaluated.iter().any(|e| e.feasible) {
        return Err(NasError::NoFeasibleCandidate);
    }
    let scores: Vec<Option<(f64, f64)>> = evaluated
        .par_iter()
        .map(|e| if e.feasible { train_candidate(&e.candidate, train, val, steps, base).map(Some) } else { Ok(None) })
        .collect::<Result<_, DynfitError>>()?;
    let mut out: Vec<Evaluated> = evaluated
        .iter()
        .zip(&scores)
        .map(|(e, s)| Evaluated { val_loss: s.map(|v| v.0), val_accuracy: s.map(|v| v.1), ..e.clone() })
        .collect();
    let entries: Vec<(f64, Option<f64>)> = out.iter().map(|e| (e.est_latency_ms, e.val_loss)).collect();
    for (e, v) in out.iter_mut().zip(filter_verdicts(&entries, slo_ms)) {
        if e.verdict != Verdict::Unbuildable {
            e.verdict = v;
        }
    }
    out.sort_by(|a, b| {
        let rank = |e: &Evaluated| e.verdict != Verdict::Accepted;
        rank(a)
            .cmp(&rank(b))
            .then_with(|| match (a.val_loss, b.val_loss) {
                (Some(x), Some(y)) if !rank(a) => x.total_cmp(&y),
                _ => Ordering::Equal,
            })
            .then(a.candidate.id.cmp(&b.candidate.id))
    });
    Ok(out)
}

/// Writes the search report as CSV.
pub fn write_report_csv<W: Write>(rows: &[Evaluated], w: W) -> Result<(), NasError> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["id", "descriptor", "policy", "est_latency_ms", "feasible", "verdict", "val_loss", "val_accuracy"])?;
    for r in rows {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        wr.write_record([
            r.candidate.id.to_string(),
            r.descriptor.clone(),
            r.candidate.policy.to_string(),
            r.est_latency_ms.to_string(),
            r.feasible.to_string(),
            serde_json::to_value(r.verdict).expect("verdict serializes").as_str().unwrap_or_default().to_string(),
            opt(r.val_loss),
            opt(r.val_accuracy),
        ])?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}
