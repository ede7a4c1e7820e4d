use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::network::{argmax, sigmoid, LossKind, Network, SiteMask, Tensor};
use super::policy::{
    hessian_diag_fd, obd_sensitivity, probs_fmre, probs_l2, probs_obd, probs_shapley, probs_sparse, probs_taylor,
    reconstruction_error, sample_mask_with, shapley_exact, shapley_monte_carlo, sparse_mask_step, DropoutPolicy,
    PolicyKind,
};
use super::quant::{optimize_quant_levels, quant_penalty_loss, QuantAssignment};
use super::DynfitError;
use crate::devmodel::{HardwareProfile, KernelKind};
use crate::intermittent::{fuse_tasks, QuantaPlan};
use crate::kernels::{BitWidth, QFormat};

/// Device and per-quanta budget used to re-plan layer loops during training.
#[derive(Debug, Clone, Copy)]
pub struct EnergyContext<'a> {
    pub profile: &'a HardwareProfile,
    pub budget_uj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate, also used for the mask logits and fine-tuning.
    pub lr: f64,
    pub loss: LossKind,
    pub policy: DropoutPolicy,
    pub lambda: f64,
    /// Default per-neuron cost `c_i`.
    pub cost: f64,
    pub initial_bits: BitWidth,
    pub theta: f64,
    pub seed: u64,
    pub finetune_epochs: usize,
    /// Steps between greedy bit-width searches; 0 disables the search.
    pub quant_search_every: usize,
    /// Drop probability at which a neuron becomes a bit-width candidate.
    pub risk_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            lr: 0.01,
            loss: LossKind::CrossEntropy,
            policy: DropoutPolicy::default(),
            lambda: 0.01,
            cost: 1.0,
            initial_bits: BitWidth::B16,
            theta: 0.5,
            seed: 0,
            finetune_epochs: 5,
            quant_search_every: 50,
            risk_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DynfitError> {
        self.policy.validate()?;
        if self.batch_size == 0 {
            return Err(DynfitError::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DynfitError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.theta >= 0.0 && self.theta <= 1.0) {
            return Err(DynfitError::Config(format!("theta must be in [0, 1], got {}", self.theta)));
        }
        if !(self.lambda >= 0.0 && self.cost >= 0.0) {
            return Err(DynfitError::Config("lambda and cost must be non-negative".into()));
        }
        Ok(())
    }
}

/// Counts, per weight, the iterations in which it actually changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateTracker {
    pub counts: Vec<u64>,
    pub iterations: u64,
    pub theta: f64,
}

impl UpdateTracker {
    pub fn new(weights: usize, theta: f64) -> Self {
        Self { counts: vec![0; weights], iterations: 0, theta }
    }

    pub fn update_ratio(&self) -> Result<Vec<f64>, DynfitError> {
        if self.iterations == 0 {
            return Err(DynfitError::ZeroIterations);
        }
        Ok(self.counts.iter().map(|&u| u as f64 / self.iterations as f64).collect())
    }

    /// Weights whose update ratio is below `theta`.
    pub fn select_undertrained(&self) -> Result<Vec<usize>, DynfitError> {
        Ok(self.update_ratio()?.iter().enumerate().filter(|(_, &r)| r < self.theta).map(|(i, _)| i).collect())
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub net: Network,
    pub quant: QuantAssignment,
    pub tracker: UpdateTracker,
    /// Mask logits per site (only used by `sparse_mask`).
    pub logits: Vec<Vec<f64>>,
    pub step: u64,
    hessian: Option<Vec<f64>>,
}

impl TrainState {
    pub fn new(net: Network, cfg: &TrainConfig) -> Self {
        let groups = net.neuron_groups().len();
        let logits = net.site_sizes().iter().map(|&n| vec![cfg.policy.z_init; n]).collect();
        Self {
            quant: QuantAssignment::uniform(groups, cfg.initial_bits, cfg.cost, cfg.lambda),
            tracker: UpdateTracker::new(net.param_count(), cfg.theta),
            logits,
            step: 0,
            hessian: None,
            net,
        }
    }
}

/// Loop plan of one layer after a training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub kind: KernelKind,
    pub extent: u64,
    pub l: u64,
    pub quanta: usize,
    pub energy_uj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub loss: f64,
    pub penalized_loss: f64,
    pub kept: usize,
    pub dropped: usize,
    pub mean_p: f64,
    pub plans: Vec<LayerPlan>,
}

/// Per-step mask seed derived from the policy seed.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    seed ^ step.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Diagonal Hessian of the batch loss over every parameter.
pub fn hessian_diag(net: &Network, xs: &[Tensor], targets: &[Vec<f64>], loss: LossKind) -> Result<Vec<f64>, DynfitError> {
    if xs.is_empty() {
        return Err(DynfitError::ShapeMismatch("empty batch".into()));
    }
    let ones = SiteMask::all_ones(net);
    let mut probe = net.clone();
    hessian_diag_fd(&net.params(), |p| {
        probe.set_params(p)?;
        Ok(probe.gradients(xs, targets, &ones, loss)?.params)
    })
}

/// Shapley values of the units of mask site `site` on the batch loss.
pub fn shapley_site(
    net: &Network,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    loss: LossKind,
    site: usize,
    policy: &DropoutPolicy,
    seed: u64,
) -> Result<Vec<f64>, DynfitError> {
    let n = *net.site_sizes().get(site).ok_or_else(|| DynfitError::ShapeMismatch(format!("no mask site {site}")))?;
    let mut mask = SiteMask::all_ones(net);
    let mut err = None;
    let mut value = |s: &[bool]| {
        mask.sites[site] = s.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        net.loss(xs, targets, &mask, loss).unwrap_or_else(|e| {
            err.get_or_insert(e);
            f64::NAN
        })
    };
    let phi = if n <= policy.max_exact {
        shapley_exact(n, policy.max_exact, &mut value)?
    } else {
        shapley_monte_carlo(n, policy.mc_permutations, seed, &mut value)
    };
    match err {
        Some(e) => Err(e),
        None => Ok(phi),
    }
}

/// Reconstruction error of every unit at site `site`: the feature map
/// against the same map with that unit's weights one bit-width lower.
pub fn reconstruction_errors(
    net: &Network,
    quant: &QuantAssignment,
    xs: &[Tensor],
    site: usize,
) -> Result<Vec<f64>, DynfitError> {
    let li = net.layer_of_site(site).ok_or_else(|| DynfitError::ShapeMismatch(format!("site {site} has no producing layer")))?;
    let eff = net.fake_quantized(&quant.q)?;
    let group_of: HashMap<(usize, usize), usize> = net.neuron_groups().iter().enumerate().map(|(i, g)| ((g.layer, g.unit), i)).collect();
    let units = net.layers[li].units();
    let ones = SiteMask::all_ones(net);
    let caches = xs.iter().map(|x| eff.forward_cached(x, &ones)).collect::<Result<Vec<_>, _>>()?;
    let mut errors = Vec::with_capacity(units);
    for u in 0..units {
        let g = group_of[&(li, u)];
        let Some(lower) = quant.q[g].step_down() else {
            errors.push(0.0);
            continue;
        };
        let mut layer = eff.layers[li].clone();
        let row = net.layers[li].row(u).to_vec();
        let scale = row.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let n = row.len();
        if scale > 0.0 {
            let f = QFormat { bits: lower, scale };
            for (k, w) in row.iter().enumerate() {
                layer.weights[u * n + k] = f.decode(f.encode(*w));
            }
        }
        let mut sq = 0.0;
        for c in &caches {
            let input = &c.inputs[li];
            let f = eff.layers[li].unit_outputs(input, u);
            let f_hat = layer.unit_outputs(input, u);
            sq += reconstruction_error(&f, &f_hat)?.powi(2);
        }
        errors.push(sq.sqrt());
    }
    Ok(errors)
}

/// Drop probabilities of every site under the configured policy. Site 0
/// (network input) always gets 0.
pub fn site_probabilities(
    state: &mut TrainState,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>, DynfitError> {
    let net = &state.net;
    let pol = &cfg.policy;
    let sizes = net.site_sizes();
    let mut p: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let groups = net.neuron_groups();
    let params = net.params();
    let site_rows = |s: usize| -> Vec<(usize, Vec<usize>)> {
        groups.iter().filter_map(|g| g.site.filter(|&(gs, _)| gs == s).map(|(_, u)| (u, g.weights.clone()))).collect()
    };
    for s in 1..sizes.len() {
        let rows = site_rows(s);
        let row_vals: Vec<Vec<f64>> = rows.iter().map(|(_, idx)| idx.iter().map(|&i| params[i]).collect()).collect();
        let row_refs: Vec<&[f64]> = row_vals.iter().map(Vec::as_slice).collect();
        let probs = match pol.kind {
            PolicyKind::Static => vec![pol.clamp(pol.scale); rows.len()],
            PolicyKind::L2 => probs_l2(&row_refs, pol),
            PolicyKind::Obd => {
                let every = pol.hessian_every.max(1) as u64;
                if state.hessian.is_none() || state.step % every == 0 && s == 1 {
                    state.hessian = Some(hessian_diag(net, xs, targets, cfg.loss)?);
                }
                let h = state.hessian.as_ref().expect("just computed");
                let h_vals: Vec<Vec<f64>> = rows.iter().map(|(_, idx)| idx.iter().map(|&i| h[i]).collect()).collect();
                let h_refs: Vec<&[f64]> = h_vals.iter().map(Vec::as_slice).collect();
                probs_obd(&obd_sensitivity(&row_refs, &h_refs)?, pol)?
            }
            PolicyKind::Fmre => probs_fmre(&reconstruction_errors(net, &state.quant, xs, s)?, pol),
            PolicyKind::SparseMask => probs_sparse(&state.logits[s], pol),
            PolicyKind::Shapley => {
                let eff = net.fake_quantized(&state.quant.q)?;
                let phi = shapley_site(&eff, xs, targets, cfg.loss, s, pol, step_seed(pol.seed, state.step))?;
                probs_shapley(&phi, pol)
            }
            PolicyKind::Taylor => {
                let eff = net.fake_quantized(&state.quant.q)?;
                let g = eff.gradients(xs, targets, &SiteMask::all_ones(net), cfg.loss)?;
                probs_taylor(&g.site_saliency[s].iter().map(|v| v.abs()).collect::<Vec<_>>(), pol)
            }
        };
        for ((u, _), v) in rows.iter().zip(probs) {
            p[s][*u] = v;
        }
    }
    Ok(p)
}

/// One training step: policy probabilities, mask sampling, then the masked
/// update of [`train_step_with_mask`].
pub fn train_step(
    state: &mut TrainState,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
    energy: Option<&EnergyContext<'_>>,
) -> Result<StepMetrics, DynfitError> {
    let probs = site_probabilities(state, xs, targets, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(step_seed(cfg.policy.seed, state.step));
    let keep: Vec<Vec<bool>> = probs.iter().map(|p| sample_mask_with(p, &mut rng).m).collect();
    let mut metrics = train_step_with_mask(state, xs, targets, cfg, &keep, energy)?;
    let hidden: Vec<f64> = probs.iter().skip(1).flatten().copied().collect();
    metrics.mean_p = if hidden.is_empty() { 0.0 } else { hidden.iter().sum::<f64>() / hidden.len() as f64 };
    Ok(metrics)
}

/// Masked SGD step with a given keep mask. Gradients of dropped neurons are
/// zeroed before the update, so their weights keep their exact bits.
pub fn train_step_with_mask(
    state: &mut TrainState,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
    keep: &[Vec<bool>],
    energy: Option<&EnergyContext<'_>>,
) -> Result<StepMetrics, DynfitError> {
    let sizes = state.net.site_sizes();
    if keep.len() != sizes.len() || keep.iter().zip(&sizes).any(|(k, &n)| k.len() != n) {
        return Err(DynfitError::ShapeMismatch("keep mask does not match the network's sites".into()));
    }
    let sparse = cfg.policy.kind == PolicyKind::SparseMask;
    let mut mask = SiteMask::from_binary(keep);
    if sparse {
        for s in 1..sizes.len() {
            for (m, z) in mask.sites[s].iter_mut().zip(&state.logits[s]) {
                *m *= sigmoid(*z);
            }
        }
    }
    let eff = state.net.fake_quantized(&state.quant.q)?;
    let mut grads = eff.gradients(xs, targets, &mask, cfg.loss)?;
    if !grads.loss.is_finite() {
        return Err(DynfitError::NonFiniteLoss);
    }
    let groups = state.net.neuron_groups();
    for g in &groups {
        if let Some((s, u)) = g.site {
            if !keep[s][u] {
                g.weights.iter().chain(g.bias.iter()).for_each(|&i| grads.params[i] = 0.0);
            }
        }
    }
    if grads.params.iter().any(|g| !g.is_finite()) {
        return Err(DynfitError::NonFiniteGradient);
    }
    let mut params = state.net.params();
    for (i, (w, g)) in params.iter_mut().zip(&grads.params).enumerate() {
        let next = *w - cfg.lr * g;
        if next.to_bits() != w.to_bits() {
            state.tracker.counts[i] += 1;
        }
        *w = next;
    }
    state.net.set_params(&params)?;
    state.tracker.iterations += 1;

    if sparse {
        for s in 1..sizes.len() {
            let gz: Vec<f64> = grads.site_saliency[s]
                .iter()
                .zip(&state.logits[s])
                .map(|(sal, &z)| {
                    let sg = sigmoid(z);
                    sal * sg * (1.0 - sg)
                })
                .collect();
            state.logits[s] = sparse_mask_step(&state.logits[s], &gz, cfg.lr)?.0;
        }
    }

    let plans = match energy {
        Some(ctx) => plan_layers(&state.net, keep, ctx)?,
        None => Vec::new(),
    };

    state.step += 1;
    if cfg.quant_search_every > 0 && state.step % cfg.quant_search_every as u64 == 0 {
        let probs = site_probabilities_cached(state, xs, targets, cfg)?;
        let at_risk: Vec<bool> = groups
            .iter()
            .map(|g| g.site.is_some_and(|(s, u)| probs[s][u] >= cfg.risk_threshold))
            .collect();
        if at_risk.iter().any(|&r| r) {
            state.quant = optimize_quant_levels(&state.net, xs, targets, cfg.loss, &state.quant, &at_risk)?;
        }
    }

    let hidden: Vec<bool> = keep.iter().skip(1).flatten().copied().collect();
    let kept = hidden.iter().filter(|&&k| k).count();
    Ok(StepMetrics {
        loss: grads.loss,
        penalized_loss: quant_penalty_loss(grads.loss, &state.quant),
        kept,
        dropped: hidden.len() - kept,
        mean_p: 0.0,
        plans,
    })
}

fn site_probabilities_cached(
    state: &mut TrainState,
    xs: &[Tensor],
    targets: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<Vec<Vec<f64>>, DynfitError> {
    // Keep the Hessian refresh schedule aligned with mask sampling.
    let saved = state.hessian.clone();
    let p = site_probabilities(state, xs, targets, cfg);
    if cfg.policy.kind == PolicyKind::Obd && saved.is_some() {
        state.hessian = saved;
    }
    p
}

/// Input mask site of every layer: the site of the closest preceding
/// weighted layer, or the network input.
pub fn input_site_of_layers(net: &Network) -> Vec<usize> {
    let mut cur = 0;
    net.layers
        .iter()
        .enumerate()
        .map(|(li, _)| {
            let s = cur;
            if let Some(site) = net.site_of_layer(li) {
                cur = site;
            }
            s
        })
        .collect()
}

/// Optimized and fused loop plans of every weighted layer for a keep mask.
pub fn plan_layers(net: &Network, keep: &[Vec<bool>], ctx: &EnergyContext<'_>) -> Result<Vec<LayerPlan>, DynfitError> {
    let in_sites = input_site_of_layers(net);
    let mut plans = Vec::new();
    for (li, layer) in net.layers.iter().enumerate() {
        let active_in = keep[in_sites[li]].iter().filter(|&&k| k).count();
        let active_out = match net.site_of_layer(li) {
            Some(s) => keep[s].iter().filter(|&&k| k).count(),
            None => layer.units(),
        };
        let Some(shape) = layer.loop_shape(active_in, active_out) else { continue };
        if shape.extent == 0 {
            continue;
        }
        let plan = QuantaPlan::optimized(ctx.profile, shape.kind, shape.extent, shape.inner_extent, shape.macs_per_iter, ctx.budget_uj)?;
        let fused = fuse_tasks(&plan, ctx.budget_uj);
        plans.push(LayerPlan {
            layer: li,
            kind: shape.kind,
            extent: shape.extent,
            l: fused.quanta.first().map_or(0, |q| q.l),
            quanta: fused.len(),
            energy_uj: fused.total_energy(),
        });
    }
    Ok(plans)
}

/// Fraction of samples classified correctly.
pub fn accuracy(net: &Network, data: &Dataset) -> Result<f64, DynfitError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for s in &data.samples {
        if argmax(&net.forward_plain(&s.x)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub selected: usize,
    pub steps: usize,
    pub epochs: usize,
    /// All selected weights reached an update ratio of at least theta.
    pub reached: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<EpochSummary>,
    pub finetune: Option<FinetuneReport>,
    /// Final drop probabilities per site, for inference.
    pub site_probs: Vec<Vec<f64>>,
}

fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Full training run: `epochs` of masked steps, then fine-tuning of the
/// under-trained weights.
pub fn train(net: Network, data: &Dataset, cfg: &TrainConfig, energy: Option<&EnergyContext<'_>>) -> Result<TrainOutcome, DynfitError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DynfitError::Config("training data is empty".into()));
    }
    if data.input != net.input || data.classes != net.output_shape().len() {
        return Err(DynfitError::ShapeMismatch("dataset does not match the network input/output".into()));
    }
    let mut state = TrainState::new(net, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let order = shuffled(data.len(), &mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ts) = data.batch(chunk);
            total += train_step(&mut state, &xs, &ts, cfg, energy)?.loss;
            steps += 1;
        }
        let eff = state.net.fake_quantized(&state.quant.q)?;
        history.push(EpochSummary { epoch, loss: total / steps as f64, accuracy: accuracy(&eff, data)? });
    }
    let finetune_report = if cfg.finetune_epochs > 0 && state.tracker.iterations > 0 {
        Some(finetune(&mut state.net, &mut state.tracker, data, cfg.finetune_epochs, cfg)?)
    } else {
        None
    };
    let probe: Vec<usize> = (0..data.len().min(64)).collect();
    let (xs, ts) = data.batch(&probe);
    let site_probs = site_probabilities(&mut state, &xs, &ts, cfg)?;
    Ok(TrainOutcome { state, history, finetune: finetune_report, site_probs })
}

/// Trains only the weights whose update ratio is below theta, without mask
/// or quantization, until all of them reach theta or `max_epochs` pass.
/// Every other weight keeps its exact bits.
pub fn finetune(
    net: &mut Network,
    tracker: &mut UpdateTracker,
    data: &Dataset,
    max_epochs: usize,
    cfg: &TrainConfig,
) -> Result<FinetuneReport, DynfitError> {
    let selected = tracker.select_undertrained()?;
    let mut report = FinetuneReport { selected: selected.len(), steps: 0, epochs: 0, reached: selected.is_empty() };
    if selected.is_empty() || data.is_empty() {
        return Ok(report);
    }
    let ones = SiteMask::all_ones(net);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xF1_4E7E);
    let done = |t: &UpdateTracker| selected.iter().all(|&i| t.counts[i] as f64 / t.iterations as f64 >= t.theta);
    'outer: for epoch in 0..max_epochs {
        report.epochs = epoch + 1;
        for chunk in shuffled(data.len(), &mut rng).chunks(cfg.batch_size.max(1)) {
            let (xs, ts) = data.batch(chunk);
            let g = net.gradients(&xs, &ts, &ones, cfg.loss)?;
            if !g.loss.is_finite() {
                return Err(DynfitError::NonFiniteLoss);
            }
            let mut params = net.params();
            for &i in &selected {
                let next = params[i] - cfg.lr * g.params[i];
                if next.to_bits() != params[i].to_bits() {
                    tracker.counts[i] += 1;
                }
                params[i] = next;
            }
            net.set_params(&params)?;
            tracker.iterations += 1;
            report.steps += 1;
            if done(tracker) {
                report.reached = true;
                break 'outer;
            }
        }
    }
    Ok(report)
}
