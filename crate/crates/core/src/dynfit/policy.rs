use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::sigmoid;
use super::DynfitError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    L2,
    Obd,
    Fmre,
    SparseMask,
    Shapley,
    Taylor,
    /// Same probability `scale` for every neuron; the conventional baseline.
    Static,
}

impl PolicyKind {
    /// The six dynamic formulations.
    pub const DYNAMIC: [PolicyKind; 6] =
        [PolicyKind::L2, PolicyKind::Obd, PolicyKind::Fmre, PolicyKind::SparseMask, PolicyKind::Shapley, PolicyKind::Taylor];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::L2 => "l2",
            PolicyKind::Obd => "obd",
            PolicyKind::Fmre => "fmre",
            PolicyKind::SparseMask => "sparse_mask",
            PolicyKind::Shapley => "shapley",
            PolicyKind::Taylor => "taylor",
            PolicyKind::Static => "static",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = DynfitError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [PolicyKind::Static].into_iter().chain(PolicyKind::DYNAMIC).find(|k| k.as_str() == s).ok_or_else(|| DynfitError::Config(format!("unknown dropout policy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DropoutPolicy {
    pub kind: PolicyKind,
    /// alpha, beta, gamma, delta or lambda_t depending on `kind`; the drop
    /// probability itself for `static`.
    pub scale: f64,
    pub epsilon: f64,
    pub p_max: f64,
    pub seed: u64,
    /// Initial mask logit for `sparse_mask`.
    pub z_init: f64,
    /// Largest layer for exact Shapley enumeration.
    pub max_exact: usize,
    /// Permutations sampled by the Monte Carlo Shapley path.
    pub mc_permutations: usize,
    /// Steps between Hessian refreshes for `obd`.
    pub hessian_every: usize,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        Self {
            kind: PolicyKind::L2,
            scale: 0.1,
            epsilon: 1e-8,
            p_max: 0.9,
            seed: 0,
            z_init: 2.0,
            max_exact: 12,
            mc_permutations: 64,
            hessian_every: 10,
        }
    }
}

impl DropoutPolicy {
    pub fn new(kind: PolicyKind, scale: f64) -> Self {
        Self { kind, scale, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), DynfitError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(DynfitError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(0.0..1.0).contains(&self.p_max) {
            return Err(DynfitError::Config(format!("p_max must be in [0, 1), got {}", self.p_max)));
        }
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(DynfitError::Config(format!("policy scale must be finite and non-negative, got {}", self.scale)));
        }
        Ok(())
    }

    pub fn clamp(&self, p: f64) -> f64 {
        if p.is_nan() {
            self.p_max
        } else {
            p.clamp(0.0, self.p_max)
        }
    }
}

/// `p_i = alpha / (||W_i|| + eps)` over fan-in rows.
pub fn probs_l2(rows: &[&[f64]], policy: &DropoutPolicy) -> Vec<f64> {
    rows.iter()
        .map(|r| {
            let norm = r.iter().map(|w| w * w).sum::<f64>().sqrt();
            policy.clamp(policy.scale / (norm + policy.epsilon))
        })
        .collect()
}

/// Saliency `s_i = sum_j H_jj W_ij^2` of each fan-in row.
pub fn obd_sensitivity(rows: &[&[f64]], hessian_rows: &[&[f64]]) -> Result<Vec<f64>, DynfitError> {
    rows.iter()
        .zip(hessian_rows)
        .map(|(w, h)| {
            if h.iter().any(|v| !v.is_finite()) {
                return Err(DynfitError::NonFiniteHessian);
            }
            Ok(w.iter().zip(*h).map(|(w, h)| h * w * w).sum())
        })
        .collect()
}

/// `p_i = beta * s_i / (max s + eps)`.
pub fn probs_obd(sensitivity: &[f64], policy: &DropoutPolicy) -> Result<Vec<f64>, DynfitError> {
    if sensitivity.iter().any(|s| !s.is_finite()) {
        return Err(DynfitError::NonFiniteHessian);
    }
    Ok(ratio_to_max(sensitivity, policy))
}

/// `p_i = gamma * RE_i / (max RE + eps)`.
pub fn probs_fmre(errors: &[f64], policy: &DropoutPolicy) -> Vec<f64> {
    ratio_to_max(errors, policy)
}

fn ratio_to_max(v: &[f64], policy: &DropoutPolicy) -> Vec<f64> {
    let max = v.iter().copied().fold(0.0, f64::max);
    v.iter()
        .map(|&s| {
            let denom = max + policy.epsilon;
            policy.clamp(if denom > 0.0 { policy.scale * s / denom } else { 0.0 })
        })
        .collect()
}

/// L2 distance between a feature map and its reconstruction.
pub fn reconstruction_error(f: &[f64], f_hat: &[f64]) -> Result<f64, DynfitError> {
    if f.len() != f_hat.len() {
        return Err(DynfitError::ShapeMismatch(format!("feature map {} vs reconstruction {}", f.len(), f_hat.len())));
    }
    Ok(f.iter().zip(f_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
}

/// One gradient step on the mask logits; returns the new logits and `sigma(z)`.
pub fn sparse_mask_step(z: &[f64], grad_z: &[f64], eta: f64) -> Result<(Vec<f64>, Vec<f64>), DynfitError> {
    if z.len() != grad_z.len() {
        return Err(DynfitError::ShapeMismatch("logits and gradients differ in length".into()));
    }
    if grad_z.iter().any(|g| !g.is_finite()) {
        return Err(DynfitError::NonFiniteGradient);
    }
    let z2: Vec<f64> = z.iter().zip(grad_z).map(|(z, g)| z - eta * g).collect();
    let m = z2.iter().map(|&v| sigmoid(v)).collect();
    Ok((z2, m))
}

/// Drop probabilities implied by mask logits: `1 - sigma(z)`.
pub fn probs_sparse(z: &[f64], policy: &DropoutPolicy) -> Vec<f64> {
    z.iter().map(|&v| policy.clamp(1.0 - sigmoid(v))).collect()
}

/// Inference-time hard mask `sigma(z) >= 0.5`.
pub fn hard_mask(z: &[f64]) -> Vec<bool> {
    z.iter().map(|&v| sigmoid(v) >= 0.5).collect()
}

/// `p_i = lambda_t / (impact_i + eps)`.
pub fn probs_taylor(impacts: &[f64], policy: &DropoutPolicy) -> Vec<f64> {
    impacts.iter().map(|&s| policy.clamp(policy.scale / (s.abs() + policy.epsilon))).collect()
}

/// Exact Shapley values of `n` players where `value(S)` is the loss with
/// only coalition `S` kept.
pub fn shapley_exact(n: usize, max_exact: usize, mut value: impl FnMut(&[bool]) -> f64) -> Result<Vec<f64>, DynfitError> {
    if n > max_exact || n >= 31 {
        return Err(DynfitError::TooManyNeuronsForExact { neurons: n, max_exact });
    }
    let subsets = 1usize << n;
    let mut coalition = vec![false; n];
    let losses: Vec<f64> = (0..subsets)
        .map(|s| {
            for (i, c) in coalition.iter_mut().enumerate() {
                *c = s >> i & 1 == 1;
            }
            value(&coalition)
        })
        .collect();
    // weight(|S|) = |S|! (n - |S| - 1)! / n!
    let mut fact = vec![1.0f64; n + 1];
    for k in 1..=n {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..n).map(|k| fact[k] * fact[n - k - 1] / fact[n]).collect();
    let mut phi = vec![0.0; n];
    for s in 0..subsets {
        let size = s.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if s >> i & 1 == 0 {
                *p += weight[size] * (losses[s | 1 << i] - losses[s]);
            }
        }
    }
    Ok(phi)
}

/// Permutation-sampling estimate of the Shapley values.
pub fn shapley_monte_carlo(n: usize, permutations: usize, seed: u64, mut value: impl FnMut(&[bool]) -> f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phi = vec![0.0; n];
    let mut order: Vec<usize> = (0..n).collect();
    let samples = permutations.max(1);
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let mut coalition = vec![false; n];
        let mut prev = value(&coalition);
        for &i in &order {
            coalition[i] = true;
            let next = value(&coalition);
            phi[i] += next - prev;
            prev = next;
        }
    }
    phi.iter_mut().for_each(|p| *p /= samples as f64);
    phi
}

/// `p_i = delta / (max(-phi_i, 0) + eps)`: a neuron whose presence lowers the
/// loss a lot is important and rarely dropped.
pub fn probs_shapley(phi: &[f64], policy: &DropoutPolicy) -> Vec<f64> {
    phi.iter().map(|&v| policy.clamp(policy.scale / ((-v).max(0.0) + policy.epsilon))).collect()
}

/// Diagonal Hessian by central differences of a gradient function, with
/// `h = 1e-3 (1 + |w_j|)`.
pub fn hessian_diag_fd(
    params: &[f64],
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>, DynfitError>,
) -> Result<Vec<f64>, DynfitError> {
    let mut p = params.to_vec();
    let mut h_diag = Vec::with_capacity(params.len());
    for j in 0..params.len() {
        let h = 1e-3 * (1.0 + params[j].abs());
        p[j] = params[j] + h;
        let up = grad(&p)?[j];
        p[j] = params[j] - h;
        let down = grad(&p)?[j];
        p[j] = params[j];
        let v = (up - down) / (2.0 * h);
        if !v.is_finite() {
            return Err(DynfitError::NonFiniteLoss);
        }
        h_diag.push(v);
    }
    Ok(h_diag)
}

/// Per-neuron keep/drop decisions together with the probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSample {
    pub p: Vec<f64>,
    pub m: Vec<bool>,
}

/// `m_i ~ Bernoulli(1 - p_i)`, deterministic in `seed`.
pub fn sample_mask(p: &[f64], seed: u64) -> MaskSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_mask_with(p, &mut rng)
}

pub fn sample_mask_with(p: &[f64], rng: &mut impl Rng) -> MaskSample {
    let m = p.iter().map(|&pi| rng.gen::<f64>() >= pi).collect();
    MaskSample { p: p.to_vec(), m }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pol(kind: PolicyKind, scale: f64, eps: f64) -> DropoutPolicy {
        DropoutPolicy { kind, scale, epsilon: eps, p_max: 0.9, ..DropoutPolicy::default() }
    }

    #[test]
    fn l2_reference_values() {
        let p = pol(PolicyKind::L2, 0.5, 0.0);
        assert!((probs_l2(&[&[3.0, 4.0]], &p)[0] - 0.1).abs() < 1e-12);
        assert_eq!(probs_l2(&[&[3.0, 4.0], &[1.0]], &pol(PolicyKind::L2, 0.0, 0.0)), vec![0.0, 0.0]);
        assert_eq!(probs_l2(&[&[0.0, 0.0]], &pol(PolicyKind::L2, 0.5, 0.1)), vec![0.9]);
    }

    #[test]
    fn obd_reference_values() {
        let p = probs_obd(&[2.0, 8.0], &pol(PolicyKind::Obd, 1.0, 0.0)).unwrap();
        assert_eq!(p, vec![0.25, 0.9]);
        assert_eq!(probs_obd(&[3.0, 3.0, 3.0], &pol(PolicyKind::Obd, 0.3, 0.0)).unwrap(), vec![0.3; 3]);
        assert_eq!(probs_obd(&[1.0, 5.0], &pol(PolicyKind::Obd, 0.0, 0.0)).unwrap(), vec![0.0; 2]);
        assert!(probs_obd(&[f64::NAN], &pol(PolicyKind::Obd, 1.0, 0.0)).is_err());
    }

    #[test]
    fn obd_sensitivity_sums_rows() {
        let s = obd_sensitivity(&[&[1.0, 2.0], &[3.0, 0.0]], &[&[2.0, 0.5], &[1.0, 9.0]]).unwrap();
        assert_eq!(s, vec![4.0, 9.0]);
    }

    #[test]
    fn fmre_reference_values() {
        let p = probs_fmre(&[1.0, 3.0], &pol(PolicyKind::Fmre, 0.6, 0.0));
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.6).abs() < 1e-12);
        assert_eq!(probs_fmre(&[0.0, 0.0], &pol(PolicyKind::Fmre, 0.6, 0.0)), vec![0.0, 0.0]);
        assert_eq!(probs_fmre(&[1.0, 3.0], &pol(PolicyKind::Fmre, 0.0, 0.0)), vec![0.0, 0.0]);
    }

    #[test]
    fn sparse_mask_reference_values() {
        let (z, m) = sparse_mask_step(&[0.0], &[0.0], 1.0).unwrap();
        assert_eq!((z[0], m[0]), (0.0, 0.5));
        let (z, m) = sparse_mask_step(&[0.0], &[0.5], 1.0).unwrap();
        assert_eq!(z[0], -0.5);
        assert!((m[0] - 0.377_540_668_798_145_4).abs() < 1e-12);
        assert!(sparse_mask_step(&[0.0], &[f64::INFINITY], 1.0).is_err());
        assert_eq!(hard_mask(&[0.0, -0.1, 3.0]), vec![true, false, true]);
    }

    #[test]
    fn taylor_reference_values() {
        let p = probs_taylor(&[0.5, 2.0], &pol(PolicyKind::Taylor, 0.1, 0.0));
        assert!((p[0] - 0.2).abs() < 1e-12 && (p[1] - 0.05).abs() < 1e-12);
        assert!(probs_taylor(&[1e12], &pol(PolicyKind::Taylor, 0.1, 1e-8))[0] < 1e-12);
        assert_eq!(probs_taylor(&[0.5], &pol(PolicyKind::Taylor, 0.0, 1e-8)), vec![0.0]);
    }

    #[test]
    fn shapley_two_player_reference() {
        let table = |s: &[bool]| match (s[0], s[1]) {
            (false, false) => 4.0,
            (true, false) => 2.0,
            (false, true) => 3.0,
            (true, true) => 0.0,
        };
        let phi = shapley_exact(2, 12, table).unwrap();
        assert_eq!(phi, vec![-2.5, -1.5]);
        assert_eq!(phi[0] + phi[1], -4.0);
        let p = probs_shapley(&phi, &pol(PolicyKind::Shapley, 0.3, 0.0));
        assert!((p[0] - 0.12).abs() < 1e-12 && (p[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn shapley_efficiency_three_players() {
        let v = |s: &[bool]| {
            let k = s.iter().filter(|&&b| b).count() as f64;
            5.0 - 1.5 * k + if s[0] && s[2] { -0.75 } else { 0.0 } + if s[1] { 0.2 } else { 0.0 }
        };
        let phi = shapley_exact(3, 12, v).unwrap();
        let full = v(&[true, true, true]);
        let empty = v(&[false, false, false]);
        assert!((phi.iter().sum::<f64>() - (full - empty)).abs() <= 1e-12);
        assert!(matches!(shapley_exact(13, 12, v), Err(DynfitError::TooManyNeuronsForExact { .. })));
    }

    #[test]
    fn monte_carlo_is_exact_for_additive_games() {
        let v = |s: &[bool]| s.iter().enumerate().map(|(i, &b)| if b { -(i as f64) } else { 0.0 }).sum::<f64>();
        let phi = shapley_monte_carlo(5, 10, 3, v);
        for (i, p) in phi.iter().enumerate() {
            assert!((p + i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_of_simple_losses() {
        // L = 0.5 (w - 1)^2, gradient w - 1
        let h = hessian_diag_fd(&[3.0], |w| Ok(vec![w[0] - 1.0])).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-9);
        // L = w^4, gradient 4 w^3
        let h = hessian_diag_fd(&[1.0], |w| Ok(vec![4.0 * w[0].powi(3)])).unwrap();
        assert!((h[0] - 12.0).abs() / 12.0 < 1e-2);
        // linear loss
        let h = hessian_diag_fd(&[0.7, -2.0], |_| Ok(vec![2.0, -3.0])).unwrap();
        assert!(h.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn mask_extremes_and_determinism() {
        let s = sample_mask(&[0.0, 1.0, 0.5], 9);
        assert!(s.m[0] && !s.m[1]);
        assert_eq!(sample_mask(&[0.5; 64], 4), sample_mask(&[0.5; 64], 4));
    }

    #[test]
    fn keep_rate_within_three_sigma() {
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let kept = (0..n).filter(|_| sample_mask_with(&[0.3], &mut rng).m[0]).count();
        let rate = kept as f64 / n as f64;
        assert!((rate - 0.7).abs() <= 3.0 * (0.21f64 / n as f64).sqrt());
    }

    #[test]
    fn clamp_contract_on_hostile_inputs() {
        let p = DropoutPolicy::default();
        let inputs = [0.0, -1.0, 1e-300, 1e300, f64::MIN_POSITIVE];
        let rows: Vec<&[f64]> = inputs.iter().map(std::slice::from_ref).collect();
        let all = [
            probs_l2(&rows, &p),
            probs_obd(&inputs, &p).unwrap(),
            probs_fmre(&inputs, &p),
            probs_sparse(&inputs, &p),
            probs_shapley(&inputs, &p),
            probs_taylor(&inputs, &p),
        ];
        assert!(all.iter().flatten().all(|&v| (0.0..=p.p_max).contains(&v)));
    }

    #[test]
    fn policy_validation() {
        assert!(DropoutPolicy { p_max: 1.0, ..DropoutPolicy::default() }.validate().is_err());
        assert!(DropoutPolicy::default().validate().is_ok());
        assert_eq!("sparse_mask".parse::<PolicyKind>().unwrap(), PolicyKind::SparseMask);
        assert!("dropout".parse::<PolicyKind>().is_err());
    }
}
