//! Device and kernel profiles, the kernel energy model, and simulated
//! memory micro-profiling.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Latency ratio between consecutive sweep points that counts as a level boundary.
pub const KNEE_RATIO: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DevModelError {
    #[error("profile {profile:?} has no entry for kernel kind {kind}")]
    UnknownKernelKind { profile: String, kind: KernelKind },
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error("unknown profile name {0:?}")]
    UnknownProfile(String),
    #[error("reading profile {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing profile: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gemm,
    Matvec,
    Hadamard2d,
    Conv1d,
    Conv2d,
    Dwsconv2d,
}

impl KernelKind {
    pub const ALL: [KernelKind; 6] = [
        KernelKind::Gemm,
        KernelKind::Matvec,
        KernelKind::Hadamard2d,
        KernelKind::Conv1d,
        KernelKind::Conv2d,
        KernelKind::Dwsconv2d,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Gemm => "gemm",
            KernelKind::Matvec => "matvec",
            KernelKind::Hadamard2d => "hadamard2d",
            KernelKind::Conv1d => "conv1d",
            KernelKind::Conv2d => "conv2d",
            KernelKind::Dwsconv2d => "dwsconv2d",
        }
    }
}

impl fmt::Display for KernelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for KernelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        KernelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown kernel kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryLevel {
    pub size: u64,
    pub access_latency_ns: f64,
}

/// One entry of the device repository. Energies in nanojoules, times in
/// nanoseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    pub e_per_mac: BTreeMap<KernelKind, f64>,
    pub e_checkpoint: f64,
    pub e_restore: f64,
    pub t_per_mac: BTreeMap<KernelKind, f64>,
    pub memory_levels: Vec<MemoryLevel>,
}

impl HardwareProfile {
    pub fn validate(&self) -> Result<(), DevModelError> {
        let bad = |msg: String| Err(DevModelError::InvalidProfile(format!("{}: {msg}", self.name)));
        for (kind, e) in &self.e_per_mac {
            if !(e.is_finite() && *e > 0.0) {
                return bad(format!("e_per_mac[{kind}] must be > 0"));
            }
        }
        for (kind, t) in &self.t_per_mac {
            if !(t.is_finite() && *t > 0.0) {
                return bad(format!("t_per_mac[{kind}] must be > 0"));
            }
        }
        if !(self.e_checkpoint.is_finite() && self.e_checkpoint > 0.0) {
            return bad("e_checkpoint must be > 0".into());
        }
        if !(self.e_restore.is_finite() && self.e_restore > 0.0) {
            return bad("e_restore must be > 0".into());
        }
        for (i, lvl) in self.memory_levels.iter().enumerate() {
            if lvl.size == 0 || !(lvl.access_latency_ns > 0.0) {
                return bad(format!("memory level {i} needs positive size and latency"));
            }
            if i > 0 && lvl.size <= self.memory_levels[i - 1].size {
                return bad("memory levels must be ordered by increasing size".into());
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self, DevModelError> {
        let p: HardwareProfile = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DevModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|source| DevModelError::Io { path: path.display().to_string(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("profile serializes")
    }

    pub fn e_per_mac_nj(&self, kind: KernelKind) -> Result<f64, DevModelError> {
        self.e_per_mac
            .get(&kind)
            .copied()
            .ok_or_else(|| DevModelError::UnknownKernelKind { profile: self.name.clone(), kind })
    }

    pub fn t_per_mac_ns(&self, kind: KernelKind) -> Result<f64, DevModelError> {
        self.t_per_mac
            .get(&kind)
            .copied()
            .ok_or_else(|| DevModelError::UnknownKernelKind { profile: self.name.clone(), kind })
    }

    /// Energy of one loop iteration (no checkpoint), in microjoules.
    pub fn iteration_energy_uj(&self, kind: KernelKind, macs_per_iter: u64) -> Result<f64, DevModelError> {
        Ok(macs_per_iter as f64 * self.e_per_mac_nj(kind)? / 1_000.0)
    }

    pub fn checkpoint_energy_uj(&self) -> f64 {
        self.e_checkpoint / 1_000.0
    }

    pub fn restore_energy_uj(&self) -> f64 {
        self.e_restore / 1_000.0
    }

    /// Wall time of `iterations` loop iterations in seconds.
    pub fn compute_time_s(&self, kind: KernelKind, iterations: u64, macs_per_iter: u64) -> Result<f64, DevModelError> {
        Ok(iterations as f64 * macs_per_iter as f64 * self.t_per_mac_ns(kind)? * 1e-9)
    }

    fn level_latency(&self, size: u64) -> Option<f64> {
        self.memory_levels
            .iter()
            .find(|lvl| size <= lvl.size)
            .or(self.memory_levels.last())
            .map(|lvl| lvl.access_latency_ns)
    }

    /// Synthetic profile with one energy/time constant for every kernel kind.
    pub fn uniform(name: &str, e_per_mac: f64, t_per_mac: f64, e_checkpoint: f64, e_restore: f64, memory_levels: Vec<MemoryLevel>) -> Self {
        Self {
            name: name.to_string(),
            e_per_mac: KernelKind::ALL.iter().map(|k| (*k, e_per_mac)).collect(),
            e_checkpoint,
            e_restore,
            t_per_mac: KernelKind::ALL.iter().map(|k| (*k, t_per_mac)).collect(),
            memory_levels,
        }
    }
}

/// Estimated energy of a quanta of `l` iterations including its checkpoint
/// write, in microjoules.
pub fn estimate_energy(profile: &HardwareProfile, kind: KernelKind, l: u64, macs_per_iter: u64) -> Result<f64, DevModelError> {
    let e_mac = profile.e_per_mac_nj(kind)?;
    Ok((l as f64 * macs_per_iter as f64 * e_mac + profile.e_checkpoint) / 1_000.0)
}

/// Built-in synthetic devices. Constants are illustrative and are not
/// measurements of any board.
pub mod builtin {
    use super::*;

    const KIB: u64 = 1024;

    fn with_kind_factors(mut p: HardwareProfile) -> HardwareProfile {
        // Convolution kernels pay extra index arithmetic per MAC.
        for kind in [KernelKind::Conv1d, KernelKind::Conv2d, KernelKind::Dwsconv2d] {
            if let Some(e) = p.e_per_mac.get_mut(&kind) {
                *e *= 1.25;
            }
            if let Some(t) = p.t_per_mac.get_mut(&kind) {
                *t *= 1.25;
            }
        }
        p
    }

    pub fn synthetic_low() -> HardwareProfile {
        with_kind_factors(HardwareProfile::uniform(
            "synthetic-low",
            5.0,
            250.0,
            3_000.0,
            2_000.0,
            vec![
                MemoryLevel { size: 8 * KIB, access_latency_ns: 15.0 },
                MemoryLevel { size: 256 * KIB, access_latency_ns: 125.0 },
            ],
        ))
    }

    pub fn synthetic_mid() -> HardwareProfile {
        with_kind_factors(HardwareProfile::uniform(
            "synthetic-mid",
            2.0,
            60.0,
            1_500.0,
            1_000.0,
            vec![
                MemoryLevel { size: 16 * KIB, access_latency_ns: 8.0 },
                MemoryLevel { size: 1024 * KIB, access_latency_ns: 60.0 },
            ],
        ))
    }

    pub fn synthetic_high() -> HardwareProfile {
        with_kind_factors(HardwareProfile::uniform(
            "synthetic-high",
            0.5,
            10.0,
            800.0,
            500.0,
            vec![
                MemoryLevel { size: 32 * KIB, access_latency_ns: 2.0 },
                MemoryLevel { size: 512 * KIB, access_latency_ns: 10.0 },
                MemoryLevel { size: 8192 * KIB, access_latency_ns: 80.0 },
            ],
        ))
    }

    pub fn all() -> Vec<HardwareProfile> {
        vec![synthetic_low(), synthetic_mid(), synthetic_high()]
    }
}

/// Immutable set of named profiles.
#[derive(Debug, Clone, Default)]
pub struct ProfileRegistry {
    profiles: BTreeMap<String, HardwareProfile>,
}

impl ProfileRegistry {
    pub fn with_builtins() -> Self {
        let mut reg = Self::default();
        for p in builtin::all() {
            reg.profiles.insert(p.name.clone(), p);
        }
        reg
    }

    pub fn insert(&mut self, profile: HardwareProfile) -> Result<(), DevModelError> {
        profile.validate()?;
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&HardwareProfile, DevModelError> {
        self.profiles.get(name).ok_or_else(|| DevModelError::UnknownProfile(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.profiles.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub size: u64,
    pub stride: u64,
    pub latency_ns: f64,
}

/// Simulated size/stride sweep: a strided walk over a working set of `size`
/// bytes, reporting mean latency per access. Every access is served by the
/// smallest memory level that holds the working set.
pub fn micro_profile(sizes: &[u64], strides: &[u64], device: &HardwareProfile) -> Vec<ProfilePoint> {
    let mut points = Vec::with_capacity(sizes.len() * strides.len());
    for &stride in strides {
        for &size in sizes {
            let accesses = (size / stride.max(1)).max(1);
            let level = device.level_latency(size).unwrap_or(0.0);
            let total = accesses as f64 * level;
            points.push(ProfilePoint { size, stride, latency_ns: total / accesses as f64 });
        }
    }
    points
}

/// Recovers level sizes from a sweep: the last size before each latency
/// jump of at least [`KNEE_RATIO`]. Uses the smallest stride present.
pub fn detect_knees(points: &[ProfilePoint]) -> Vec<u64> {
    let Some(stride) = points.iter().map(|p| p.stride).min() else {
        return Vec::new();
    };
    let mut curve: Vec<&ProfilePoint> = points.iter().filter(|p| p.stride == stride).collect();
    curve.sort_by_key(|p| p.size);
    curve
        .windows(2)
        .filter(|w| w[0].latency_ns > 0.0 && w[1].latency_ns >= KNEE_RATIO * w[0].latency_ns)
        .map(|w| w[0].size)
        .collect()
}

/// Builds a profile whose memory hierarchy is the one recovered from a
/// sweep: one level per knee plus a backing level covering the largest size.
pub fn profile_from_knees(template: &HardwareProfile, points: &[ProfilePoint]) -> HardwareProfile {
    let knees = detect_knees(points);
    let stride = points.iter().map(|p| p.stride).min().unwrap_or(1);
    let mut curve: Vec<&ProfilePoint> = points.iter().filter(|p| p.stride == stride).collect();
    curve.sort_by_key(|p| p.size);
    let latency_at = |size: u64| curve.iter().find(|p| p.size == size).map(|p| p.latency_ns).unwrap_or(1.0);
    let mut levels: Vec<MemoryLevel> =
        knees.iter().map(|&k| MemoryLevel { size: k, access_latency_ns: latency_at(k) }).collect();
    if let Some(last) = curve.last() {
        if levels.last().map_or(true, |l| l.size < last.size) {
            levels.push(MemoryLevel { size: last.size, access_latency_ns: last.latency_ns });
        }
    }
    HardwareProfile { name: format!("{}-recovered", template.name), memory_levels: levels, ..template.clone() }
}
