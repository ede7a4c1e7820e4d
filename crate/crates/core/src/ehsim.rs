//! Energy income and storage.
//!
//! Harvested power is replayed from an [`EnergyTrace`] with zero-order hold
//! between samples and banked in a [`CapacitorState`]. All bookkeeping is in
//! integer nanojoules so that conservation can be asserted exactly; volts and
//! farads are only touched when a state is created or inspected.

use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Header line of the trace CSV format.
pub const TRACE_HEADER: &str = "t_s,power_uW";

/// Interval assumed for a single-sample trace.
const SINGLE_SAMPLE_INTERVAL_S: f64 = 1.0;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("trace has no samples")]
    EmptyTrace,
    #[error("timestamps not strictly increasing at line {line} ({prev} then {next})")]
    NonMonotonicTime { line: usize, prev: f64, next: f64 },
    #[error("negative or non-finite power {power} at line {line}")]
    InvalidPower { line: usize, power: f64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum CapacitorError {
    #[error("capacitance must be finite and non-negative, got {0}")]
    Capacitance(f64),
    #[error("voltage window invalid: need 0 <= v_min <= v_now <= v_max (got {v_min} <= {v_now} <= {v_max})")]
    VoltageOutOfRange { v_min: f64, v_now: f64, v_max: f64 },
    #[error("efficiency must lie in (0, 1], got {0}")]
    Efficiency(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    SolarOutdoor,
    SolarIndoor,
    RfWifiHome,
    RfWifiOffice,
    Thermal,
    Piezo,
    Synthetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub t: f64,
    pub power_uw: f64,
}

/// Harvested power over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub source_kind: SourceKind,
    samples: Vec<TraceSample>,
    sample_interval: f64,
}

impl EnergyTrace {
    /// Builds a trace from samples, enforcing the ordering and sign invariants.
    pub fn new(source_kind: SourceKind, samples: Vec<TraceSample>) -> Result<Self, TraceError> {
        if samples.is_empty() {
            return Err(TraceError::EmptyTrace);
        }
        for (i, s) in samples.iter().enumerate() {
            if !s.power_uw.is_finite() || s.power_uw < 0.0 {
                return Err(TraceError::InvalidPower { line: i + 2, power: s.power_uw });
            }
            if !s.t.is_finite() {
                return Err(TraceError::Parse { line: i + 2, msg: "non-finite timestamp".into() });
            }
            if i > 0 && s.t <= samples[i - 1].t {
                return Err(TraceError::NonMonotonicTime {
                    line: i + 2,
                    prev: samples[i - 1].t,
                    next: s.t,
                });
            }
        }
        let n = samples.len();
        let sample_interval = if n > 1 {
            (samples[n - 1].t - samples[0].t) / (n - 1) as f64
        } else {
            SINGLE_SAMPLE_INTERVAL_S
        };
        Ok(Self { source_kind, samples, sample_interval })
    }

    pub fn samples(&self) -> &[TraceSample] {
        &self.samples
    }

    /// Mean spacing between samples in seconds.
    pub fn sample_interval(&self) -> f64 {
        self.sample_interval
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    /// Zero-order hold lookup. Before the first sample the first value is
    /// used; after the last sample the last value is held.
    pub fn power_at(&self, t: f64) -> f64 {
        let idx = self.samples.partition_point(|s| s.t <= t);
        self.samples[idx.saturating_sub(1)].power_uw
    }

    /// Energy harvested over `[t, t + dt]` in microjoules, before conversion loss.
    pub fn energy_between_uj(&self, t: f64, dt: f64) -> f64 {
        if dt <= 0.0 {
            return 0.0;
        }
        let end = t + dt;
        let mut total = 0.0;
        let mut cursor = t;
        let mut idx = self.samples.partition_point(|s| s.t <= t);
        while cursor < end {
            let next_edge = if idx < self.samples.len() { self.samples[idx].t.min(end) } else { end };
            total += self.samples[idx.saturating_sub(1)].power_uw * (next_edge - cursor);
            cursor = next_edge;
            idx += 1;
        }
        total
    }

    /// Mean power over the sampled span (zero-order hold), in microwatts.
    pub fn mean_power_uw(&self) -> f64 {
        let span = self.end() - self.start();
        if span <= 0.0 {
            return self.samples[0].power_uw;
        }
        self.energy_between_uj(self.start(), span) / span
    }

    /// Returns a copy with every sample's power multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let samples = self
            .samples
            .iter()
            .map(|s| TraceSample { t: s.t, power_uw: (s.power_uw * factor).max(0.0) })
            .collect();
        Self { source_kind: self.source_kind, samples, sample_interval: self.sample_interval }
    }

    pub fn from_csv_str(text: &str, source_kind: SourceKind) -> Result<Self, TraceError> {
        let mut samples = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if i == 0 && line.eq_ignore_ascii_case(TRACE_HEADER) {
                continue;
            }
            let mut fields = line.split(',');
            let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
                return Err(TraceError::Parse { line: line_no, msg: format!("expected 2 fields in {line:?}") });
            };
            let t: f64 = a
                .trim()
                .parse()
                .map_err(|e| TraceError::Parse { line: line_no, msg: format!("bad time {a:?}: {e}") })?;
            let power_uw: f64 = b
                .trim()
                .parse()
                .map_err(|e| TraceError::Parse { line: line_no, msg: format!("bad power {b:?}: {e}") })?;
            if let Some(prev) = samples.last().map(|s: &TraceSample| s.t) {
                if t <= prev {
                    return Err(TraceError::NonMonotonicTime { line: line_no, prev, next: t });
                }
            }
            samples.push(TraceSample { t, power_uw });
        }
        Self::new(source_kind, samples)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(16 * self.samples.len() + 16);
        out.push_str(TRACE_HEADER);
        out.push('\n');
        for s in &self.samples {
            out.push_str(&format!("{},{}\n", s.t, s.power_uw));
        }
        out
    }

    /// Synthetic constant-power trace.
    pub fn constant(power_uw: f64, duration_s: f64, interval_s: f64) -> Self {
        let n = ((duration_s / interval_s).round() as usize).max(1) + 1;
        let samples = (0..n).map(|i| TraceSample { t: i as f64 * interval_s, power_uw }).collect();
        Self::new(SourceKind::Synthetic, samples).expect("constant trace is valid")
    }

    /// Piezo-like bursty trace: short high-power bursts separated by
    /// near-silent gaps, with seeded jitter on burst length and amplitude.
    pub fn bursty(seed: u64, shape: BurstShape) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ((shape.duration_s / shape.interval_s).round() as usize).max(1) + 1;
        let mut samples = Vec::with_capacity(n);
        let mut remaining_on = 0usize;
        for i in 0..n {
            if remaining_on == 0 && rng.gen::<f64>() < shape.burst_probability {
                remaining_on = rng.gen_range(1..=shape.max_burst_samples.max(1));
            }
            let power_uw = if remaining_on > 0 {
                remaining_on -= 1;
                shape.peak_uw * rng.gen_range(0.5..1.0)
            } else {
                shape.floor_uw * rng.gen::<f64>()
            };
            samples.push(TraceSample { t: i as f64 * shape.interval_s, power_uw });
        }
        Self::new(SourceKind::Piezo, samples).expect("bursty trace is valid")
    }
}

/// Parameters for [`EnergyTrace::bursty`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BurstShape {
    pub duration_s: f64,
    pub interval_s: f64,
    pub peak_uw: f64,
    pub floor_uw: f64,
    pub burst_probability: f64,
    pub max_burst_samples: usize,
}

impl Default for BurstShape {
    fn default() -> Self {
        Self {
            duration_s: 60.0,
            interval_s: 0.01,
            peak_uw: 2_000.0,
            floor_uw: 20.0,
            burst_probability: 0.08,
            max_burst_samples: 4,
        }
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<EnergyTrace, TraceError> {
    load_trace_as(path, SourceKind::Synthetic)
}

pub fn load_trace_as(path: impl AsRef<Path>, source_kind: SourceKind) -> Result<EnergyTrace, TraceError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| TraceError::Io { path: path.display().to_string(), source })?;
    EnergyTrace::from_csv_str(&text, source_kind)
}

pub fn nj_to_uj(nj: u64) -> f64 {
    nj as f64 / 1_000.0
}

/// Rounds a microjoule quantity to whole nanojoules (negative clamps to zero).
pub fn uj_to_nj(uj: f64) -> u64 {
    if uj.is_finite() && uj > 0.0 {
        (uj * 1_000.0).round() as u64
    } else {
        0
    }
}

fn joules_to_nj(j: f64) -> u64 {
    if j.is_finite() && j > 0.0 {
        (j * 1e9).round() as u64
    } else {
        0
    }
}

/// Capacitor configuration as it appears in config files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacitorConfig {
    pub capacitance_f: f64,
    pub v_init: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub efficiency: f64,
}

impl Default for CapacitorConfig {
    // Placeholder values; nothing here is a measured testbed constant.
    fn default() -> Self {
        Self { capacitance_f: 100e-6, v_init: 3.3, v_min: 1.8, v_max: 3.6, efficiency: 1.0 }
    }
}

/// Stored energy. The integer `stored_nj` is authoritative; `v_now` is
/// derived from it by inverting `E = C (v^2 - v_min^2) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CapacitorState {
    capacitance_bits: u64,
    v_min_bits: u64,
    v_max_bits: u64,
    efficiency_bits: u64,
    stored_nj: u64,
    max_nj: u64,
}

impl CapacitorState {
    pub fn new(capacitance_f: f64, v_now: f64, v_min: f64, v_max: f64, efficiency: f64) -> Result<Self, CapacitorError> {
        if !capacitance_f.is_finite() || capacitance_f < 0.0 {
            return Err(CapacitorError::Capacitance(capacitance_f));
        }
        if !(v_min >= 0.0 && v_min <= v_now && v_now <= v_max && v_max.is_finite()) {
            return Err(CapacitorError::VoltageOutOfRange { v_min, v_now, v_max });
        }
        if !(efficiency > 0.0 && efficiency <= 1.0) {
            return Err(CapacitorError::Efficiency(efficiency));
        }
        let energy = |v: f64| joules_to_nj(0.5 * capacitance_f * (v * v - v_min * v_min));
        Ok(Self {
            capacitance_bits: capacitance_f.to_bits(),
            v_min_bits: v_min.to_bits(),
            v_max_bits: v_max.to_bits(),
            efficiency_bits: efficiency.to_bits(),
            stored_nj: energy(v_now),
            max_nj: energy(v_max),
        })
    }

    pub fn from_config(cfg: &CapacitorConfig) -> Result<Self, CapacitorError> {
        Self::new(cfg.capacitance_f, cfg.v_init, cfg.v_min, cfg.v_max, cfg.efficiency)
    }

    pub fn capacitance(&self) -> f64 {
        f64::from_bits(self.capacitance_bits)
    }

    pub fn v_min(&self) -> f64 {
        f64::from_bits(self.v_min_bits)
    }

    pub fn v_max(&self) -> f64 {
        f64::from_bits(self.v_max_bits)
    }

    pub fn efficiency(&self) -> f64 {
        f64::from_bits(self.efficiency_bits)
    }

    pub fn v_now(&self) -> f64 {
        let c = self.capacitance();
        let v_min = self.v_min();
        if c == 0.0 {
            return v_min;
        }
        let e = self.stored_nj as f64 * 1e-9;
        (v_min * v_min + 2.0 * e / c).sqrt().min(self.v_max())
    }

    pub fn stored_nj(&self) -> u64 {
        self.stored_nj
    }

    pub fn max_nj(&self) -> u64 {
        self.max_nj
    }

    /// Returns the same capacitor holding `stored_nj` (clamped to capacity).
    pub fn with_stored_nj(mut self, stored_nj: u64) -> Self {
        self.stored_nj = stored_nj.min(self.max_nj);
        self
    }

    /// Advances by `dt` seconds starting at trace time `t`: credits harvested
    /// energy (times efficiency, clamped to capacity) then debits `draw_nj`.
    /// A draw larger than what is available delivers nothing and drains the
    /// capacitor to `v_min`.
    pub fn step(&self, trace: &EnergyTrace, t: f64, dt: f64, draw_nj: u64) -> StepOutcome {
        let harvested_nj = uj_to_nj(trace.energy_between_uj(t, dt.max(0.0)) * self.efficiency());
        let gross = self.stored_nj.saturating_add(harvested_nj);
        let available = gross.min(self.max_nj);
        let spilled_nj = gross - available;
        let mut next = *self;
        if draw_nj <= available {
            next.stored_nj = available - draw_nj;
            StepOutcome { state: next, brownout: false, harvested_nj, spilled_nj, delivered_nj: draw_nj, drained_nj: 0 }
        } else {
            next.stored_nj = 0;
            StepOutcome { state: next, brownout: true, harvested_nj, spilled_nj, delivered_nj: 0, drained_nj: available }
        }
    }
}

pub fn usable_energy(state: &CapacitorState) -> f64 {
    nj_to_uj(state.stored_nj)
}

impl fmt::Display for CapacitorState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.3} V ({:.3} uJ usable)", self.v_now(), usable_energy(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepOutcome {
    pub state: CapacitorState,
    pub brownout: bool,
    pub harvested_nj: u64,
    pub spilled_nj: u64,
    pub delivered_nj: u64,
    pub drained_nj: u64,
}

/// Running totals for one simulation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergyLedger {
    pub initial_nj: u64,
    pub harvested_nj: u64,
    pub spilled_nj: u64,
    pub delivered_nj: u64,
    pub drained_nj: u64,
}

impl EnergyLedger {
    pub fn record(&mut self, o: &StepOutcome) {
        self.harvested_nj += o.harvested_nj;
        self.spilled_nj += o.spilled_nj;
        self.delivered_nj += o.delivered_nj;
        self.drained_nj += o.drained_nj;
    }

    /// Energy that left the capacitor through loads (delivered plus brownout drain).
    pub fn debited_nj(&self) -> u64 {
        self.delivered_nj + self.drained_nj
    }

    /// Exact balance check against a final stored amount.
    pub fn balances(&self, final_stored_nj: u64) -> bool {
        let inflow = self.initial_nj as u128 + self.harvested_nj as u128;
        let outflow = self.spilled_nj as u128 + self.delivered_nj as u128 + self.drained_nj as u128;
        inflow == outflow + final_stored_nj as u128
    }
}

/// A capacitor being driven by a trace, with a clock and ledger.
#[derive(Debug, Clone)]
pub struct EnergySim<'a> {
    trace: &'a EnergyTrace,
    cap: CapacitorState,
    now_s: f64,
    ledger: EnergyLedger,
}

impl<'a> EnergySim<'a> {
    pub fn new(trace: &'a EnergyTrace, cap: CapacitorState, start_s: f64) -> Self {
        let ledger = EnergyLedger { initial_nj: cap.stored_nj(), ..Default::default() };
        Self { trace, cap, now_s: start_s, ledger }
    }

    pub fn trace(&self) -> &EnergyTrace {
        self.trace
    }

    pub fn capacitor(&self) -> &CapacitorState {
        &self.cap
    }

    pub fn now(&self) -> f64 {
        self.now_s
    }

    pub fn stored_nj(&self) -> u64 {
        self.cap.stored_nj()
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.ledger
    }

    pub fn balanced(&self) -> bool {
        self.ledger.balances(self.cap.stored_nj())
    }

    pub fn advance(&mut self, dt: f64, draw_nj: u64) -> StepOutcome {
        let out = self.cap.step(self.trace, self.now_s, dt, draw_nj);
        self.ledger.record(&out);
        self.cap = out.state;
        self.now_s += dt.max(0.0);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cap(v: f64) -> CapacitorState {
        CapacitorState::new(100e-6, v, 1.8, 3.6, 1.0).unwrap()
    }

    #[test]
    fn parses_two_rows() {
        let t = EnergyTrace::from_csv_str("t_s,power_uW\n0.0,100\n0.1,100\n", SourceKind::Synthetic).unwrap();
        assert_eq!(t.samples().len(), 2);
        assert!((t.sample_interval() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_zero_row_is_valid() {
        let t = EnergyTrace::from_csv_str("t_s,power_uW\n0.0,0\n", SourceKind::Synthetic).unwrap();
        assert_eq!(t.samples().len(), 1);
        assert_eq!(t.power_at(5.0), 0.0);
    }

    #[test]
    fn rejects_backwards_time() {
        let err = EnergyTrace::from_csv_str("t_s,power_uW\n0.1,5\n0.0,5\n", SourceKind::Synthetic).unwrap_err();
        assert!(matches!(err, TraceError::NonMonotonicTime { line: 3, .. }));
    }

    #[test]
    fn rejects_empty_and_garbage() {
        assert!(matches!(
            EnergyTrace::from_csv_str("t_s,power_uW\n", SourceKind::Synthetic),
            Err(TraceError::EmptyTrace)
        ));
        assert!(matches!(
            EnergyTrace::from_csv_str("t_s,power_uW\n0.0,abc\n", SourceKind::Synthetic),
            Err(TraceError::Parse { line: 2, .. })
        ));
        assert!(matches!(
            EnergyTrace::from_csv_str("0.0,1,2\n", SourceKind::Synthetic),
            Err(TraceError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn zero_order_hold_integration() {
        let t = EnergyTrace::from_csv_str("0,10\n1,20\n2,0\n", SourceKind::Synthetic).unwrap();
        assert_eq!(t.power_at(0.5), 10.0);
        assert_eq!(t.power_at(1.0), 20.0);
        // 0.5 s at 10 uW + 1 s at 20 uW + 0.5 s at 0
        assert!((t.energy_between_uj(0.5, 2.0) - 25.0).abs() < 1e-12);
    }

    #[test]
    fn usable_energy_reference_values() {
        assert!((usable_energy(&cap(3.3)) - 382.5).abs() < 1e-9);
        assert_eq!(usable_energy(&cap(1.8)), 0.0);
        let zero_c = CapacitorState::new(0.0, 3.3, 1.8, 3.6, 1.0).unwrap();
        assert_eq!(usable_energy(&zero_c), 0.0);
    }

    #[test]
    fn usable_energy_monotone_in_voltage() {
        let mut prev = 0.0;
        for i in 0..=180 {
            let v = 1.8 + i as f64 * 0.01;
            let e = usable_energy(&cap(v.min(3.6)));
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn step_harvest_then_draw() {
        let trace = EnergyTrace::constant(100.0, 10.0, 0.1);
        let out = cap(3.3).step(&trace, 0.0, 0.1, 20_000);
        assert!(!out.brownout);
        assert_eq!(out.state.stored_nj(), 372_500);
        assert!((out.state.v_now() - (1.8f64.powi(2) + 2.0 * 372.5e-6 / 100e-6).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn step_overdraw_browns_out() {
        let trace = EnergyTrace::constant(0.0, 1.0, 0.1);
        let s = cap(3.3).with_stored_nj(5_000);
        let out = s.step(&trace, 0.0, 0.1, 20_000);
        assert!(out.brownout);
        assert_eq!(out.state.stored_nj(), 0);
        assert_eq!(out.state.v_now(), 1.8);
        assert_eq!(out.delivered_nj, 0);
        assert_eq!(out.drained_nj, 5_000);
    }

    #[test]
    fn step_identity_without_flow() {
        let trace = EnergyTrace::constant(0.0, 1.0, 0.1);
        let s = cap(2.7);
        let out = s.step(&trace, 0.3, 0.1, 0);
        assert_eq!(out.state, s);
        assert!(!out.brownout);
    }

    #[test]
    fn full_capacitor_spills() {
        let trace = EnergyTrace::constant(1e6, 1.0, 0.1);
        let s = cap(3.6);
        let out = s.step(&trace, 0.0, 0.1, 0);
        assert_eq!(out.state.stored_nj(), s.max_nj());
        assert_eq!(out.spilled_nj, out.harvested_nj);
    }

    #[test]
    fn invalid_states_rejected() {
        assert!(CapacitorState::new(1e-4, 1.0, 1.8, 3.6, 1.0).is_err());
        assert!(CapacitorState::new(-1.0, 2.0, 1.8, 3.6, 1.0).is_err());
        assert!(CapacitorState::new(1e-4, 2.0, 1.8, 3.6, 0.0).is_err());
        assert!(CapacitorState::new(1e-4, 2.0, 1.8, 3.6, 1.5).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = EnergyTrace::bursty(7, BurstShape { duration_s: 1.0, ..Default::default() });
        let back = EnergyTrace::from_csv_str(&t.to_csv_string(), SourceKind::Piezo).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn replay_is_bit_identical() {
        let trace = EnergyTrace::bursty(3, BurstShape::default());
        let run = || {
            let mut sim = EnergySim::new(&trace, cap(2.5), 0.0);
            (0..500).map(|i| sim.advance(0.013, (i % 7) * 900).state).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
