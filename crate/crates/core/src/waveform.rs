//! Three-phase secondary-side waveform source with step faults.

use std::f64::consts::PI;
use std::io::{self, Write};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WaveformError {
    #[error("rms of an empty window")]
    EmptyWindow,
    #[error("invalid parameter {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> WaveformError {
    WaveformError::Invalid {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct SystemParams {
    /// Hz.
    pub frequency: f64,
    /// Phase-to-ground peak, V secondary.
    pub nominal_voltage_peak: f64,
    /// A secondary peak.
    pub nominal_current_peak: f64,
    pub ct_ratio: f64,
    pub vt_ratio: f64,
    /// Samples per second.
    pub sample_rate: u32,
}

impl Default for SystemParams {
    fn default() -> Self {
        SystemParams {
            frequency: 50.0,
            nominal_voltage_peak: 83.0,
            nominal_current_peak: 0.370,
            ct_ratio: 600.0,
            vt_ratio: 100.0,
            sample_rate: 4000,
        }
    }
}

impl SystemParams {
    pub fn validate(&self) -> Result<(), WaveformError> {
        for (field, v) in [
            ("frequency", self.frequency),
            ("nominal_voltage_peak", self.nominal_voltage_peak),
            ("nominal_current_peak", self.nominal_current_peak),
            ("ct_ratio", self.ct_ratio),
            ("vt_ratio", self.vt_ratio),
            ("sample_rate", self.sample_rate as f64),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, format!("must be strictly positive, got {v}")));
            }
        }
        let per_cycle = self.sample_rate as f64 / self.frequency;
        if (per_cycle - per_cycle.round()).abs() > 1e-9 {
            return Err(invalid(
                "sample_rate",
                format!("{} Hz is not a multiple of {} Hz", self.sample_rate, self.frequency),
            ));
        }
        Ok(())
    }

    pub fn samples_per_cycle(&self) -> usize {
        (self.sample_rate as f64 / self.frequency).round() as usize
    }

    /// Time of sample `k`, computed without accumulating rounding error.
    pub fn sample_time(&self, k: u64) -> f64 {
        k as f64 / self.sample_rate as f64
    }

    pub fn sample_period_us(&self) -> u64 {
        1_000_000 / self.sample_rate as u64
    }

    pub fn primary_current(&self, secondary: f64) -> f64 {
        secondary * self.ct_ratio
    }

    pub fn primary_voltage(&self, secondary: f64) -> f64 {
        secondary * self.vt_ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    None,
    ThreePhase,
    SingleLineGround,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Seconds.
    pub onset: f64,
    /// Seconds; `None` keeps the fault until the end of the run.
    pub clear: Option<f64>,
    /// Ohms, informational.
    pub fault_resistance: f64,
    /// A secondary peak.
    pub fault_current_peak: f64,
    /// V secondary peak.
    pub fault_voltage_peak: f64,
    pub faulted_phase: Phase,
    /// Time constant of the decaying DC offset in seconds; off when `None`.
    pub dc_offset_tau: Option<f64>,
}

impl Default for FaultSpec {
    fn default() -> Self {
        FaultSpec {
            kind: FaultKind::None,
            onset: 0.0,
            clear: None,
            fault_resistance: 0.1,
            fault_current_peak: 22.0,
            fault_voltage_peak: 5.0,
            faulted_phase: Phase::A,
            dc_offset_tau: None,
        }
    }
}

impl FaultSpec {
    pub fn none() -> Self {
        FaultSpec::default()
    }

    pub fn three_phase(onset: f64) -> Self {
        FaultSpec {
            kind: FaultKind::ThreePhase,
            onset,
            ..FaultSpec::default()
        }
    }

    pub fn single_line_ground(onset: f64, phase: Phase) -> Self {
        FaultSpec {
            kind: FaultKind::SingleLineGround,
            onset,
            faulted_phase: phase,
            ..FaultSpec::default()
        }
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.kind != FaultKind::None && t >= self.onset && self.clear.is_none_or(|c| t < c)
    }

    pub fn affects(&self, phase: usize) -> bool {
        match self.kind {
            FaultKind::None => false,
            FaultKind::ThreePhase => true,
            FaultKind::SingleLineGround => phase == self.faulted_phase.index(),
        }
    }

    pub fn validate(&self, params: &SystemParams) -> Result<(), WaveformError> {
        if self.kind == FaultKind::None {
            return Ok(());
        }
        if !(self.onset.is_finite() && self.onset >= 0.0) {
            return Err(invalid("onset", "must be a non-negative time"));
        }
        if let Some(clear) = self.clear {
            if !(clear > self.onset) {
                return Err(invalid("clear", format!("{clear} is not after onset {}", self.onset)));
            }
        }
        if !(self.fault_resistance > 0.0) {
            return Err(invalid("fault_resistance", "must be strictly positive"));
        }
        if !(self.fault_current_peak > params.nominal_current_peak) {
            return Err(invalid(
                "fault_current_peak",
                "must exceed the nominal current peak",
            ));
        }
        if !(self.fault_voltage_peak >= 0.0 && self.fault_voltage_peak < params.nominal_voltage_peak) {
            return Err(invalid(
                "fault_voltage_peak",
                "must be below the nominal voltage peak",
            ));
        }
        if let Some(tau) = self.dc_offset_tau {
            if !(tau > 0.0) {
                return Err(invalid("dc_offset_tau", "must be strictly positive"));
            }
        }
        Ok(())
    }
}

/// Instantaneous secondary quantities, phases ordered A, B, C.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AnalogSample {
    pub t: f64,
    pub i: [f64; 3],
    pub v: [f64; 3],
}

fn phase_angle(params: &SystemParams, t: f64, phase: usize) -> f64 {
    2.0 * PI * params.frequency * t - phase as f64 * 2.0 * PI / 3.0
}

/// Evaluates the source at time `t` (seconds).
///
/// Phase X uses angle `2πft − X·120°`. While the fault is active the affected
/// phases switch amplitude without resetting the angle.
pub fn sample(params: &SystemParams, fault: &FaultSpec, t: f64) -> AnalogSample {
    let mut out = AnalogSample {
        t,
        i: [0.0; 3],
        v: [0.0; 3],
    };
    let active = fault.is_active(t);
    for p in 0..3 {
        let s = phase_angle(params, t, p).sin();
        if active && fault.affects(p) {
            let mut i = fault.fault_current_peak * s;
            if let Some(tau) = fault.dc_offset_tau {
                // Offset chosen so the current is continuous at onset.
                let s0 = phase_angle(params, fault.onset, p).sin();
                let a = (params.nominal_current_peak - fault.fault_current_peak) * s0;
                i += a * (-(t - fault.onset) / tau).exp();
            }
            out.i[p] = i;
            out.v[p] = fault.fault_voltage_peak * s;
        } else {
            out.i[p] = params.nominal_current_peak * s;
            out.v[p] = params.nominal_voltage_peak * s;
        }
    }
    out
}

pub fn rms(window: &[f64]) -> Result<f64, WaveformError> {
    if window.is_empty() {
        return Err(WaveformError::EmptyWindow);
    }
    let sum_sq: f64 = window.iter().map(|x| x * x).sum();
    Ok((sum_sq / window.len() as f64).sqrt())
}

/// Writes `t,ia,ib,ic,va,vb,vc` rows.
pub fn write_csv<W: Write>(mut out: W, samples: &[AnalogSample]) -> io::Result<()> {
    writeln!(out, "t,ia,ib,ic,va,vb,vc")?;
    for s in samples {
        writeln!(
            out,
            "{:.6},{},{},{},{},{},{}",
            s.t, s.i[0], s.i[1], s.i[2], s.v[0], s.v[1], s.v[2]
        )?;
    }
    Ok(())
}
