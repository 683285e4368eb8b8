//! Declarative scenarios: configuration, validation and bundled documents.

mod report;
mod runner;

use std::fmt;
use std::path::{Path, PathBuf};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack_engine::{
    AttackWindow, ForceParams, MasqueradeParams, PtpAttackParams, ReplayParams,
};
use crate::fabric::Micros;
use crate::merging_unit::MuConfig;
use crate::ptp_sync::GmConfig;
use crate::relay::{RelayEventKind, RelaySettings};
use crate::waveform::{FaultKind, FaultSpec, SystemParams};

pub use report::{
    evaluate, export, export_formats, run_suite, run_suite_configs, run_to_dir, write_relay_csv,
    Artifacts, ExportFormats, ExpectationResult, RunReport, SuiteEntry, SuiteReport, TimingSummary,
};
pub use runner::{run, LogEntry, RunResult};

/// Longest accepted run, seconds of virtual time.
pub const MAX_DURATION: f64 = 600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Resilience,
}

impl Mode {
    pub fn of(relay: &RelaySettings) -> Self {
        if relay.resilience_mode {
            Mode::Resilience
        } else {
            Mode::Baseline
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Baseline => "baseline",
            Mode::Resilience => "resilience",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "resilience" => Ok(Mode::Resilience),
            other => Err(format!("unknown mode `{other}` (expected baseline or resilience)")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    #[default]
    None,
    Force {
        #[serde(default)]
        window: AttackWindow,
        #[serde(default)]
        params: ForceParams,
    },
    Masquerade {
        #[serde(default)]
        window: AttackWindow,
        #[serde(default)]
        params: MasqueradeParams,
    },
    Replay {
        #[serde(default)]
        window: AttackWindow,
        #[serde(default)]
        params: ReplayParams,
    },
    Ptp {
        #[serde(default)]
        window: AttackWindow,
        #[serde(default)]
        params: PtpAttackParams,
    },
}

impl AttackSpec {
    pub fn name(&self) -> &'static str {
        match self {
            AttackSpec::None => "none",
            AttackSpec::Force { .. } => "force",
            AttackSpec::Masquerade { .. } => "masquerade",
            AttackSpec::Replay { .. } => "replay",
            AttackSpec::Ptp { .. } => "ptp",
        }
    }

    pub fn window(&self) -> Option<&AttackWindow> {
        match self {
            AttackSpec::None => None,
            AttackSpec::Force { window, .. }
            | AttackSpec::Masquerade { window, .. }
            | AttackSpec::Replay { window, .. }
            | AttackSpec::Ptp { window, .. } => Some(window),
        }
    }

    pub fn log_path(&self) -> Option<&str> {
        match self {
            AttackSpec::None => None,
            AttackSpec::Force { params, .. } => params.log_path.as_deref(),
            AttackSpec::Masquerade { params, .. } => params.log_path.as_deref(),
            AttackSpec::Replay { params, .. } => params.log_path.as_deref(),
            AttackSpec::Ptp { params, .. } => params.log_path.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PtpSetup {
    pub enabled: bool,
    pub grandmaster_id: u64,
    pub grandmaster_priority: u8,
    pub grandmaster: GmConfig,
    /// Missed sync intervals before a client declares itself unsynchronised.
    pub timeout_multiplier: u32,
}

impl Default for PtpSetup {
    fn default() -> Self {
        PtpSetup {
            enabled: true,
            grandmaster_id: 0x0000_00FF_FE00_0001,
            grandmaster_priority: 128,
            grandmaster: GmConfig::default(),
            timeout_multiplier: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub link_latency_us: Micros,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        NetworkSettings { link_latency_us: 5 }
    }
}

/// A machine-checkable statement about relay events. Times are seconds;
/// unset bounds default to the start and end of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub event: RelayEventKind,
    pub occur: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deadline: Option<f64>,
    /// Exact number of matching events; only meaningful with `occur`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub system: SystemParams,
    #[serde(default)]
    pub fault: FaultSpec,
    #[serde(default)]
    pub attack: AttackSpec,
    #[serde(default)]
    pub relay: RelaySettings,
    #[serde(default)]
    pub merging_unit: MuConfig,
    #[serde(default)]
    pub ptp: PtpSetup,
    #[serde(default)]
    pub network: NetworkSettings,
    /// A trip clears the fault at both line ends.
    #[serde(default = "default_true")]
    pub closed_loop: bool,
    /// Seconds of virtual time.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub expectations: Vec<Expectation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Issue {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationError {
    pub scenario: String,
    pub issues: Vec<Issue>,
}

impl fmt::Display for ValidationError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scenario `{}` is invalid:", self.scenario)?;
        for i in &self.issues {
            write!(f, "\n  {}: {}", i.field, i.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationError {}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("no scenario configs in {0}")]
    EmptySuite(PathBuf),
    #[error("unknown bundled scenario `{0}`")]
    UnknownBundled(String),
}

impl ScenarioError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ScenarioError::Io {
            path: path.to_owned(),
            source,
        }
    }
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::io(path, e))?;
        Self::from_json(&text).map_err(|source| ScenarioError::Parse {
            path: path.to_owned(),
            source,
        })
    }

    pub fn mode(&self) -> Mode {
        Mode::of(&self.relay)
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.relay.resilience_mode = mode == Mode::Resilience;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn duration_us(&self) -> Micros {
        (self.duration * 1e6).round() as Micros
    }

    pub fn fault_onset(&self) -> Option<f64> {
        (self.fault.kind != FaultKind::None).then_some(self.fault.onset)
    }

    pub fn validate(&self) -> Result<(), ValidationError> {
        let mut issues: Vec<(String, String)> = Vec::new();
        if self.name.trim().is_empty() {
            issues.push(("name".into(), "must not be empty".into()));
        }
        if !(self.duration > 0.0 && self.duration <= MAX_DURATION) {
            issues.push(("duration".into(), format!("must be in (0, {MAX_DURATION}] seconds")));
        }
        if let Err(e) = self.system.validate() {
            issues.push(("system".into(), e.to_string()));
        }
        if let Err(e) = self.fault.validate(&self.system) {
            issues.push(("fault".into(), e.to_string()));
        }
        if let Some(onset) = self.fault_onset() {
            if !(self.duration > onset) {
                issues.push(("fault.onset".into(), format!("{onset} s is not before the end of the run")));
            }
        }
        issues.extend(self.relay.validate(&self.system));
        if let Err(e) = self.merging_unit.validate(&self.system) {
            issues.push(("merging_unit".into(), e.to_string()));
        }
        if self.merging_unit.sv_id != self.relay.subscribed_sv_id {
            issues.push((
                "relay.subscribed_sv_id".into(),
                format!("does not match merging_unit.sv_id `{}`", self.merging_unit.sv_id),
            ));
        }
        if let Err(e) = self.ptp.grandmaster.validate() {
            issues.push(("ptp.grandmaster".into(), e));
        }
        if self.ptp.timeout_multiplier == 0 {
            issues.push(("ptp.timeout_multiplier".into(), "must be at least 1".into()));
        }
        if let Some(w) = self.attack.window() {
            issues.extend(w.validate());
            if !(self.duration > w.start) {
                issues.push(("attack.window.start".into(), format!("{} s is not before the end of the run", w.start)));
            }
        }
        match &self.attack {
            AttackSpec::None => {}
            AttackSpec::Force { params, .. } => issues.extend(params.validate()),
            AttackSpec::Masquerade { params, .. } => issues.extend(params.validate(&self.system)),
            AttackSpec::Replay { params, .. } => issues.extend(params.validate()),
            AttackSpec::Ptp { params, .. } => {
                if !self.ptp.enabled {
                    issues.push(("attack".into(), "PTP attack needs ptp.enabled".into()));
                }
                issues.extend(params.validate(self.ptp.grandmaster_id));
            }
        }
        if let Some(p) = self.attack.log_path() {
            if Path::new(p).is_absolute() || p.contains("..") {
                issues.push(("attack.params.log_path".into(), "must be a plain relative file name".into()));
            }
        }
        for (k, e) in self.expectations.iter().enumerate() {
            let field = |f: &str| format!("expectations[{k}].{f}");
            let start = e.window_start.unwrap_or(0.0);
            let end = e.deadline.unwrap_or(self.duration);
            if !(start >= 0.0 && start <= self.duration) {
                issues.push((field("window_start"), "must lie within the run".into()));
            }
            if !(end >= start) {
                issues.push((field("deadline"), "must not precede window_start".into()));
            }
            if !e.occur && e.count.is_some_and(|c| c > 0) {
                issues.push((field("count"), "contradicts occur = false".into()));
            }
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(ValidationError {
                scenario: self.name.clone(),
                issues: issues
                    .into_iter()
                    .map(|(field, message)| Issue { field, message })
                    .collect(),
            })
        }
    }
}

/// JSON schema of [`ScenarioConfig`].
pub fn schema() -> schemars::schema::RootSchema {
    schemars::schema_for!(ScenarioConfig)
}

pub fn schema_json() -> String {
    let mut s = serde_json::to_string_pretty(&schema()).expect("schema serialises");
    s.push('\n');
    s
}

/// The canonical attack scenarios, baseline and resilience for each.
pub const BUNDLED: &[(&str, &str)] = &[
    ("scenario1_baseline", include_str!("../../scenarios/scenario1_baseline.json")),
    ("scenario1_resilience", include_str!("../../scenarios/scenario1_resilience.json")),
    ("scenario2_baseline", include_str!("../../scenarios/scenario2_baseline.json")),
    ("scenario2_resilience", include_str!("../../scenarios/scenario2_resilience.json")),
    ("scenario3_baseline", include_str!("../../scenarios/scenario3_baseline.json")),
    ("scenario3_resilience", include_str!("../../scenarios/scenario3_resilience.json")),
    ("scenario4_baseline", include_str!("../../scenarios/scenario4_baseline.json")),
    ("scenario4_resilience", include_str!("../../scenarios/scenario4_resilience.json")),
];

/// Attack-free references, valid in either mode.
pub const REFERENCE: &[(&str, &str)] = &[
    ("reference_nominal", include_str!("../../scenarios/reference/reference_nominal.json")),
    ("reference_three_phase", include_str!("../../scenarios/reference/reference_three_phase.json")),
    ("reference_slg", include_str!("../../scenarios/reference/reference_slg.json")),
];

/// The bundled attack scenarios, in suite order.
pub fn bundled_suite() -> Vec<(String, ScenarioConfig)> {
    BUNDLED
        .iter()
        .map(|(name, _)| ((*name).to_owned(), bundled(name).expect("bundled configs parse")))
        .collect()
}

pub fn bundled(name: &str) -> Result<ScenarioConfig, ScenarioError> {
    let (_, text) = BUNDLED
        .iter()
        .chain(REFERENCE)
        .find(|(n, _)| *n == name)
        .ok_or_else(|| ScenarioError::UnknownBundled(name.to_owned()))?;
    ScenarioConfig::from_json(text).map_err(|source| ScenarioError::Parse {
        path: PathBuf::from(format!("<bundled>/{name}.json")),
        source,
    })
}
