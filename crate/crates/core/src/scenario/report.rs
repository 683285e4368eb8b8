//! Expectation checks, run reports and on-disk artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use super::runner::{run, RunResult};
use super::{Expectation, Mode, ScenarioConfig, ScenarioError};
use crate::attack_engine::secs_to_us;
use crate::fabric::{pcap, Micros};
use crate::relay::{RelayEventKind, TripPath};
use crate::sv_codec::{self, ScaleConvention};
use crate::waveform;

const EVENTS_FILE: &str = "events.jsonl";
const ATTACK_FILE: &str = "attack.jsonl";
const PCAP_FILE: &str = "capture.pcap";
const MU_CSV: &str = "mu.csv";
const RELAY_CSV: &str = "relay.csv";
const REPORT_FILE: &str = "report.json";
const SUITE_FILE: &str = "suite.json";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationResult {
    pub expectation: Expectation,
    pub passed: bool,
    pub observed: usize,
    pub first_at: Option<f64>,
    pub message: String,
}

/// Times in seconds, latencies in the unit named by the field.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TimingSummary {
    pub attack_start: Option<f64>,
    pub fault_onset: Option<f64>,
    pub first_trip: Option<f64>,
    pub trip_path: Option<TripPath>,
    pub trip_latency_from_attack_ms: Option<f64>,
    pub trip_latency_from_fault_ms: Option<f64>,
    pub first_injection: Option<f64>,
    pub first_block: Option<f64>,
    pub block_latency_us: Option<u64>,
    pub last_gm_sync: Option<f64>,
    pub sync_none_at: Option<f64>,
    pub sync_loss_latency_ms: Option<f64>,
    pub fault_cleared_at: Option<f64>,
}

/// Artifact file names, relative to the run's output directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifacts {
    pub events: String,
    pub attack_log: Option<String>,
    pub pcap: String,
    pub mu_csv: String,
    pub relay_csv: String,
    pub report: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub mode: Mode,
    pub attack: String,
    pub seed: u64,
    pub duration: f64,
    pub passed: bool,
    pub expectations: Vec<ExpectationResult>,
    pub event_counts: BTreeMap<String, usize>,
    pub timing: TimingSummary,
    pub relay_frames: u64,
    pub undecodable_frames: u64,
    pub conflicting_frames: u64,
    pub artifacts: Artifacts,
}

fn secs(t: Micros) -> f64 {
    t as f64 / 1e6
}

fn ms_between(later: Micros, earlier: Micros) -> Option<f64> {
    (later >= earlier).then(|| (later - earlier) as f64 / 1e3)
}

fn check(e: &Expectation, result: &RunResult) -> ExpectationResult {
    let start = secs_to_us(e.window_start.unwrap_or(0.0));
    let end = secs_to_us(e.deadline.unwrap_or(result.config.duration));
    let hits: Vec<Micros> = result
        .relay_events
        .iter()
        .filter(|ev| ev.kind == e.event && ev.t >= start && ev.t <= end)
        .map(|ev| ev.t)
        .collect();
    let n = hits.len();
    let span = format!("[{:.6}, {:.6}] s", secs(start), secs(end));
    let (passed, message) = match (e.occur, e.count) {
        (false, _) => (n == 0, format!("{n} {} in {span}, expected none", e.event.as_str())),
        (true, Some(c)) => (n == c, format!("{n} {} in {span}, expected exactly {c}", e.event.as_str())),
        (true, None) => (n > 0, format!("{n} {} in {span}, expected at least one", e.event.as_str())),
    };
    ExpectationResult {
        expectation: e.clone(),
        passed,
        observed: n,
        first_at: hits.first().map(|t| secs(*t)),
        message,
    }
}

fn attack_file(config: &ScenarioConfig) -> Option<String> {
    (config.attack.name() != "none")
        .then(|| config.attack.log_path().unwrap_or(ATTACK_FILE).to_owned())
}

/// Checks expectations and summarises a finished run.
pub fn evaluate(result: &RunResult) -> RunReport {
    let cfg = &result.config;
    let expectations: Vec<_> = cfg.expectations.iter().map(|e| check(e, result)).collect();
    let mut event_counts = BTreeMap::new();
    for ev in &result.relay_events {
        *event_counts.entry(ev.kind.as_str().to_owned()).or_insert(0) += 1;
    }
    let p = &result.probes;
    let fault_onset = cfg.fault_onset().map(secs_to_us);
    let trip_t = result.trip.map(|r| r.t);
    let first_block = result
        .relay_events
        .iter()
        .find(|e| e.kind == RelayEventKind::Block)
        .map(|e| e.t);
    let timing = TimingSummary {
        attack_start: p.attack_start.map(secs),
        fault_onset: fault_onset.map(secs),
        first_trip: trip_t.map(secs),
        trip_path: result.trip.map(|r| r.path),
        trip_latency_from_attack_ms: trip_t.zip(p.attack_start).and_then(|(t, a)| ms_between(t, a)),
        trip_latency_from_fault_ms: trip_t.zip(fault_onset).and_then(|(t, f)| ms_between(t, f)),
        first_injection: p.first_injection.map(secs),
        first_block: first_block.map(secs),
        block_latency_us: first_block
            .zip(p.first_injection)
            .and_then(|(b, i)| b.checked_sub(i)),
        last_gm_sync: p.last_gm_sync_at_mu.map(secs),
        sync_none_at: p.sync_none_at.map(secs),
        sync_loss_latency_ms: p
            .sync_none_at
            .zip(p.last_gm_sync_at_mu)
            .and_then(|(n, l)| ms_between(n, l)),
        fault_cleared_at: p.fault_cleared_at.map(secs),
    };
    RunReport {
        scenario: cfg.name.clone(),
        mode: cfg.mode(),
        attack: cfg.attack.name().to_owned(),
        seed: cfg.seed,
        duration: cfg.duration,
        passed: expectations.iter().all(|e| e.passed),
        expectations,
        event_counts,
        timing,
        relay_frames: result.relay_stats.frames,
        undecodable_frames: result.relay_stats.undecodable,
        conflicting_frames: result.relay_stats.conflicts,
        artifacts: Artifacts {
            events: EVENTS_FILE.into(),
            attack_log: attack_file(cfg),
            pcap: PCAP_FILE.into(),
            mu_csv: MU_CSV.into(),
            relay_csv: RELAY_CSV.into(),
            report: REPORT_FILE.into(),
        },
    }
}

fn write_jsonl<T: Serialize, W: Write>(mut out: W, items: &[T]) -> std::io::Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Relay-side view: every SV frame delivered to the relay, dequantised.
pub fn write_relay_csv<W: Write>(mut out: W, records: &[pcap::PcapRecord]) -> std::io::Result<()> {
    let conv = ScaleConvention::default();
    writeln!(out, "t,smp_cnt,smp_synch,ia,ib,ic,in,va,vb,vc,vn")?;
    for r in records {
        let Ok(f) = sv_codec::decode(&r.data) else {
            continue;
        };
        let d = conv.dequantize_all(&f.asdu.values());
        write!(out, "{:.6},{},{:?}", secs(r.timestamp_us), f.asdu.smp_cnt, f.asdu.smp_synch)?;
        for v in d {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, ScenarioError> {
    let path = dir.join(name);
    File::create(&path)
        .map(BufWriter::new)
        .map_err(|e| ScenarioError::io(&path, e))
}

/// Which artifact families [`export_formats`] writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExportFormats {
    pub pcap: bool,
    pub csv: bool,
    pub jsonl: bool,
}

impl ExportFormats {
    pub const ALL: ExportFormats = ExportFormats {
        pcap: true,
        csv: true,
        jsonl: true,
    };
}

/// Writes the event log, attack log, PCAP, both CSV views and the report.
pub fn export(result: &RunResult, out_dir: &Path) -> Result<RunReport, ScenarioError> {
    export_formats(result, out_dir, ExportFormats::ALL)
}

/// Writes the selected artifacts plus `report.json`.
pub fn export_formats(
    result: &RunResult,
    out_dir: &Path,
    formats: ExportFormats,
) -> Result<RunReport, ScenarioError> {
    fs::create_dir_all(out_dir).map_err(|e| ScenarioError::io(out_dir, e))?;
    let report = evaluate(result);
    let io = |name: &str| {
        let path = out_dir.join(name);
        move |e| ScenarioError::io(&path, e)
    };
    if formats.jsonl {
        write_jsonl(create(out_dir, EVENTS_FILE)?, &result.events).map_err(io(EVENTS_FILE))?;
        if let Some(name) = &report.artifacts.attack_log {
            write_jsonl(create(out_dir, name)?, &result.attack_log).map_err(io(name))?;
        }
    }
    if formats.pcap {
        pcap::write_all(create(out_dir, PCAP_FILE)?, &result.capture).map_err(io(PCAP_FILE))?;
    }
    if formats.csv {
        waveform::write_csv(create(out_dir, MU_CSV)?, &result.mu_samples).map_err(io(MU_CSV))?;
        write_relay_csv(create(out_dir, RELAY_CSV)?, &result.capture).map_err(io(RELAY_CSV))?;
    }
    write_json(out_dir, REPORT_FILE, &report)?;
    Ok(report)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), ScenarioError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(std::io::Error::from)
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|e| ScenarioError::io(&dir.join(name), e))
}

pub fn run_to_dir(config: &ScenarioConfig, out_dir: &Path) -> Result<RunReport, ScenarioError> {
    let result = run(config)?;
    export(&result, out_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub total: usize,
    pub passed: usize,
    pub failed: usize,
    pub all_passed: bool,
    pub scenarios: Vec<SuiteEntry>,
}

/// Runs every `*.json` config directly inside `dir`, in file-name order.
/// Each run writes into `out_dir/<file stem>/`.
pub fn run_suite(
    dir: &Path,
    out_dir: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
) -> Result<SuiteReport, ScenarioError> {
    let entries = fs::read_dir(dir).map_err(|e| ScenarioError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| ScenarioError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(ScenarioError::EmptySuite(dir.to_owned()));
    }
    let mut configs = Vec::with_capacity(files.len());
    for path in &files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        configs.push((stem, ScenarioConfig::load(path)?));
    }
    run_suite_configs(configs, out_dir, mode, seed)
}

/// Runs named configs in the given order; each writes into `out_dir/<name>/`.
/// Every config is validated before the first one runs.
pub fn run_suite_configs(
    configs: Vec<(String, ScenarioConfig)>,
    out_dir: &Path,
    mode: Option<Mode>,
    seed: Option<u64>,
) -> Result<SuiteReport, ScenarioError> {
    if configs.is_empty() {
        return Err(ScenarioError::EmptySuite(out_dir.to_owned()));
    }
    let mut prepared = Vec::with_capacity(configs.len());
    for (name, mut cfg) in configs {
        if let Some(m) = mode {
            cfg = cfg.with_mode(m);
        }
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        cfg.validate()?;
        prepared.push((name, cfg));
    }
    let mut scenarios = Vec::with_capacity(prepared.len());
    for (name, cfg) in &prepared {
        let report = run_to_dir(cfg, &out_dir.join(name))?;
        scenarios.push(SuiteEntry {
            name: name.clone(),
            report,
        });
    }
    let passed = scenarios.iter().filter(|s| s.report.passed).count();
    let suite = SuiteReport {
        total: scenarios.len(),
        passed,
        failed: scenarios.len() - passed,
        all_passed: passed == scenarios.len(),
        scenarios,
    };
    write_json(out_dir, SUITE_FILE, &suite)?;
    Ok(suite)
}
