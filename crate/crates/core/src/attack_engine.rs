//! Attacks on the process bus.
//!
//! The two man-in-the-middle attacks are [`TapHandler`]s installed on the
//! MU→relay link. The replay and PTP attacks run on an ordinary switch port:
//! they observe flooded traffic and return frames for the caller to transmit.
//! Every attack writes its parameters and each action into an [`AttackLog`].

use std::cell::RefCell;
use std::collections::VecDeque;
use std::io::{self, Write};
use std::rc::Rc;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::fabric::{Micros, TapHandler, TapOutput};
use crate::ptp_sync::{ClockIdentity, GmConfig, PtpMessage, PtpMsgType};
use crate::sv_codec::{self, QuantityKind, ScaleConvention, SvFrame, CHANNEL_COUNT, PTP_ETHERTYPE, SV_ETHERTYPE};
use crate::waveform::{FaultSpec, SystemParams};

/// When an attack is set up, active and withdrawn, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AttackWindow {
    /// Attacker gains its network position (tap inserted, port attached).
    pub access_at: f64,
    /// Manipulation begins.
    pub start: f64,
    pub stop: Option<f64>,
}

impl Default for AttackWindow {
    fn default() -> Self {
        AttackWindow {
            access_at: 0.0,
            start: 0.5,
            stop: None,
        }
    }
}

impl AttackWindow {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if !(self.access_at >= 0.0) {
            errs.push(("attack.window.access_at".into(), "must be non-negative".into()));
        }
        if !(self.start >= self.access_at) {
            errs.push(("attack.window.start".into(), "must not precede access_at".into()));
        }
        if let Some(stop) = self.stop {
            if !(stop > self.start) {
                errs.push(("attack.window.stop".into(), "must be after start".into()));
            }
        }
        errs
    }

    pub fn access_us(&self) -> Micros {
        secs_to_us(self.access_at)
    }

    pub fn start_us(&self) -> Micros {
        secs_to_us(self.start)
    }

    pub fn stop_us(&self) -> Option<Micros> {
        self.stop.map(secs_to_us)
    }

    pub fn is_active(&self, t: Micros) -> bool {
        t >= self.start_us() && self.stop_us().is_none_or(|s| t < s)
    }
}

pub fn secs_to_us(s: f64) -> Micros {
    (s * 1e6).round() as Micros
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttackRecord {
    pub t: Micros,
    pub attack: &'static str,
    pub action: String,
    pub detail: Value,
}

/// Append-only action log shared between an attack and its owner.
#[derive(Debug, Clone, Default)]
pub struct AttackLog(Rc<RefCell<Vec<AttackRecord>>>);

impl AttackLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, t: Micros, attack: &'static str, action: impl Into<String>, detail: Value) {
        self.0.borrow_mut().push(AttackRecord {
            t,
            attack,
            action: action.into(),
            detail,
        });
    }

    pub fn records(&self) -> Vec<AttackRecord> {
        self.0.borrow().clone()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count(&self, action: &str) -> usize {
        self.0.borrow().iter().filter(|r| r.action == action).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for r in self.0.borrow().iter() {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()
    }
}

/// Selects the SV stream an attack acts on; unset fields match anything.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct StreamTarget {
    pub sv_id: Option<String>,
    pub appid: Option<u16>,
}

impl StreamTarget {
    pub fn matches(&self, frame: &SvFrame) -> bool {
        self.sv_id.as_ref().is_none_or(|id| *id == frame.asdu.sv_id)
            && self.appid.is_none_or(|a| a == frame.appid)
    }
}

fn decode_target(bytes: &[u8], target: &StreamTarget) -> Option<SvFrame> {
    if sv_codec::ethertype_of(bytes) != Some(SV_ETHERTYPE) {
        return None;
    }
    sv_codec::decode(bytes).ok().filter(|f| target.matches(f))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct CountLimits {
    pub min: i32,
    pub max: i32,
}

impl Default for CountLimits {
    fn default() -> Self {
        CountLimits {
            min: i32::MIN,
            max: i32::MAX,
        }
    }
}

/// Forged fault level, secondary peak values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ForgedProfile {
    pub current_peak: f64,
    pub voltage_peak: f64,
}

impl Default for ForgedProfile {
    fn default() -> Self {
        let f = FaultSpec::three_phase(0.0);
        ForgedProfile {
            current_peak: f.fault_current_peak,
            voltage_peak: f.fault_voltage_peak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ForceParams {
    /// Per-channel multipliers in channel order; derived from `profile` when unset.
    pub scale: Option<[f64; CHANNEL_COUNT]>,
    pub profile: ForgedProfile,
    /// Frames over which the multiplier ramps in linearly; 0 applies it at once.
    pub ramp: u32,
    pub limits: CountLimits,
    pub target: StreamTarget,
    pub log_path: Option<String>,
}

impl Default for ForceParams {
    fn default() -> Self {
        ForceParams {
            scale: None,
            profile: ForgedProfile::default(),
            ramp: 4,
            limits: CountLimits::default(),
            target: StreamTarget::default(),
            log_path: None,
        }
    }
}

impl ForceParams {
    pub fn resolved_scale(&self, params: &SystemParams) -> [f64; CHANNEL_COUNT] {
        if let Some(s) = self.scale {
            return s;
        }
        let ki = self.profile.current_peak / params.nominal_current_peak;
        let kv = self.profile.voltage_peak / params.nominal_voltage_peak;
        std::array::from_fn(|c| match ScaleConvention::channel_kind(c) {
            QuantityKind::Current => ki,
            QuantityKind::Voltage => kv,
        })
    }

    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if self.limits.min > self.limits.max {
            errs.push(("attack.params.limits".into(), "min exceeds max".into()));
        }
        if let Some(s) = self.scale {
            if s.iter().any(|k| !k.is_finite()) {
                errs.push(("attack.params.scale".into(), "must be finite".into()));
            }
        } else if !(self.profile.current_peak > 0.0 && self.profile.voltage_peak > 0.0) {
            errs.push(("attack.params.profile".into(), "peaks must be strictly positive".into()));
        }
        errs
    }
}

/// Man-in-the-middle tap that scales the measurements of matching frames.
pub struct ForceTap {
    scale: [f64; CHANNEL_COUNT],
    ramp: u32,
    limits: CountLimits,
    target: StreamTarget,
    window: AttackWindow,
    modified: u64,
    log: AttackLog,
}

impl ForceTap {
    pub fn new(params: &ForceParams, system: &SystemParams, window: AttackWindow, log: AttackLog) -> Self {
        let scale = params.resolved_scale(system);
        log.record(
            window.access_us(),
            "force",
            "params",
            json!({ "scale": scale, "ramp": params.ramp, "limits": params.limits, "target": params.target }),
        );
        ForceTap {
            scale,
            ramp: params.ramp,
            limits: params.limits,
            target: params.target.clone(),
            window,
            modified: 0,
            log,
        }
    }

    fn ramp_factor(&self) -> f64 {
        if self.ramp == 0 {
            1.0
        } else {
            ((self.modified + 1) as f64 / self.ramp as f64).min(1.0)
        }
    }

    pub fn modify(&self, values: &[i32; CHANNEL_COUNT]) -> [i32; CHANNEL_COUNT] {
        let r = self.ramp_factor();
        std::array::from_fn(|c| {
            let k = 1.0 + (self.scale[c] - 1.0) * r;
            let v = (values[c] as f64 * k).round();
            v.clamp(self.limits.min as f64, self.limits.max as f64) as i32
        })
    }
}

impl TapHandler for ForceTap {
    fn on_frame(&mut self, bytes: &[u8], at: Micros) -> Vec<TapOutput> {
        if !self.window.is_active(at) {
            return vec![TapOutput::now(bytes.to_vec())];
        }
        let Some(mut frame) = decode_target(bytes, &self.target) else {
            return vec![TapOutput::now(bytes.to_vec())];
        };
        let forged = self.modify(&frame.asdu.values());
        frame.asdu.set_values(&forged);
        let Ok(out) = sv_codec::encode(&frame) else {
            return vec![TapOutput::now(bytes.to_vec())];
        };
        if self.modified == 0 {
            self.log.record(at, "force", "start", json!({ "smp_cnt": frame.asdu.smp_cnt }));
        }
        self.log.record(
            at,
            "force",
            "modify",
            json!({ "smp_cnt": frame.asdu.smp_cnt, "ia": forged[0], "va": forged[4] }),
        );
        self.modified += 1;
        vec![TapOutput::now(out)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MasqueradeParams {
    /// Substitute while any phase |i| exceeds this, A secondary.
    pub i_max: f64,
    /// Substitute while the three-phase voltage magnitude is below this, V secondary peak.
    pub v_min: f64,
    /// Frames recorded before substitution is possible.
    pub baseline_capacity: usize,
    /// Frames substitution continues after the last threshold crossing.
    pub hold_frames: u32,
    pub target: StreamTarget,
    pub log_path: Option<String>,
}

impl Default for MasqueradeParams {
    fn default() -> Self {
        MasqueradeParams {
            i_max: 1.0,
            v_min: 40.0,
            baseline_capacity: 800,
            hold_frames: 80,
            target: StreamTarget::default(),
            log_path: None,
        }
    }
}

impl MasqueradeParams {
    pub fn validate(&self, system: &SystemParams) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if !(self.i_max > system.nominal_current_peak) {
            errs.push(("attack.params.i_max".into(), "must exceed the nominal current peak".into()));
        }
        if !(self.v_min < system.nominal_voltage_peak && self.v_min >= 0.0) {
            errs.push(("attack.params.v_min".into(), "must lie below the nominal voltage peak".into()));
        }
        if self.baseline_capacity == 0 {
            errs.push(("attack.params.baseline_capacity".into(), "must be at least one frame".into()));
        }
        errs
    }

    /// True when `values` show a disturbance the attack must hide.
    pub fn triggered(&self, values: &[f64; CHANNEL_COUNT]) -> bool {
        let i_peak = values[..3].iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let v_sq: f64 = values[4..7].iter().map(|v| v * v).sum();
        let v_mag = (2.0 / 3.0 * v_sq).sqrt();
        i_peak > self.i_max || v_mag < self.v_min
    }
}

/// Man-in-the-middle tap that records a baseline and replays it over faults.
pub struct MasqueradeTap {
    params: MasqueradeParams,
    window: AttackWindow,
    conv: ScaleConvention,
    baseline: Vec<[i32; CHANNEL_COUNT]>,
    frame_idx: usize,
    hold_left: u32,
    substituting: bool,
    warned: bool,
    log: AttackLog,
}

impl MasqueradeTap {
    pub fn new(params: &MasqueradeParams, window: AttackWindow, log: AttackLog) -> Self {
        log.record(
            window.access_us(),
            "masquerade",
            "params",
            json!({
                "i_max": params.i_max,
                "v_min": params.v_min,
                "baseline_capacity": params.baseline_capacity,
                "hold_frames": params.hold_frames,
                "target": params.target,
            }),
        );
        MasqueradeTap {
            baseline: Vec::with_capacity(params.baseline_capacity),
            params: params.clone(),
            window,
            conv: ScaleConvention::default(),
            frame_idx: 0,
            hold_left: 0,
            substituting: false,
            warned: false,
            log,
        }
    }

    pub fn learned(&self) -> bool {
        self.baseline.len() == self.params.baseline_capacity
    }

    fn set_substituting(&mut self, on: bool, at: Micros, smp_cnt: u16) {
        if on != self.substituting {
            self.substituting = on;
            let action = if on { "substitute_begin" } else { "substitute_end" };
            self.log.record(at, "masquerade", action, json!({ "smp_cnt": smp_cnt }));
        }
    }
}

impl TapHandler for MasqueradeTap {
    fn on_frame(&mut self, bytes: &[u8], at: Micros) -> Vec<TapOutput> {
        let pass = || vec![TapOutput::now(bytes.to_vec())];
        let Some(mut frame) = decode_target(bytes, &self.params.target) else {
            return pass();
        };
        let values = frame.asdu.values();
        let idx = self.frame_idx;
        self.frame_idx += 1;
        let triggered = self.params.triggered(&self.conv.dequantize_all(&values));
        if triggered {
            self.hold_left = self.params.hold_frames;
        } else if !self.learned() {
            self.baseline.push(values);
            if self.learned() {
                self.log.record(at, "masquerade", "learning_complete", json!({ "frames": self.baseline.len() }));
            }
        }
        let demanded = triggered || self.hold_left > 0;
        if !triggered && self.hold_left > 0 {
            self.hold_left -= 1;
        }
        if !demanded || !self.window.is_active(at) {
            self.set_substituting(false, at, frame.asdu.smp_cnt);
            return pass();
        }
        if !self.learned() {
            if !self.warned {
                self.warned = true;
                self.log.record(
                    at,
                    "masquerade",
                    "warning",
                    json!({ "reason": "substitution demanded before learning completed", "recorded": self.baseline.len() }),
                );
            }
            return pass();
        }
        let replacement = self.baseline[idx % self.baseline.len()];
        frame.asdu.set_values(&replacement);
        match sv_codec::encode(&frame) {
            Ok(out) => {
                self.set_substituting(true, at, frame.asdu.smp_cnt);
                self.log.record(
                    at,
                    "masquerade",
                    "substitute",
                    json!({ "smp_cnt": frame.asdu.smp_cnt, "base_idx": idx % self.baseline.len() }),
                );
                vec![TapOutput::now(out)]
            }
            Err(_) => pass(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct ReplayParams {
    /// Bursts per second.
    pub replay_rate: f64,
    /// Frames per burst.
    pub replay_len: usize,
    /// Multiplier applied to the channel values of replayed frames.
    pub payload_scale: f64,
    pub target: StreamTarget,
    pub log_path: Option<String>,
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams {
            replay_rate: 1000.0,
            replay_len: 4,
            payload_scale: 0.5,
            target: StreamTarget::default(),
            log_path: None,
        }
    }
}

impl ReplayParams {
    pub fn validate(&self) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if !(self.replay_rate > 0.0 && self.replay_rate <= 4000.0) {
            errs.push(("attack.params.replay_rate".into(), "must be in (0, 4000] bursts/s".into()));
        }
        if !self.payload_scale.is_finite() {
            errs.push(("attack.params.payload_scale".into(), "must be finite".into()));
        }
        errs
    }

    pub fn trigger_period_us(&self) -> Micros {
        secs_to_us(1.0 / self.replay_rate).max(1)
    }
}

/// Replay attacker on a spare switch port.
pub struct ReplayAgent {
    params: ReplayParams,
    frame_period_us: Micros,
    recent: VecDeque<SvFrame>,
    bursts: u64,
    log: AttackLog,
}

impl ReplayAgent {
    pub fn new(params: &ReplayParams, system: &SystemParams, at: Micros, log: AttackLog) -> Self {
        log.record(
            at,
            "replay",
            "params",
            json!({
                "replay_rate": params.replay_rate,
                "replay_len": params.replay_len,
                "payload_scale": params.payload_scale,
                "target": params.target,
            }),
        );
        ReplayAgent {
            params: params.clone(),
            frame_period_us: system.sample_period_us(),
            recent: VecDeque::with_capacity(params.replay_len),
            bursts: 0,
            log,
        }
    }

    /// Stores a frame seen on the bus.
    pub fn observe(&mut self, bytes: &[u8]) {
        if self.params.replay_len == 0 {
            return;
        }
        if let Some(frame) = decode_target(bytes, &self.params.target) {
            if self.recent.len() == self.params.replay_len {
                self.recent.pop_front();
            }
            self.recent.push_back(frame);
        }
    }

    /// Frames for one burst with their emission times.
    pub fn burst(&mut self, at: Micros) -> Vec<(Micros, Vec<u8>)> {
        if self.params.replay_len == 0 {
            return Vec::new();
        }
        if self.recent.is_empty() {
            self.log.record(at, "replay", "skip", json!({ "reason": "capture buffer empty" }));
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.recent.len());
        let mut counters = Vec::with_capacity(self.recent.len());
        for (k, frame) in self.recent.iter().enumerate() {
            let mut f = frame.clone();
            let vals = f.asdu.values().map(|v| (v as f64 * self.params.payload_scale).round() as i32);
            f.asdu.set_values(&vals);
            if let Ok(bytes) = sv_codec::encode(&f) {
                counters.push(f.asdu.smp_cnt);
                out.push((at + k as Micros * self.frame_period_us, bytes));
            }
        }
        self.bursts += 1;
        self.log.record(at, "replay", "burst", json!({ "burst": self.bursts, "smp_cnt": counters }));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PtpAttackMode {
    Throttle,
    Inject,
    Both,
}

impl PtpAttackMode {
    pub fn throttles(self) -> bool {
        matches!(self, PtpAttackMode::Throttle | PtpAttackMode::Both)
    }

    pub fn injects(self) -> bool {
        matches!(self, PtpAttackMode::Inject | PtpAttackMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct PtpAttackParams {
    pub mode: PtpAttackMode,
    /// Grandmaster sync interval imposed by throttling, seconds.
    pub throttle_interval: f64,
    /// Injection bursts per second.
    pub inject_rate: f64,
    /// ANNOUNCE/SYNC pairs per burst.
    pub inject_len: usize,
    pub forged_master_id: u64,
    pub forged_priority: u8,
    pub log_path: Option<String>,
}

impl Default for PtpAttackParams {
    fn default() -> Self {
        PtpAttackParams {
            mode: PtpAttackMode::Throttle,
            throttle_interval: 10.0,
            inject_rate: 8.0,
            inject_len: 1,
            forged_master_id: 0x0200_00FF_FE00_0099,
            forged_priority: 100,
            log_path: None,
        }
    }
}

impl PtpAttackParams {
    pub fn validate(&self, legitimate_gm: u64) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        if self.mode.throttles() && !(self.throttle_interval > 0.0) {
            errs.push(("attack.params.throttle_interval".into(), "must be strictly positive".into()));
        }
        if self.mode.injects() {
            if self.forged_master_id == legitimate_gm {
                errs.push((
                    "attack.params.forged_master_id".into(),
                    "must differ from the legitimate grandmaster id".into(),
                ));
            }
            if !(self.inject_rate > 0.0) {
                errs.push(("attack.params.inject_rate".into(), "must be strictly positive".into()));
            }
            if self.inject_len == 0 {
                errs.push(("attack.params.inject_len".into(), "must be at least one".into()));
            }
        }
        errs
    }

    pub fn inject_period_us(&self) -> Micros {
        secs_to_us(1.0 / self.inject_rate).max(1)
    }
}

/// PTP attacker: rewrites the grandmaster configuration and/or floods forged
/// announcements from a spare port.
pub struct PtpInjector {
    params: PtpAttackParams,
    template: Option<PtpMessage>,
    seq: u16,
    src_mac: [u8; 6],
    log: AttackLog,
}

impl PtpInjector {
    pub fn new(params: &PtpAttackParams, src_mac: [u8; 6], at: Micros, log: AttackLog) -> Self {
        log.record(
            at,
            "ptp",
            "params",
            json!({
                "mode": params.mode,
                "throttle_interval": params.throttle_interval,
                "inject_rate": params.inject_rate,
                "inject_len": params.inject_len,
                "forged_master_id": format!("{:016x}", params.forged_master_id),
                "forged_priority": params.forged_priority,
            }),
        );
        PtpInjector {
            params: params.clone(),
            template: None,
            seq: 0,
            src_mac,
            log,
        }
    }

    pub fn forged_id(&self) -> ClockIdentity {
        self.params.forged_master_id.to_be_bytes()
    }

    /// Keeps the latest legitimate SYNC as the flood template.
    pub fn observe(&mut self, bytes: &[u8]) {
        if sv_codec::ethertype_of(bytes) != Some(PTP_ETHERTYPE) {
            return;
        }
        if let Ok(msg) = PtpMessage::decode(bytes) {
            if msg.msg_type == PtpMsgType::Sync && msg.grandmaster_id != self.forged_id() {
                self.template = Some(msg);
            }
        }
    }

    /// The grandmaster configuration after throttling.
    pub fn throttle(&self, current: &GmConfig, at: Micros) -> GmConfig {
        let cfg = GmConfig {
            sync_interval: self.params.throttle_interval,
            announce_interval: current.announce_interval.max(self.params.throttle_interval),
        };
        self.log.record(
            at,
            "ptp",
            "throttle",
            json!({ "from_sync_interval": current.sync_interval, "to_sync_interval": cfg.sync_interval }),
        );
        cfg
    }

    /// One injection burst of forged ANNOUNCE/SYNC pairs.
    pub fn inject(&mut self, at: Micros) -> Vec<Vec<u8>> {
        let base = self.template.unwrap_or(PtpMessage {
            msg_type: PtpMsgType::Sync,
            grandmaster_id: self.forged_id(),
            priority: self.params.forged_priority,
            seq: 0,
            origin_timestamp: at,
        });
        let mut out = Vec::with_capacity(2 * self.params.inject_len);
        for _ in 0..self.params.inject_len {
            for msg_type in [PtpMsgType::Announce, PtpMsgType::Sync] {
                let msg = PtpMessage {
                    msg_type,
                    grandmaster_id: self.forged_id(),
                    priority: self.params.forged_priority,
                    seq: self.seq,
                    origin_timestamp: at,
                };
                out.push(msg.encode(self.src_mac));
            }
            self.seq = self.seq.wrapping_add(1);
        }
        self.log.record(
            at,
            "ptp",
            "inject",
            json!({ "frames": out.len(), "template_seq": base.seq, "from_template": self.template.is_some() }),
        );
        out
    }
}
