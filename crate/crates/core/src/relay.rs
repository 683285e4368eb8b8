//! Emulated line protection relay.
//!
//! Frames for the subscribed `svID` go through two checks before their
//! samples are used: a same-`smpCnt` consistency check against recently seen
//! frames and the `smpSynch` status. Either failure blocks the SV-based
//! protection until `consistency_window` clean frames have arrived.
//!
//! In resilience mode a trip additionally needs the merging unit's binary
//! channel, and the remote-end permissive signal can stand in for the
//! (possibly blocked) SV measurement.

use std::collections::{BTreeMap, VecDeque};

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::fabric::Micros;
use crate::sv_codec::{self, QuantityKind, ScaleConvention, SmpSynch, SvFrame, CHANNEL_COUNT};
use crate::waveform::{self, FaultSpec, SystemParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct TeleprotectionConfig {
    pub enabled: bool,
    /// Channel delay, µs.
    pub delay_us: Micros,
    /// How long a received permissive stays latched, µs.
    pub hold_us: Micros,
}

impl Default for TeleprotectionConfig {
    fn default() -> Self {
        TeleprotectionConfig {
            enabled: true,
            delay_us: 5_000,
            hold_us: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RelaySettings {
    pub subscribed_sv_id: String,
    /// A secondary RMS.
    pub oc_pickup: f64,
    /// V secondary RMS; reported with each detection.
    pub uv_threshold: f64,
    /// Ohms secondary.
    pub zone_reach: f64,
    /// Samples per measurement window.
    pub window: usize,
    pub resilience_mode: bool,
    /// Frames retained per svID for the consistency check, and clean frames
    /// needed to leave the blocked state.
    pub consistency_window: usize,
    /// How long the trip condition must hold, µs.
    pub persistence_us: Micros,
    pub teleprotection: TeleprotectionConfig,
}

impl Default for RelaySettings {
    fn default() -> Self {
        RelaySettings {
            subscribed_sv_id: "BAY67_MU01".into(),
            oc_pickup: 2.0,
            uv_threshold: 30.0,
            zone_reach: 10.0,
            window: 80,
            resilience_mode: false,
            consistency_window: 8,
            persistence_us: 20_000,
            teleprotection: TeleprotectionConfig::default(),
        }
    }
}

impl RelaySettings {
    pub fn validate(&self, params: &SystemParams) -> Vec<(String, String)> {
        let mut errs = Vec::new();
        let nominal_rms = params.nominal_current_peak / 2f64.sqrt();
        if !(self.oc_pickup > nominal_rms) {
            errs.push((
                "relay.oc_pickup".into(),
                format!("must exceed nominal RMS current {nominal_rms:.3} A"),
            ));
        }
        if !(self.zone_reach > 0.227) {
            errs.push(("relay.zone_reach".into(), "must exceed the 0.227 Ω fault impedance".into()));
        }
        if self.window == 0 {
            errs.push(("relay.window".into(), "must be at least one sample".into()));
        }
        if self.consistency_window == 0 {
            errs.push(("relay.consistency_window".into(), "must be at least one frame".into()));
        }
        if !(self.uv_threshold > 0.0) {
            errs.push(("relay.uv_threshold".into(), "must be strictly positive".into()));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RelayEventKind {
    Trip,
    Block,
    Unblock,
    Alarm,
    SyncLost,
    Normal,
}

impl RelayEventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelayEventKind::Trip => "TRIP",
            RelayEventKind::Block => "BLOCK",
            RelayEventKind::Unblock => "UNBLOCK",
            RelayEventKind::Alarm => "ALARM",
            RelayEventKind::SyncLost => "SYNC_LOST",
            RelayEventKind::Normal => "NORMAL",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayEvent {
    pub t: Micros,
    pub kind: RelayEventKind,
    pub detail: String,
}

impl RelayEvent {
    fn new(t: Micros, kind: RelayEventKind, detail: impl Into<String>) -> Self {
        RelayEvent {
            t,
            kind,
            detail: detail.into(),
        }
    }
}

/// Per-phase RMS values over one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurements {
    pub i_rms: [f64; 3],
    pub v_rms: [f64; 3],
}

impl Measurements {
    pub fn from_window(window: &[[f64; CHANNEL_COUNT]]) -> Option<Self> {
        if window.is_empty() {
            return None;
        }
        let col = |c: usize| -> f64 {
            let v: Vec<f64> = window.iter().map(|s| s[c]).collect();
            waveform::rms(&v).unwrap_or(0.0)
        };
        Some(Measurements {
            i_rms: [col(0), col(1), col(2)],
            v_rms: [col(4), col(5), col(6)],
        })
    }

    /// Apparent impedance of `phase`; infinite with no current.
    pub fn impedance(&self, phase: usize) -> f64 {
        if self.i_rms[phase] > 0.0 {
            self.v_rms[phase] / self.i_rms[phase]
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Detection {
    pub overcurrent: bool,
    pub impedance: bool,
    pub undervoltage: bool,
}

impl Detection {
    pub fn fault(&self) -> bool {
        self.overcurrent || self.impedance
    }

    pub fn label(&self) -> &'static str {
        match (self.overcurrent, self.impedance) {
            (true, true) => "OC+Z",
            (true, false) => "OC",
            (false, true) => "Z",
            (false, false) => "none",
        }
    }
}

/// Overcurrent and current-gated under-impedance elements.
pub fn fault_detect(settings: &RelaySettings, m: &Measurements) -> Detection {
    let mut d = Detection::default();
    for p in 0..3 {
        if m.i_rms[p] > settings.oc_pickup {
            d.overcurrent = true;
        }
        if m.i_rms[p] > 0.5 * settings.oc_pickup && m.impedance(p) < settings.zone_reach {
            d.impedance = true;
        }
        if m.v_rms[p] < settings.uv_threshold {
            d.undervoltage = true;
        }
    }
    d
}

/// Sliding window of dequantised samples.
#[derive(Debug, Clone)]
pub struct MeasurementWindow {
    capacity: usize,
    samples: VecDeque<[f64; CHANNEL_COUNT]>,
}

impl MeasurementWindow {
    pub fn new(capacity: usize) -> Self {
        MeasurementWindow {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, s: [f64; CHANNEL_COUNT]) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(s);
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn measurements(&self) -> Option<Measurements> {
        if !self.is_full() {
            return None;
        }
        let (a, b) = self.samples.as_slices();
        let mut v = Vec::with_capacity(self.capacity);
        v.extend_from_slice(a);
        v.extend_from_slice(b);
        Measurements::from_window(&v)
    }
}

/// Recent frames per svID, used to spot two streams sharing one identity.
#[derive(Debug, Clone, Default)]
pub struct StreamRegistry {
    capacity: usize,
    streams: BTreeMap<String, VecDeque<(u16, [i32; CHANNEL_COUNT])>>,
}

impl StreamRegistry {
    pub fn new(capacity: usize) -> Self {
        StreamRegistry {
            capacity,
            streams: BTreeMap::new(),
        }
    }

    /// Records the frame. Returns the conflicting `smp_cnt` if a retained
    /// frame has the same counter but different channel values.
    pub fn observe(&mut self, sv_id: &str, smp_cnt: u16, values: [i32; CHANNEL_COUNT]) -> Option<u16> {
        let recent = self.streams.entry(sv_id.to_owned()).or_default();
        let mut conflict = None;
        for (cnt, vals) in recent.iter() {
            if *cnt == smp_cnt {
                if *vals == values {
                    return None;
                }
                conflict = Some(smp_cnt);
            }
        }
        if recent.len() == self.capacity {
            recent.pop_front();
        }
        recent.push_back((smp_cnt, values));
        conflict
    }

    pub fn retained(&self, sv_id: &str) -> usize {
        self.streams.get(sv_id).map_or(0, VecDeque::len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum TripPath {
    Sv,
    Teleprotection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TripRecord {
    pub t: Micros,
    pub path: TripPath,
    pub mu_binary: bool,
    pub detection: Detection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RelayStats {
    pub frames: u64,
    pub undecodable: u64,
    pub foreign: u64,
    pub conflicts: u64,
}

pub struct Relay {
    settings: RelaySettings,
    scale: ScaleConvention,
    window: MeasurementWindow,
    registry: StreamRegistry,
    blocked: bool,
    alarm_active: bool,
    sync_lost: bool,
    clean_frames: usize,
    mu_binary: bool,
    permissive_until: Option<Micros>,
    pickup_since: Option<Micros>,
    trip: Option<TripRecord>,
    last_detection: Detection,
    stats: RelayStats,
}

impl Relay {
    pub fn new(settings: RelaySettings) -> Self {
        Relay {
            window: MeasurementWindow::new(settings.window),
            registry: StreamRegistry::new(settings.consistency_window),
            settings,
            scale: ScaleConvention::default(),
            blocked: false,
            alarm_active: false,
            sync_lost: false,
            clean_frames: 0,
            mu_binary: false,
            permissive_until: None,
            pickup_since: None,
            trip: None,
            last_detection: Detection::default(),
            stats: RelayStats::default(),
        }
    }

    pub fn settings(&self) -> &RelaySettings {
        &self.settings
    }

    pub fn is_blocked(&self) -> bool {
        self.blocked
    }

    pub fn trip(&self) -> Option<TripRecord> {
        self.trip
    }

    pub fn mu_binary(&self) -> bool {
        self.mu_binary
    }

    pub fn stats(&self) -> RelayStats {
        self.stats
    }

    pub fn measurements(&self) -> Option<Measurements> {
        self.window.measurements()
    }

    /// Decodes and processes raw bytes from the process bus. Undecodable
    /// frames are counted and dropped.
    pub fn on_sv_bytes(&mut self, bytes: &[u8], t: Micros) -> (Option<SvFrame>, Vec<RelayEvent>) {
        match sv_codec::decode(bytes) {
            Ok(frame) => {
                let events = self.on_sv_frame(&frame, t);
                (Some(frame), events)
            }
            Err(_) => {
                self.stats.undecodable += 1;
                (None, Vec::new())
            }
        }
    }

    pub fn on_sv_frame(&mut self, frame: &SvFrame, t: Micros) -> Vec<RelayEvent> {
        let asdu = &frame.asdu;
        if asdu.sv_id != self.settings.subscribed_sv_id {
            self.stats.foreign += 1;
            return Vec::new();
        }
        self.stats.frames += 1;
        let mut events = Vec::new();
        let values = asdu.values();
        let conflict = self.registry.observe(&asdu.sv_id, asdu.smp_cnt, values);
        let unsynced = asdu.smp_synch != SmpSynch::Global;

        if let Some(cnt) = conflict {
            self.stats.conflicts += 1;
            self.clean_frames = 0;
            if !self.alarm_active {
                self.alarm_active = true;
                events.push(RelayEvent::new(
                    t,
                    RelayEventKind::Alarm,
                    format!("conflicting SV streams: svID {} smpCnt {cnt} seen with different values", asdu.sv_id),
                ));
            }
            self.block(t, "inconsistent SV streams", &mut events);
        }
        if unsynced {
            self.clean_frames = 0;
            if !self.sync_lost {
                self.sync_lost = true;
                events.push(RelayEvent::new(
                    t,
                    RelayEventKind::SyncLost,
                    format!("smpSynch {:?} on svID {}", asdu.smp_synch, asdu.sv_id),
                ));
            }
            self.block(t, "SV stream not globally synchronised", &mut events);
        }
        if conflict.is_none() && !unsynced {
            self.window
                .push(self.scale.dequantize_all(&values));
            if self.blocked {
                self.clean_frames += 1;
                if self.clean_frames >= self.settings.consistency_window {
                    self.blocked = false;
                    self.alarm_active = false;
                    events.push(RelayEvent::new(
                        t,
                        RelayEventKind::Unblock,
                        format!("{} consecutive clean frames", self.clean_frames),
                    ));
                    if self.sync_lost {
                        self.sync_lost = false;
                        events.push(RelayEvent::new(t, RelayEventKind::Normal, "synchronisation restored"));
                    }
                }
            }
        }
        events
    }

    fn block(&mut self, t: Micros, reason: &str, events: &mut Vec<RelayEvent>) {
        if !self.blocked {
            self.blocked = true;
            self.pickup_since = None;
            events.push(RelayEvent::new(t, RelayEventKind::Block, reason));
        }
    }

    pub fn on_mu_binary(&mut self, flag: bool) {
        self.mu_binary = flag;
    }

    /// A permissive from the remote end; ignored when the channel is disabled.
    pub fn on_permissive(&mut self, t: Micros) {
        if self.settings.teleprotection.enabled {
            self.permissive_until = Some(t + self.settings.teleprotection.hold_us);
        }
    }

    pub fn permissive_active(&self, t: Micros) -> bool {
        self.permissive_until.is_some_and(|until| t <= until)
    }

    /// Evaluates the trip logic at time `t`; returns the TRIP event once.
    pub fn decide(&mut self, t: Micros) -> Option<RelayEvent> {
        if self.trip.is_some() {
            return None;
        }
        let detection = self
            .window
            .measurements()
            .map(|m| fault_detect(&self.settings, &m))
            .unwrap_or_default();
        self.last_detection = detection;
        let sv_term = detection.fault() && !self.blocked;
        let permissive = self.permissive_active(t);
        let condition = if self.settings.resilience_mode {
            self.mu_binary && (sv_term || permissive)
        } else {
            sv_term
        };
        if !condition {
            self.pickup_since = None;
            return None;
        }
        let since = *self.pickup_since.get_or_insert(t);
        if t - since < self.settings.persistence_us {
            return None;
        }
        let path = if sv_term {
            TripPath::Sv
        } else {
            TripPath::Teleprotection
        };
        self.trip = Some(TripRecord {
            t,
            path,
            mu_binary: self.mu_binary,
            detection,
        });
        let mode = if self.settings.resilience_mode {
            "resilience"
        } else {
            "baseline"
        };
        let detail = match path {
            TripPath::Sv => format!(
                "mode={mode} path=sv element={} uv={} mu_binary={}",
                detection.label(),
                detection.undervoltage,
                self.mu_binary
            ),
            TripPath::Teleprotection => {
                format!("mode={mode} path=teleprotection mu_binary={}", self.mu_binary)
            }
        };
        Some(RelayEvent::new(t, RelayEventKind::Trip, detail))
    }
}

/// The relay at the opposite line end, fed by its own unattacked merging unit.
/// It only runs the fault elements and reports whether to send a permissive.
pub struct RemoteTerminal {
    params: SystemParams,
    fault: FaultSpec,
    settings: RelaySettings,
    scale: ScaleConvention,
    window: MeasurementWindow,
}

impl RemoteTerminal {
    pub fn new(params: SystemParams, fault: FaultSpec, settings: RelaySettings) -> Self {
        RemoteTerminal {
            window: MeasurementWindow::new(settings.window),
            params,
            fault,
            settings,
            scale: ScaleConvention::default(),
        }
    }

    pub fn clear_fault_at(&mut self, t: f64) {
        if self.fault.is_active(t) && t > self.fault.onset {
            self.fault.clear = Some(t);
        }
    }

    /// Samples the remote end; true when a permissive should be sent.
    pub fn tick(&mut self, t_us: Micros) -> bool {
        let s = waveform::sample(&self.params, &self.fault, t_us as f64 / 1e6);
        let (c, v) = (QuantityKind::Current, QuantityKind::Voltage);
        let q = |x: f64, k| self.scale.dequantize(self.scale.quantize_saturating(x, k), k);
        self.window.push([
            q(s.i[0], c),
            q(s.i[1], c),
            q(s.i[2], c),
            q(s.i[0] + s.i[1] + s.i[2], c),
            q(s.v[0], v),
            q(s.v[1], v),
            q(s.v[2], v),
            q(s.v[0] + s.v[1] + s.v[2], v),
        ]);
        self.settings.teleprotection.enabled
            && self
                .window
                .measurements()
                .is_some_and(|m| fault_detect(&self.settings, &m).fault())
    }
}
