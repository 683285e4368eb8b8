//! Wires a scenario onto the fabric and runs it to completion.

use serde::Serialize;
use serde_json::{json, Value};

use super::{AttackSpec, ScenarioConfig, ValidationError};
use crate::attack_engine::{
    AttackLog, AttackRecord, AttackWindow, ForceTap, MasqueradeTap, PtpInjector, ReplayAgent,
};
use crate::fabric::pcap::PcapRecord;
use crate::fabric::{
    CaptureFilter, Dispatch, Fabric, FabricConfig, FabricStats, FrameEnvelope, Micros, NodeKind,
    PortConfig, PortId, Signal, TapHandler,
};
use crate::merging_unit::MergingUnit;
use crate::ptp_sync::{GmConfig, Grandmaster, MasterRef, PtpClientState, PtpMessage, PtpMsgType};
use crate::relay::{Relay, RelayEvent, RelayStats, RemoteTerminal, TripRecord};
use crate::sv_codec::{self, SmpSynch, PTP_ETHERTYPE, SV_ETHERTYPE};
use crate::waveform::AnalogSample;

const MU_TICK: u64 = 1;
const RELAY_TICK: u64 = 2;
const REMOTE_TICK: u64 = 3;
const ATTACK_ACCESS: u64 = 4;
const ATTACK_START: u64 = 5;
const ATTACK_STOP: u64 = 6;
const REPLAY_BURST: u64 = 7;
const PTP_INJECT: u64 = 8;
/// Grandmaster timers carry a generation in the low 32 bits so that a
/// reconfiguration invalidates the previously scheduled tick.
const GM_TICK: u64 = 1 << 32;

const ATTACKER_MAC: [u8; 6] = [0x02, 0x00, 0x00, 0x00, 0x0A, 0x77];
const GM_MAC: [u8; 6] = [0x00, 0x1B, 0x19, 0x00, 0x00, 0x01];

/// One line of the run's event log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub t_us: Micros,
    pub source: &'static str,
    pub kind: String,
    pub detail: Value,
}

/// Instants the report derives its timing summary from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Probes {
    pub attack_start: Option<Micros>,
    pub first_injection: Option<Micros>,
    /// Last legitimate SYNC received by the MU before it lost synchronisation.
    pub last_gm_sync_at_mu: Option<Micros>,
    /// First frame published with `smpSynch` other than GLOBAL.
    pub sync_none_at: Option<Micros>,
    pub fault_cleared_at: Option<Micros>,
}

/// Everything a run produced, in memory.
pub struct RunResult {
    pub config: ScenarioConfig,
    pub events: Vec<LogEntry>,
    pub relay_events: Vec<RelayEvent>,
    pub attack_log: Vec<AttackRecord>,
    /// Analog values at the MU, one per published frame.
    pub mu_samples: Vec<AnalogSample>,
    /// SV frames delivered to the relay port.
    pub capture: Vec<PcapRecord>,
    pub trip: Option<TripRecord>,
    pub relay_stats: RelayStats,
    pub fabric_stats: FabricStats,
    pub probes: Probes,
}

enum AttackerNode {
    None,
    Replay(ReplayAgent),
    Ptp(PtpInjector),
}

struct Ports {
    mu: PortId,
    relay: PortId,
    remote: PortId,
    gm: Option<PortId>,
    attacker: Option<PortId>,
}

struct World {
    ports: Ports,
    period_us: Micros,
    duration_us: Micros,
    closed_loop: bool,
    binary_delay_us: Micros,
    teleprotection_delay_us: Micros,
    legit_gm: [u8; 8],
    mu: MergingUnit,
    relay: Relay,
    remote: RemoteTerminal,
    gm: Option<Grandmaster>,
    gm_gen: u64,
    gm_original: Option<GmConfig>,
    window: Option<AttackWindow>,
    pending_tap: Option<Box<dyn TapHandler>>,
    attacker: AttackerNode,
    replay_period_us: Micros,
    inject_period_us: Micros,
    throttles: bool,
    injects: bool,
    log: Vec<LogEntry>,
    relay_events: Vec<RelayEvent>,
    mu_samples: Vec<AnalogSample>,
    probes: Probes,
}

impl World {
    fn note(&mut self, t: Micros, source: &'static str, kind: &str, detail: Value) {
        self.log.push(LogEntry {
            t_us: t,
            source,
            kind: kind.to_owned(),
            detail,
        });
    }

    fn relay_event(&mut self, ev: RelayEvent) {
        self.note(ev.t, "relay", ev.kind.as_str(), json!(ev.detail));
        self.relay_events.push(ev);
    }

    fn attack_active(&self, t: Micros) -> bool {
        self.window.as_ref().is_some_and(|w| w.is_active(t))
    }

    fn again(&self, fabric: &mut Fabric, port: PortId, at: Micros, token: u64) {
        if at < self.duration_us {
            fabric
                .schedule_timer(port, at, token)
                .expect("timer on an attached port in the future");
        }
    }

    fn send(&self, fabric: &mut Fabric, bytes: Vec<u8>, from: PortId, at: Micros) {
        if at < self.duration_us {
            fabric.send(bytes, from, at).expect("send from an attached port");
        }
    }

    fn mu_tick(&mut self, fabric: &mut Fabric, t: Micros) {
        let out = self.mu.tick(t);
        let bytes = sv_codec::encode(&out.frame).expect("validated MU config encodes");
        fabric.send(bytes, self.ports.mu, t).expect("MU port attached");
        self.mu_samples.push(out.analog);
        if let Some(s) = out.sync_changed {
            self.note(t, "mu", "SMP_SYNCH", json!({ "value": s, "cause": "ptp timeout" }));
        }
        if out.frame.asdu.smp_synch != SmpSynch::Global && self.probes.sync_none_at.is_none() {
            self.probes.sync_none_at = Some(t);
        }
        if let Some(flag) = out.binary_changed {
            self.note(t, "mu", "MU_BINARY", json!({ "value": flag }));
            fabric
                .signal(self.ports.mu, self.ports.relay, t + self.binary_delay_us, Signal::MuBinary(flag))
                .expect("ports attached");
        }
        self.again(fabric, self.ports.mu, t + self.period_us, MU_TICK);
    }

    fn gm_tick(&mut self, fabric: &mut Fabric, t: Micros, gen: u64) {
        if gen != self.gm_gen {
            return;
        }
        let (Some(gm), Some(port)) = (self.gm.as_mut(), self.ports.gm) else {
            return;
        };
        let msgs = gm.gm_tick(t);
        let next = gm.next_due();
        for m in msgs {
            self.send(fabric, m.encode(GM_MAC), port, t);
        }
        self.again(fabric, port, next, GM_TICK | self.gm_gen);
    }

    fn attack_timer(&mut self, fabric: &mut Fabric, port: PortId, token: u64, t: Micros) {
        let attacker = self.ports.attacker.unwrap_or(self.ports.mu);
        match token {
            ATTACK_ACCESS => {
                self.note(t, "attack", "ATTACK_ACCESS", json!({}));
                if let Some(tap) = self.pending_tap.take() {
                    fabric
                        .insert_tap(self.ports.mu, self.ports.relay, tap)
                        .expect("single tap on the MU to relay link");
                }
            }
            ATTACK_START => {
                self.probes.attack_start = Some(t);
                self.note(t, "attack", "ATTACK_START", json!({}));
                match &self.attacker {
                    AttackerNode::Replay(_) => self.again(fabric, attacker, t, REPLAY_BURST),
                    AttackerNode::Ptp(inj) => {
                        if self.throttles {
                            if let (Some(gm), Some(gm_port)) = (self.gm.as_mut(), self.ports.gm) {
                                let cfg = inj.throttle(gm.config(), t);
                                gm.reconfigure(cfg, t);
                                self.gm_gen += 1;
                                let next = gm.next_due();
                                self.again(fabric, gm_port, next, GM_TICK | self.gm_gen);
                            }
                        }
                        if self.injects {
                            self.again(fabric, attacker, t, PTP_INJECT);
                        }
                    }
                    AttackerNode::None => {}
                }
            }
            ATTACK_STOP => {
                self.note(t, "attack", "ATTACK_STOP", json!({}));
                if let (Some(cfg), Some(gm), Some(gm_port)) =
                    (self.gm_original.take(), self.gm.as_mut(), self.ports.gm)
                {
                    if self.throttles {
                        gm.reconfigure(cfg, t);
                        self.gm_gen += 1;
                        let next = gm.next_due();
                        self.again(fabric, gm_port, next, GM_TICK | self.gm_gen);
                    }
                }
            }
            REPLAY_BURST => {
                if !self.attack_active(t) {
                    return;
                }
                if let AttackerNode::Replay(agent) = &mut self.attacker {
                    let frames = agent.burst(t);
                    if let Some((first, _)) = frames.first() {
                        self.probes.first_injection.get_or_insert(*first);
                    }
                    for (at, bytes) in frames {
                        self.send(fabric, bytes, port, at);
                    }
                }
                self.again(fabric, port, t + self.replay_period_us, REPLAY_BURST);
            }
            PTP_INJECT => {
                if !self.attack_active(t) {
                    return;
                }
                if let AttackerNode::Ptp(inj) = &mut self.attacker {
                    let frames = inj.inject(t);
                    if !frames.is_empty() {
                        self.probes.first_injection.get_or_insert(t);
                    }
                    for bytes in frames {
                        self.send(fabric, bytes, port, t);
                    }
                }
                self.again(fabric, port, t + self.inject_period_us, PTP_INJECT);
            }
            _ => {}
        }
    }
}

impl Dispatch for World {
    fn on_frame(&mut self, _fabric: &mut Fabric, port: PortId, frame: &FrameEnvelope) {
        let t = frame.timestamp;
        let ethertype = sv_codec::ethertype_of(&frame.bytes);
        if port == self.ports.relay {
            if ethertype == Some(SV_ETHERTYPE) {
                let (_, events) = self.relay.on_sv_bytes(&frame.bytes, t);
                for ev in events {
                    self.relay_event(ev);
                }
            }
        } else if port == self.ports.mu {
            if ethertype != Some(PTP_ETHERTYPE) {
                return;
            }
            let Ok(msg) = PtpMessage::decode(&frame.bytes) else {
                return;
            };
            if msg.msg_type == PtpMsgType::Sync
                && msg.grandmaster_id == self.legit_gm
                && self.probes.sync_none_at.is_none()
            {
                self.probes.last_gm_sync_at_mu = Some(t);
            }
            if let Some(s) = self.mu.on_ptp(&msg, t) {
                let gm = msg.grandmaster_id.iter().map(|b| format!("{b:02x}")).collect::<String>();
                self.note(t, "mu", "SMP_SYNCH", json!({ "value": s, "cause": "ptp message", "grandmaster": gm }));
            }
        } else if Some(port) == self.ports.attacker {
            let access = self.window.as_ref().map_or(Micros::MAX, |w| w.access_us());
            if t < access {
                return;
            }
            match &mut self.attacker {
                AttackerNode::Replay(agent) => agent.observe(&frame.bytes),
                AttackerNode::Ptp(inj) => inj.observe(&frame.bytes),
                AttackerNode::None => {}
            }
        }
    }

    fn on_timer(&mut self, fabric: &mut Fabric, port: PortId, token: u64) {
        let t = fabric.now();
        match token {
            MU_TICK => self.mu_tick(fabric, t),
            RELAY_TICK => {
                if let Some(ev) = self.relay.decide(t) {
                    self.relay_event(ev);
                    if self.closed_loop {
                        fabric
                            .signal(self.ports.relay, self.ports.mu, t, Signal::Trip)
                            .expect("ports attached");
                    }
                }
                self.again(fabric, port, t + self.period_us, RELAY_TICK);
            }
            REMOTE_TICK => {
                if self.remote.tick(t) {
                    fabric
                        .signal(
                            self.ports.remote,
                            self.ports.relay,
                            t + self.teleprotection_delay_us,
                            Signal::Permissive,
                        )
                        .expect("ports attached");
                }
                self.again(fabric, port, t + self.period_us, REMOTE_TICK);
            }
            tok if tok & GM_TICK != 0 => self.gm_tick(fabric, t, tok & 0xFFFF_FFFF),
            tok => self.attack_timer(fabric, port, tok, t),
        }
    }

    fn on_signal(&mut self, fabric: &mut Fabric, _from: PortId, to: PortId, signal: Signal) {
        let t = fabric.now();
        match signal {
            Signal::MuBinary(flag) if to == self.ports.relay => self.relay.on_mu_binary(flag),
            Signal::Permissive if to == self.ports.relay => {
                if !self.relay.permissive_active(t) && self.relay.settings().teleprotection.enabled {
                    self.note(t, "relay", "PERMISSIVE", json!({}));
                }
                self.relay.on_permissive(t);
            }
            Signal::Trip if to == self.ports.mu => {
                let secs = t as f64 / 1e6;
                let was_active = self.mu.fault().is_active(secs);
                self.mu.clear_fault_at(secs);
                self.remote.clear_fault_at(secs);
                if was_active && !self.mu.fault().is_active(secs) {
                    self.probes.fault_cleared_at = Some(t);
                    self.note(t, "scenario", "FAULT_CLEARED", json!({}));
                }
            }
            _ => {}
        }
    }
}

/// Runs a validated scenario deterministically in virtual time.
pub fn run(config: &ScenarioConfig) -> Result<RunResult, ValidationError> {
    config.validate()?;
    let cfg = config.clone();
    let mut fabric = Fabric::new(FabricConfig {
        link_latency_us: cfg.network.link_latency_us,
        ..FabricConfig::default()
    });
    let attach = |fabric: &mut Fabric, kind, name: &str| {
        fabric
            .attach(kind, PortConfig::named(name))
            .expect("fresh fabric accepts attachments")
    };
    let mu_port = attach(&mut fabric, NodeKind::MergingUnit, "merging_unit");
    let relay_port = attach(&mut fabric, NodeKind::Relay, "relay");
    let remote_port = attach(&mut fabric, NodeKind::Other, "remote_end");
    let gm_port = cfg
        .ptp
        .enabled
        .then(|| attach(&mut fabric, NodeKind::Grandmaster, "grandmaster"));
    let needs_port = matches!(cfg.attack, AttackSpec::Replay { .. } | AttackSpec::Ptp { .. });
    let attacker_port = needs_port.then(|| attach(&mut fabric, NodeKind::Attacker, "attacker"));
    fabric.enable_capture(CaptureFilter {
        port: Some(relay_port),
        ethertype: Some(SV_ETHERTYPE),
    });

    let legit_gm = cfg.ptp.grandmaster_id.to_be_bytes();
    let sync_us = (cfg.ptp.grandmaster.sync_interval * 1e6).round() as Micros;
    let client = cfg.ptp.enabled.then(|| {
        let master = MasterRef {
            id: legit_gm,
            priority: cfg.ptp.grandmaster_priority,
        };
        PtpClientState::synced_to(master, 0, sync_us, cfg.ptp.timeout_multiplier)
    });
    let mu = MergingUnit::new(cfg.merging_unit.clone(), cfg.system.clone(), cfg.fault.clone(), client, cfg.seed)
        .map_err(|e| ValidationError {
            scenario: cfg.name.clone(),
            issues: vec![super::Issue {
                field: "merging_unit".into(),
                message: e.to_string(),
            }],
        })?;
    let gm = cfg.ptp.enabled.then(|| {
        Grandmaster::new(legit_gm, cfg.ptp.grandmaster_priority, cfg.ptp.grandmaster.clone(), 0)
    });

    let attack_log = AttackLog::new();
    let window = cfg.attack.window().cloned();
    let mut pending_tap: Option<Box<dyn TapHandler>> = None;
    let mut attacker = AttackerNode::None;
    let (mut replay_period_us, mut inject_period_us, mut throttles, mut injects) = (1, 1, false, false);
    match &cfg.attack {
        AttackSpec::None => {}
        AttackSpec::Force { window, params } => {
            pending_tap = Some(Box::new(ForceTap::new(params, &cfg.system, window.clone(), attack_log.clone())));
        }
        AttackSpec::Masquerade { window, params } => {
            pending_tap = Some(Box::new(MasqueradeTap::new(params, window.clone(), attack_log.clone())));
        }
        AttackSpec::Replay { window, params } => {
            replay_period_us = params.trigger_period_us();
            attacker = AttackerNode::Replay(ReplayAgent::new(params, &cfg.system, window.access_us(), attack_log.clone()));
        }
        AttackSpec::Ptp { window, params } => {
            inject_period_us = params.inject_period_us();
            throttles = params.mode.throttles();
            injects = params.mode.injects();
            attacker = AttackerNode::Ptp(PtpInjector::new(params, ATTACKER_MAC, window.access_us(), attack_log.clone()));
        }
    }

    let duration_us = cfg.duration_us();
    let mut world = World {
        ports: Ports {
            mu: mu_port,
            relay: relay_port,
            remote: remote_port,
            gm: gm_port,
            attacker: attacker_port,
        },
        period_us: cfg.system.sample_period_us(),
        duration_us,
        closed_loop: cfg.closed_loop,
        binary_delay_us: cfg.merging_unit.binary_channel.delay_us,
        teleprotection_delay_us: cfg.relay.teleprotection.delay_us,
        legit_gm,
        mu,
        relay: Relay::new(cfg.relay.clone()),
        remote: RemoteTerminal::new(cfg.system.clone(), cfg.fault.clone(), cfg.relay.clone()),
        gm,
        gm_gen: 0,
        gm_original: Some(cfg.ptp.grandmaster.clone()),
        window: window.clone(),
        pending_tap,
        attacker,
        replay_period_us,
        inject_period_us,
        throttles,
        injects,
        log: Vec::new(),
        relay_events: Vec::new(),
        mu_samples: Vec::with_capacity((duration_us / cfg.system.sample_period_us()) as usize),
        probes: Probes::default(),
    };

    fabric.schedule_timer(mu_port, 0, MU_TICK).expect("attached");
    fabric.schedule_timer(relay_port, 0, RELAY_TICK).expect("attached");
    fabric.schedule_timer(remote_port, 0, REMOTE_TICK).expect("attached");
    if let Some(p) = gm_port {
        fabric.schedule_timer(p, 0, GM_TICK).expect("attached");
    }
    if let Some(w) = &window {
        let port = attacker_port.unwrap_or(mu_port);
        fabric.schedule_timer(port, w.access_us(), ATTACK_ACCESS).expect("attached");
        fabric.schedule_timer(port, w.start_us(), ATTACK_START).expect("attached");
        if let Some(stop) = w.stop_us().filter(|s| *s < duration_us) {
            fabric.schedule_timer(port, stop, ATTACK_STOP).expect("attached");
        }
    }

    let structural = fabric.advance(duration_us.saturating_sub(1), &mut world);
    let mut events = std::mem::take(&mut world.log);
    for ev in structural {
        let detail = serde_json::to_value(&ev).expect("fabric events serialise");
        let t = detail.get("t").and_then(Value::as_u64).unwrap_or(0);
        let kind = detail
            .get("event")
            .and_then(Value::as_str)
            .unwrap_or("fabric")
            .to_uppercase();
        events.push(LogEntry {
            t_us: t,
            source: "fabric",
            kind,
            detail,
        });
    }
    events.sort_by_key(|e| e.t_us);

    Ok(RunResult {
        config: cfg,
        events,
        relay_events: world.relay_events,
        attack_log: attack_log.records(),
        mu_samples: world.mu_samples,
        capture: fabric.captured().to_vec(),
        trip: world.relay.trip(),
        relay_stats: world.relay.stats(),
        fabric_stats: fabric.stats(),
        probes: world.probes,
    })
}
