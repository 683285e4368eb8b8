//! Deterministic discrete-event layer-2 process bus.
//!
//! Every frame sent on the bus is flooded to all other attached ports after a
//! fixed link latency. A [`TapHandler`] installed on a directed link sees each
//! frame crossing that link and decides what (if anything) is delivered.
//! Events are ordered by `(time, insertion sequence)`, so a run is fully
//! determined by the order in which nodes schedule work.

pub mod pcap;

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::fs::File;
use std::io::{self, BufWriter};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::sv_codec::ethertype_of;
use pcap::PcapRecord;

/// Virtual time in microseconds.
pub type Micros = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PortId(pub u16);

impl std::fmt::Display for PortId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "port{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    MergingUnit,
    Relay,
    Grandmaster,
    Attacker,
    Other,
}

#[derive(Debug, Clone, Default)]
pub struct PortConfig {
    pub id: Option<PortId>,
    pub name: String,
}

impl PortConfig {
    pub fn named(name: impl Into<String>) -> Self {
        PortConfig {
            id: None,
            name: name.into(),
        }
    }

    pub fn with_id(mut self, id: PortId) -> Self {
        self.id = Some(id);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("port {0} is already attached")]
    DuplicatePort(PortId),
    #[error("port {0} is not attached")]
    UnknownPort(PortId),
    #[error("cannot attach while running without hot-attach")]
    HotAttachDisabled,
    #[error("link {0}->{1} already has a tap")]
    TapExists(PortId, PortId),
    #[error("no tap on link {0}->{1}")]
    NoTap(PortId, PortId),
    #[error("cannot schedule at {at} µs, clock is already at {now} µs")]
    InThePast { at: Micros, now: Micros },
    #[error("capture is not enabled")]
    CaptureDisabled,
}

/// A frame as seen by a receiving port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameEnvelope {
    pub bytes: Vec<u8>,
    /// Port that transmitted the frame.
    pub ingress: PortId,
    /// Delivery time.
    pub timestamp: Micros,
}

/// One frame emitted by a tap, delayed by `delay_us` beyond the link latency.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapOutput {
    pub bytes: Vec<u8>,
    pub delay_us: Micros,
}

impl TapOutput {
    pub fn now(bytes: Vec<u8>) -> Self {
        TapOutput { bytes, delay_us: 0 }
    }
}

/// Inline man-in-the-middle hook on a directed link.
pub trait TapHandler {
    /// Returns the frames to deliver downstream in place of `frame`.
    fn on_frame(&mut self, frame: &[u8], at: Micros) -> Vec<TapOutput>;
}

impl<F> TapHandler for F
where
    F: FnMut(&[u8], Micros) -> Vec<TapOutput>,
{
    fn on_frame(&mut self, frame: &[u8], at: Micros) -> Vec<TapOutput> {
        self(frame, at)
    }
}

/// Point-to-point signals on dedicated trusted channels. These never cross
/// the bus and cannot be tapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Signal {
    MuBinary(bool),
    Permissive,
    Trip,
}

/// Node behaviour driven by the event loop.
pub trait Dispatch {
    fn on_frame(&mut self, fabric: &mut Fabric, port: PortId, frame: &FrameEnvelope);
    fn on_timer(&mut self, fabric: &mut Fabric, port: PortId, token: u64);
    fn on_signal(&mut self, _fabric: &mut Fabric, _from: PortId, _to: PortId, _signal: Signal) {}
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum FabricEvent {
    Attached {
        t: Micros,
        port: PortId,
        kind: NodeKind,
        name: String,
    },
    TapInserted {
        t: Micros,
        from: PortId,
        to: PortId,
    },
    TapRemoved {
        t: Micros,
        from: PortId,
        to: PortId,
    },
    Delivered {
        t: Micros,
        from: PortId,
        to: PortId,
        len: usize,
    },
    TapDropped {
        t: Micros,
        from: PortId,
        to: PortId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct FabricStats {
    pub sent: u64,
    pub delivered: u64,
    pub tapped: u64,
    pub tap_dropped: u64,
    pub signals: u64,
}

#[derive(Debug, Clone)]
pub struct FabricConfig {
    pub link_latency_us: Micros,
    pub allow_hot_attach: bool,
    /// Record a [`FabricEvent::Delivered`] entry per delivery.
    pub log_deliveries: bool,
    /// Wall-clock pacing factor (1.0 = real time). Virtual time only when `None`.
    pub pacing: Option<f64>,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig {
            link_latency_us: 5,
            allow_hot_attach: false,
            log_deliveries: false,
            pacing: None,
        }
    }
}

/// Which frames end up in the capture buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CaptureFilter {
    /// Capture frames delivered to this port; `None` captures every transmission.
    pub port: Option<PortId>,
    pub ethertype: Option<u16>,
}

#[derive(Debug)]
enum Action {
    Transmit { from: PortId, bytes: Vec<u8> },
    Deliver { to: PortId, env: FrameEnvelope },
    Timer { port: PortId, token: u64 },
    Signal { from: PortId, to: PortId, signal: Signal },
}

#[derive(Debug)]
struct Scheduled {
    time: Micros,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(other.time, other.seq))
    }
}

/// Monotone clock with a `(time, seq)`-ordered agenda.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Micros,
    next_seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
}

impl VirtualClock {
    pub fn now(&self) -> Micros {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    fn push(&mut self, time: Micros, action: Action) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { time, seq, action }));
    }

    fn pop_until(&mut self, until: Micros) -> Option<Scheduled> {
        if self.queue.peek()?.0.time > until {
            return None;
        }
        let Reverse(ev) = self.queue.pop()?;
        debug_assert!(ev.time >= self.now);
        self.now = ev.time;
        Some(ev)
    }
}

#[derive(Debug, Clone)]
struct Port {
    id: PortId,
}

pub struct Fabric {
    config: FabricConfig,
    clock: VirtualClock,
    ports: Vec<Port>,
    taps: BTreeMap<(PortId, PortId), Box<dyn TapHandler>>,
    capture: Option<(CaptureFilter, Vec<PcapRecord>)>,
    events: Vec<FabricEvent>,
    stats: FabricStats,
    started: bool,
}

impl Fabric {
    pub fn new(config: FabricConfig) -> Self {
        Fabric {
            config,
            clock: VirtualClock::default(),
            ports: Vec::new(),
            taps: BTreeMap::new(),
            capture: None,
            events: Vec::new(),
            stats: FabricStats::default(),
            started: false,
        }
    }

    pub fn now(&self) -> Micros {
        self.clock.now()
    }

    pub fn config(&self) -> &FabricConfig {
        &self.config
    }

    pub fn stats(&self) -> FabricStats {
        self.stats
    }

    pub fn ports(&self) -> impl Iterator<Item = PortId> + '_ {
        self.ports.iter().map(|p| p.id)
    }

    pub fn port_count(&self) -> usize {
        self.ports.len()
    }

    fn is_attached(&self, id: PortId) -> bool {
        self.ports.iter().any(|p| p.id == id)
    }

    fn require(&self, id: PortId) -> Result<(), FabricError> {
        if self.is_attached(id) {
            Ok(())
        } else {
            Err(FabricError::UnknownPort(id))
        }
    }

    pub fn attach(&mut self, kind: NodeKind, config: PortConfig) -> Result<PortId, FabricError> {
        if self.started && !self.config.allow_hot_attach {
            return Err(FabricError::HotAttachDisabled);
        }
        let id = match config.id {
            Some(id) if self.is_attached(id) => return Err(FabricError::DuplicatePort(id)),
            Some(id) => id,
            None => {
                let next = self.ports.iter().map(|p| p.id.0 + 1).max().unwrap_or(0);
                PortId(next)
            }
        };
        self.ports.push(Port { id });
        self.events.push(FabricEvent::Attached {
            t: self.now(),
            port: id,
            kind,
            name: config.name,
        });
        Ok(id)
    }

    pub fn insert_tap(
        &mut self,
        from: PortId,
        to: PortId,
        handler: Box<dyn TapHandler>,
    ) -> Result<(), FabricError> {
        self.require(from)?;
        self.require(to)?;
        if self.taps.contains_key(&(from, to)) {
            return Err(FabricError::TapExists(from, to));
        }
        self.taps.insert((from, to), handler);
        self.events.push(FabricEvent::TapInserted {
            t: self.now(),
            from,
            to,
        });
        Ok(())
    }

    pub fn remove_tap(&mut self, from: PortId, to: PortId) -> Result<Box<dyn TapHandler>, FabricError> {
        let tap = self
            .taps
            .remove(&(from, to))
            .ok_or(FabricError::NoTap(from, to))?;
        self.events.push(FabricEvent::TapRemoved {
            t: self.now(),
            from,
            to,
        });
        Ok(tap)
    }

    /// Queues `frame` for transmission from `from` at virtual time `at`.
    pub fn send(&mut self, frame: Vec<u8>, from: PortId, at: Micros) -> Result<(), FabricError> {
        self.require(from)?;
        self.check_time(at)?;
        self.clock.push(at, Action::Transmit { from, bytes: frame });
        Ok(())
    }

    pub fn schedule_timer(&mut self, port: PortId, at: Micros, token: u64) -> Result<(), FabricError> {
        self.require(port)?;
        self.check_time(at)?;
        self.clock.push(at, Action::Timer { port, token });
        Ok(())
    }

    /// Sends a signal on a dedicated point-to-point channel, bypassing taps.
    pub fn signal(
        &mut self,
        from: PortId,
        to: PortId,
        at: Micros,
        signal: Signal,
    ) -> Result<(), FabricError> {
        self.require(from)?;
        self.require(to)?;
        self.check_time(at)?;
        self.clock.push(at, Action::Signal { from, to, signal });
        Ok(())
    }

    fn check_time(&self, at: Micros) -> Result<(), FabricError> {
        if at < self.now() {
            Err(FabricError::InThePast {
                at,
                now: self.now(),
            })
        } else {
            Ok(())
        }
    }

    pub fn enable_capture(&mut self, filter: CaptureFilter) {
        self.capture = Some((filter, Vec::new()));
    }

    pub fn captured(&self) -> &[PcapRecord] {
        self.capture.as_ref().map_or(&[], |(_, r)| r.as_slice())
    }

    fn capture_frame(&mut self, port: Option<PortId>, t: Micros, bytes: &[u8]) {
        if let Some((filter, records)) = &mut self.capture {
            if filter.port != port {
                return;
            }
            if let Some(want) = filter.ethertype {
                if ethertype_of(bytes) != Some(want) {
                    return;
                }
            }
            records.push(PcapRecord {
                timestamp_us: t,
                data: bytes.to_vec(),
            });
        }
    }

    pub fn export_pcap(&self, path: &Path) -> Result<(), FabricExportError> {
        let (_, records) = self.capture.as_ref().ok_or(FabricError::CaptureDisabled)?;
        let file = BufWriter::new(File::create(path)?);
        pcap::write_all(file, records)?;
        Ok(())
    }

    /// Runs every event with time `<= until` and leaves the clock at `until`.
    pub fn advance<D: Dispatch + ?Sized>(&mut self, until: Micros, nodes: &mut D) -> Vec<FabricEvent> {
        self.started = true;
        let pacing = self
            .config
            .pacing
            .filter(|s| *s > 0.0)
            .map(|speed| (Instant::now(), self.now(), speed));
        while let Some(ev) = self.clock.pop_until(until) {
            if let Some((wall0, virt0, speed)) = pacing {
                let target = Duration::from_secs_f64((ev.time - virt0) as f64 / 1e6 / speed);
                if let Some(wait) = target.checked_sub(wall0.elapsed()) {
                    std::thread::sleep(wait);
                }
            }
            self.execute(ev, nodes);
        }
        if until > self.clock.now {
            self.clock.now = until;
        }
        std::mem::take(&mut self.events)
    }

    fn execute<D: Dispatch + ?Sized>(&mut self, ev: Scheduled, nodes: &mut D) {
        let t = ev.time;
        match ev.action {
            Action::Transmit { from, bytes } => {
                self.stats.sent += 1;
                self.capture_frame(None, t, &bytes);
                let latency = self.config.link_latency_us;
                let dests: Vec<PortId> = self.ports.iter().map(|p| p.id).filter(|p| *p != from).collect();
                for to in dests {
                    let outputs = match self.taps.get_mut(&(from, to)) {
                        Some(tap) => {
                            self.stats.tapped += 1;
                            let out = tap.on_frame(&bytes, t);
                            if out.is_empty() {
                                self.stats.tap_dropped += 1;
                                self.events.push(FabricEvent::TapDropped { t, from, to });
                            }
                            out
                        }
                        None => vec![TapOutput::now(bytes.clone())],
                    };
                    for out in outputs {
                        let at = t + latency + out.delay_us;
                        let env = FrameEnvelope {
                            bytes: out.bytes,
                            ingress: from,
                            timestamp: at,
                        };
                        self.clock.push(at, Action::Deliver { to, env });
                    }
                }
            }
            Action::Deliver { to, env } => {
                self.stats.delivered += 1;
                self.capture_frame(Some(to), t, &env.bytes);
                if self.config.log_deliveries {
                    self.events.push(FabricEvent::Delivered {
                        t,
                        from: env.ingress,
                        to,
                        len: env.bytes.len(),
                    });
                }
                nodes.on_frame(self, to, &env);
            }
            Action::Timer { port, token } => nodes.on_timer(self, port, token),
            Action::Signal { from, to, signal } => {
                self.stats.signals += 1;
                nodes.on_signal(self, from, to, signal);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum FabricExportError {
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Records deliveries; port 0 publishes one frame per timer tick.
    #[derive(Default)]
    struct Recorder {
        received: Vec<(PortId, FrameEnvelope)>,
        period: Micros,
    }

    impl Dispatch for Recorder {
        fn on_frame(&mut self, _f: &mut Fabric, port: PortId, frame: &FrameEnvelope) {
            self.received.push((port, frame.clone()));
        }
        fn on_timer(&mut self, f: &mut Fabric, port: PortId, token: u64) {
            let now = f.now();
            f.send(token.to_be_bytes().to_vec(), port, now).unwrap();
            if self.period > 0 {
                f.schedule_timer(port, now + self.period, token + 1).unwrap();
            }
        }
    }

    fn three_ports() -> (Fabric, PortId, PortId, PortId) {
        let mut f = Fabric::new(FabricConfig::default());
        let mu = f.attach(NodeKind::MergingUnit, PortConfig::named("mu")).unwrap();
        let relay = f.attach(NodeKind::Relay, PortConfig::named("relay")).unwrap();
        let atk = f.attach(NodeKind::Attacker, PortConfig::named("attacker")).unwrap();
        (f, mu, relay, atk)
    }

    #[test]
    fn attach_assigns_distinct_ids() {
        let (mut f, mu, relay, atk) = three_ports();
        assert!(mu != relay && relay != atk && mu != atk);
        assert_eq!(
            f.attach(NodeKind::Other, PortConfig::named("x").with_id(relay)),
            Err(FabricError::DuplicatePort(relay))
        );
    }

    #[test]
    fn hot_attach_requires_opt_in() {
        let (mut f, ..) = three_ports();
        f.advance(10, &mut Recorder::default());
        assert_eq!(
            f.attach(NodeKind::Other, PortConfig::named("late")),
            Err(FabricError::HotAttachDisabled)
        );
        let mut g = Fabric::new(FabricConfig {
            allow_hot_attach: true,
            ..FabricConfig::default()
        });
        g.advance(10, &mut Recorder::default());
        assert!(g.attach(NodeKind::Other, PortConfig::named("late")).is_ok());
    }

    #[test]
    fn multicast_reaches_every_other_port() {
        let (mut f, mu, relay, atk) = three_ports();
        f.send(vec![1, 2, 3], mu, 0).unwrap();
        let mut rec = Recorder::default();
        f.advance(100, &mut rec);
        let ports: Vec<_> = rec.received.iter().map(|(p, _)| *p).collect();
        assert_eq!(ports, vec![relay, atk]);
        assert!(rec.received.iter().all(|(_, e)| e.timestamp == 5 && e.ingress == mu));
    }

    #[test]
    fn unattached_sender_is_rejected() {
        let (mut f, ..) = three_ports();
        assert_eq!(
            f.send(vec![0], PortId(42), 0),
            Err(FabricError::UnknownPort(PortId(42)))
        );
    }

    #[test]
    fn dropping_tap_absorbs_frames() {
        let (mut f, mu, relay, atk) = three_ports();
        f.insert_tap(mu, relay, Box::new(|_: &[u8], _: Micros| Vec::new()))
            .unwrap();
        f.send(vec![7], mu, 0).unwrap();
        let mut rec = Recorder::default();
        f.advance(100, &mut rec);
        assert_eq!(rec.received.len(), 1);
        assert_eq!(rec.received[0].0, atk);
        assert_eq!(f.stats().tap_dropped, 1);
    }

    #[test]
    fn delaying_tap_adds_to_latency() {
        let (mut f, mu, relay, _) = three_ports();
        f.insert_tap(
            mu,
            relay,
            Box::new(|b: &[u8], _: Micros| {
                vec![TapOutput {
                    bytes: b.to_vec(),
                    delay_us: 250,
                }]
            }),
        )
        .unwrap();
        f.send(vec![7], mu, 1000).unwrap();
        let mut rec = Recorder::default();
        f.advance(10_000, &mut rec);
        let at_relay: Vec<_> = rec.received.iter().filter(|(p, _)| *p == relay).collect();
        assert_eq!(at_relay[0].1.timestamp, 1000 + 5 + 250);
    }

    #[test]
    fn second_tap_on_link_is_rejected() {
        let (mut f, mu, relay, _) = three_ports();
        let id = |b: &[u8], _: Micros| vec![TapOutput::now(b.to_vec())];
        f.insert_tap(mu, relay, Box::new(id)).unwrap();
        assert_eq!(
            f.insert_tap(mu, relay, Box::new(id)).unwrap_err(),
            FabricError::TapExists(mu, relay)
        );
        // The reverse direction is a different link.
        assert!(f.insert_tap(relay, mu, Box::new(id)).is_ok());
    }

    #[test]
    fn duplicating_tap_doubles_downstream() {
        let (mut f, mu, relay, _) = three_ports();
        f.insert_tap(
            mu,
            relay,
            Box::new(|b: &[u8], _: Micros| vec![TapOutput::now(b.to_vec()), TapOutput::now(b.to_vec())]),
        )
        .unwrap();
        for k in 0..10 {
            f.send(vec![k], mu, k as u64 * 250).unwrap();
        }
        let mut rec = Recorder::default();
        f.advance(1_000_000, &mut rec);
        assert_eq!(rec.received.iter().filter(|(p, _)| *p == relay).count(), 20);
    }

    #[test]
    fn equal_time_events_keep_insertion_order() {
        let (mut f, mu, relay, _) = three_ports();
        for k in 0..5u8 {
            f.send(vec![k], mu, 100).unwrap();
        }
        let mut rec = Recorder::default();
        f.advance(200, &mut rec);
        let seen: Vec<u8> = rec
            .received
            .iter()
            .filter(|(p, _)| *p == relay)
            .map(|(_, e)| e.bytes[0])
            .collect();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn advance_to_now_fires_nothing() {
        let (mut f, mu, ..) = three_ports();
        f.schedule_timer(mu, 0, 0).unwrap();
        let mut rec = Recorder {
            period: 250,
            ..Recorder::default()
        };
        f.advance(1000, &mut rec);
        let n = rec.received.len();
        f.advance(1000, &mut rec);
        assert_eq!(rec.received.len(), n);
        assert_eq!(f.now(), 1000);
    }

    #[test]
    fn cannot_schedule_in_the_past() {
        let (mut f, mu, ..) = three_ports();
        f.advance(500, &mut Recorder::default());
        assert!(matches!(f.send(vec![0], mu, 499), Err(FabricError::InThePast { .. })));
    }

    #[test]
    fn signals_bypass_taps() {
        struct Sig(Vec<(Micros, Signal)>);
        impl Dispatch for Sig {
            fn on_frame(&mut self, _: &mut Fabric, _: PortId, _: &FrameEnvelope) {}
            fn on_timer(&mut self, _: &mut Fabric, _: PortId, _: u64) {}
            fn on_signal(&mut self, f: &mut Fabric, _: PortId, _: PortId, s: Signal) {
                self.0.push((f.now(), s));
            }
        }
        let (mut f, mu, relay, _) = three_ports();
        f.insert_tap(mu, relay, Box::new(|_: &[u8], _: Micros| Vec::new()))
            .unwrap();
        f.signal(mu, relay, 500, Signal::MuBinary(true)).unwrap();
        let mut s = Sig(Vec::new());
        f.advance(1000, &mut s);
        assert_eq!(s.0, vec![(500, Signal::MuBinary(true))]);
    }

    #[test]
    fn export_requires_capture() {
        let (f, ..) = three_ports();
        let dir = tempfile::tempdir().unwrap();
        assert!(f.export_pcap(&dir.path().join("x.pcap")).is_err());
    }
}
