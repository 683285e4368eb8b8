//! Reduced PTP: a grandmaster that emits SYNC/ANNOUNCE on a schedule and a
//! client that only tracks whether it trusts its time source.
//!
//! Best-master selection is a `(priority, identity)` comparison. A second
//! master with equal or better priority is treated as a conflict and the
//! client drops to `Unsynced` rather than switching.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::Micros;
use crate::sv_codec::PTP_ETHERTYPE;

pub type ClockIdentity = [u8; 8];

/// Destination for PTP over Ethernet (non-peer-delay messages).
pub const PTP_MULTICAST_MAC: [u8; 6] = [0x01, 0x1B, 0x19, 0x00, 0x00, 0x00];

const BODY_LEN: usize = 21;
pub const PTP_FRAME_LEN: usize = 14 + BODY_LEN;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PtpMsgType {
    Sync,
    Announce,
}

impl PtpMsgType {
    fn wire(self) -> u8 {
        match self {
            PtpMsgType::Sync => 0x00,
            PtpMsgType::Announce => 0x0B,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PtpMessage {
    pub msg_type: PtpMsgType,
    pub grandmaster_id: ClockIdentity,
    /// Lower wins.
    pub priority: u8,
    pub seq: u16,
    pub origin_timestamp: Micros,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PtpError {
    #[error("not a PTP frame")]
    NotPtp,
    #[error("malformed PTP frame: {0}")]
    Malformed(&'static str),
}

impl PtpMessage {
    pub fn encode(&self, src_mac: [u8; 6]) -> Vec<u8> {
        let mut buf = Vec::with_capacity(PTP_FRAME_LEN);
        buf.extend_from_slice(&PTP_MULTICAST_MAC);
        buf.extend_from_slice(&src_mac);
        buf.extend_from_slice(&PTP_ETHERTYPE.to_be_bytes());
        buf.push(self.msg_type.wire());
        buf.push(0x02); // versionPTP
        buf.push(self.priority);
        buf.extend_from_slice(&self.grandmaster_id);
        buf.extend_from_slice(&self.seq.to_be_bytes());
        buf.extend_from_slice(&self.origin_timestamp.to_be_bytes());
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PtpError> {
        if bytes.len() < 14 || bytes[12..14] != PTP_ETHERTYPE.to_be_bytes() {
            return Err(PtpError::NotPtp);
        }
        if bytes.len() != PTP_FRAME_LEN {
            return Err(PtpError::Malformed("length"));
        }
        let b = &bytes[14..];
        let msg_type = match b[0] {
            0x00 => PtpMsgType::Sync,
            0x0B => PtpMsgType::Announce,
            _ => return Err(PtpError::Malformed("message type")),
        };
        if b[1] != 0x02 {
            return Err(PtpError::Malformed("version"));
        }
        let mut grandmaster_id = [0u8; 8];
        grandmaster_id.copy_from_slice(&b[3..11]);
        Ok(PtpMessage {
            msg_type,
            grandmaster_id,
            priority: b[2],
            seq: u16::from_be_bytes([b[11], b[12]]),
            origin_timestamp: u64::from_be_bytes(b[13..21].try_into().unwrap()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct GmConfig {
    /// Seconds between SYNC messages.
    pub sync_interval: f64,
    /// Seconds between ANNOUNCE messages.
    pub announce_interval: f64,
}

impl Default for GmConfig {
    fn default() -> Self {
        GmConfig {
            sync_interval: 1.0,
            announce_interval: 2.0,
        }
    }
}

impl GmConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.sync_interval > 0.0 && self.announce_interval > 0.0) {
            return Err("PTP intervals must be strictly positive".into());
        }
        Ok(())
    }
}

fn secs_to_us(s: f64) -> Micros {
    (s * 1e6).round() as Micros
}

#[derive(Debug, Clone)]
pub struct Grandmaster {
    pub id: ClockIdentity,
    pub priority: u8,
    config: GmConfig,
    sync_seq: u16,
    announce_seq: u16,
    next_sync: Micros,
    next_announce: Micros,
    last_sync: Option<Micros>,
}

impl Grandmaster {
    /// First SYNC and ANNOUNCE go out at `start`.
    pub fn new(id: ClockIdentity, priority: u8, config: GmConfig, start: Micros) -> Self {
        Grandmaster {
            id,
            priority,
            config,
            sync_seq: 0,
            announce_seq: 0,
            next_sync: start,
            next_announce: start,
            last_sync: None,
        }
    }

    pub fn config(&self) -> &GmConfig {
        &self.config
    }

    pub fn next_due(&self) -> Micros {
        self.next_sync.min(self.next_announce)
    }

    /// Applies a new schedule. The next SYNC is due one new interval after the
    /// previous one (or immediately if that is already past); the announce
    /// interval takes effect after the next ANNOUNCE.
    pub fn reconfigure(&mut self, config: GmConfig, now: Micros) {
        let sync_us = secs_to_us(config.sync_interval);
        self.next_sync = self.last_sync.map_or(now, |l| (l + sync_us).max(now));
        self.next_announce = self.next_announce.max(now);
        self.config = config;
    }

    /// Emits every message due at or before `t`.
    pub fn gm_tick(&mut self, t: Micros) -> Vec<PtpMessage> {
        let mut out = Vec::new();
        if t >= self.next_announce {
            out.push(PtpMessage {
                msg_type: PtpMsgType::Announce,
                grandmaster_id: self.id,
                priority: self.priority,
                seq: self.announce_seq,
                origin_timestamp: t,
            });
            self.announce_seq = self.announce_seq.wrapping_add(1);
            self.next_announce = t + secs_to_us(self.config.announce_interval);
        }
        if t >= self.next_sync {
            out.push(PtpMessage {
                msg_type: PtpMsgType::Sync,
                grandmaster_id: self.id,
                priority: self.priority,
                seq: self.sync_seq,
                origin_timestamp: t,
            });
            self.sync_seq = self.sync_seq.wrapping_add(1);
            self.last_sync = Some(t);
            self.next_sync = t + secs_to_us(self.config.sync_interval);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SyncStatus {
    Synced,
    Unsynced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MasterRef {
    pub id: ClockIdentity,
    pub priority: u8,
}

impl MasterRef {
    /// `(priority, identity)` ordering; smaller is better.
    pub fn rank(&self) -> (u8, ClockIdentity) {
        (self.priority, self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PtpClientState {
    pub status: SyncStatus,
    pub selected_master: Option<MasterRef>,
    pub last_sync: Option<Micros>,
    pub timeout_multiplier: u32,
    /// Expected SYNC interval.
    pub sync_interval_us: Micros,
    pub conflict_flag: bool,
    pub last_conflict: Option<Micros>,
}

impl PtpClientState {
    /// A client that has never heard a master.
    pub fn new(sync_interval_us: Micros, timeout_multiplier: u32) -> Self {
        PtpClientState {
            status: SyncStatus::Unsynced,
            selected_master: None,
            last_sync: None,
            timeout_multiplier,
            sync_interval_us,
            conflict_flag: false,
            last_conflict: None,
        }
    }

    /// A client already locked to `master` at time `t`.
    pub fn synced_to(master: MasterRef, t: Micros, sync_interval_us: Micros, timeout_multiplier: u32) -> Self {
        PtpClientState {
            status: SyncStatus::Synced,
            selected_master: Some(master),
            last_sync: Some(t),
            ..Self::new(sync_interval_us, timeout_multiplier)
        }
    }

    pub fn timeout_us(&self) -> Micros {
        self.timeout_multiplier as Micros * self.sync_interval_us
    }

    fn is_conflicting(&self, msg: &PtpMessage) -> bool {
        match self.selected_master {
            Some(sel) => msg.grandmaster_id != sel.id && msg.priority <= sel.priority,
            None => false,
        }
    }

    pub fn on_message(&self, msg: &PtpMessage, t: Micros) -> Self {
        let mut next = self.clone();
        let sender = MasterRef {
            id: msg.grandmaster_id,
            priority: msg.priority,
        };
        if self.is_conflicting(msg) {
            next.conflict_flag = true;
            next.last_conflict = Some(t);
            next.status = SyncStatus::Unsynced;
            return next;
        }
        match (msg.msg_type, self.selected_master) {
            (PtpMsgType::Announce, None) => {
                next.selected_master = Some(sender);
            }
            (PtpMsgType::Sync, Some(sel)) if sel.id == msg.grandmaster_id => {
                next.last_sync = Some(t);
                let conflict_recent = self
                    .last_conflict
                    .is_some_and(|c| t.saturating_sub(c) <= self.timeout_us());
                if self.conflict_flag && conflict_recent {
                    next.status = SyncStatus::Unsynced;
                } else {
                    next.conflict_flag = false;
                    next.status = SyncStatus::Synced;
                }
            }
            _ => {}
        }
        next
    }

    pub fn check_timeout(&self, t: Micros) -> Self {
        let mut next = self.clone();
        match self.last_sync {
            None => next.status = SyncStatus::Unsynced,
            Some(last) if t.saturating_sub(last) > self.timeout_us() => {
                next.status = SyncStatus::Unsynced
            }
            _ => {}
        }
        next
    }
}
