//! Desk-scale process bus testbed: an SV publisher, a protection relay, a
//! simplified PTP domain and four attacks against them, all running on a
//! deterministic discrete-event network.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack_engine;
pub mod fabric;
pub mod merging_unit;
pub mod ptp_sync;
pub mod relay;
pub mod scenario;
pub mod sv_codec;
pub mod waveform;

pub use attack_engine::{
    AttackLog, AttackWindow, ForceParams, MasqueradeParams, PtpAttackMode, PtpAttackParams,
    ReplayParams,
};
pub use fabric::{Fabric, FabricConfig, Micros, PortId};
pub use merging_unit::{MergingUnit, MuConfig};
pub use ptp_sync::{GmConfig, Grandmaster, PtpClientState, PtpMessage, SyncStatus};
pub use relay::{Relay, RelayEvent, RelayEventKind, RelaySettings};
pub use scenario::{AttackSpec, Expectation, Mode, RunReport, ScenarioConfig, ScenarioError};
pub use sv_codec::{Asdu, ScaleConvention, SmpSynch, SvFrame};
pub use waveform::{FaultKind, FaultSpec, Phase, SystemParams};
