//! Emulated merging unit.
//!
//! Samples the analog source once per tick, publishes one SV frame, and keeps
//! an independent overcurrent/undervoltage flag computed from the raw analog
//! samples (never from SV bytes). The flag is what the relay receives on the
//! hardwired binary channel.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fabric::Micros;
use crate::ptp_sync::{PtpClientState, PtpMessage, SyncStatus};
use crate::sv_codec::{
    Asdu, ChannelValue, QuantityKind, ScaleConvention, SmpSynch, SvFrame, CHANNEL_COUNT,
    SAMPLES_PER_SECOND,
};
use crate::waveform::{self, AnalogSample, FaultSpec, SystemParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MuError {
    #[error("invalid merging unit config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct BinaryChannelConfig {
    /// A secondary RMS, any phase.
    pub overcurrent_threshold: f64,
    /// V secondary RMS, any phase.
    pub undervoltage_threshold: f64,
    /// Samples in the sliding RMS window.
    pub window: usize,
    /// Transport delay of the hardwired channel, µs.
    pub delay_us: Micros,
}

impl Default for BinaryChannelConfig {
    fn default() -> Self {
        BinaryChannelConfig {
            overcurrent_threshold: 1.0,
            undervoltage_threshold: 30.0,
            window: 80,
            delay_us: 500,
        }
    }
}

/// Gaussian noise added to the analog signal before quantisation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct AnalogNoise {
    pub current_std: f64,
    pub voltage_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct MuConfig {
    pub sv_id: String,
    pub appid: u16,
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    pub conf_rev: u32,
    pub sample_rate: u32,
    pub binary_channel: BinaryChannelConfig,
    /// Restart `smp_cnt` at 0 when synchronisation is lost.
    pub reset_smp_cnt_on_sync_loss: bool,
    pub noise: AnalogNoise,
}

impl Default for MuConfig {
    fn default() -> Self {
        MuConfig {
            sv_id: "BAY67_MU01".into(),
            appid: 0x4000,
            dst_mac: [0x01, 0x0C, 0xCD, 0x04, 0x00, 0x01],
            src_mac: [0x00, 0x1A, 0x11, 0x00, 0x00, 0x01],
            conf_rev: 1,
            sample_rate: SAMPLES_PER_SECOND as u32,
            binary_channel: BinaryChannelConfig::default(),
            reset_smp_cnt_on_sync_loss: false,
            noise: AnalogNoise::default(),
        }
    }
}

impl MuConfig {
    pub fn validate(&self, params: &SystemParams) -> Result<(), MuError> {
        if self.sample_rate != params.sample_rate {
            return Err(MuError::Invalid(format!(
                "sample_rate {} does not match system sample_rate {}",
                self.sample_rate, params.sample_rate
            )));
        }
        if self.sample_rate != SAMPLES_PER_SECOND as u32 {
            return Err(MuError::Invalid(format!(
                "only {SAMPLES_PER_SECOND} samples/s is supported"
            )));
        }
        if self.sv_id.len() > crate::sv_codec::MAX_SV_ID_LEN {
            return Err(MuError::Invalid("sv_id longer than 64 bytes".into()));
        }
        if self.dst_mac[0] & 1 == 0 {
            return Err(MuError::Invalid("dst_mac must be multicast".into()));
        }
        let bc = &self.binary_channel;
        if bc.window == 0 || !(bc.overcurrent_threshold > 0.0 && bc.undervoltage_threshold > 0.0) {
            return Err(MuError::Invalid(
                "binary channel thresholds and window must be positive".into(),
            ));
        }
        if self.noise.current_std < 0.0 || self.noise.voltage_std < 0.0 {
            return Err(MuError::Invalid("noise must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MuState {
    pub smp_cnt: u16,
    pub sync: SmpSynch,
    pub binary_flag: bool,
}

/// Result of one publishing tick.
#[derive(Debug, Clone)]
pub struct TickOutput {
    pub frame: SvFrame,
    /// Analog values the frame was quantised from.
    pub analog: AnalogSample,
    pub sync_changed: Option<SmpSynch>,
    pub binary_changed: Option<bool>,
}

pub struct MergingUnit {
    config: MuConfig,
    params: SystemParams,
    fault: FaultSpec,
    scale: ScaleConvention,
    state: MuState,
    ptp: Option<PtpClientState>,
    window: VecDeque<AnalogSample>,
    noise: Option<(Normal<f64>, Normal<f64>, ChaCha8Rng)>,
}

impl MergingUnit {
    pub fn new(
        config: MuConfig,
        params: SystemParams,
        fault: FaultSpec,
        ptp: Option<PtpClientState>,
        seed: u64,
    ) -> Result<Self, MuError> {
        config.validate(&params)?;
        let sync = match &ptp {
            Some(c) if c.status == SyncStatus::Synced => SmpSynch::Global,
            Some(_) => SmpSynch::None,
            None => SmpSynch::Global,
        };
        let n = &config.noise;
        let noise = if n.current_std > 0.0 || n.voltage_std > 0.0 {
            Some((
                Normal::new(0.0, n.current_std).map_err(|e| MuError::Invalid(e.to_string()))?,
                Normal::new(0.0, n.voltage_std).map_err(|e| MuError::Invalid(e.to_string()))?,
                ChaCha8Rng::seed_from_u64(seed),
            ))
        } else {
            None
        };
        let window = VecDeque::with_capacity(config.binary_channel.window);
        Ok(MergingUnit {
            config,
            params,
            fault,
            scale: ScaleConvention::default(),
            state: MuState {
                smp_cnt: 0,
                sync,
                binary_flag: false,
            },
            ptp,
            window,
            noise,
        })
    }

    pub fn config(&self) -> &MuConfig {
        &self.config
    }

    pub fn state(&self) -> MuState {
        self.state
    }

    pub fn ptp_state(&self) -> Option<&PtpClientState> {
        self.ptp.as_ref()
    }

    pub fn fault(&self) -> &FaultSpec {
        &self.fault
    }

    pub fn binary_flag(&self) -> bool {
        self.state.binary_flag
    }

    /// Ends an active fault at `t` seconds (breaker opened by a trip).
    pub fn clear_fault_at(&mut self, t: f64) {
        if self.fault.is_active(t) && t > self.fault.onset {
            self.fault.clear = Some(t);
        }
    }

    /// Sets the `smpSynch` value for subsequent frames; returns true on change.
    pub fn set_sync(&mut self, status: SmpSynch) -> bool {
        if self.state.sync == status {
            return false;
        }
        if status == SmpSynch::None && self.config.reset_smp_cnt_on_sync_loss {
            self.state.smp_cnt = 0;
        }
        self.state.sync = status;
        true
    }

    fn sync_from_ptp(&mut self) -> Option<SmpSynch> {
        let status = self.ptp.as_ref()?.status;
        let synch = match status {
            SyncStatus::Synced => SmpSynch::Global,
            SyncStatus::Unsynced => SmpSynch::None,
        };
        self.set_sync(synch).then_some(synch)
    }

    /// Feeds a PTP message to the unit's clock client.
    pub fn on_ptp(&mut self, msg: &PtpMessage, t: Micros) -> Option<SmpSynch> {
        let client = self.ptp.as_mut()?;
        *client = client.on_message(msg, t);
        self.sync_from_ptp()
    }

    fn analog(&mut self, t: f64) -> AnalogSample {
        let mut s = waveform::sample(&self.params, &self.fault, t);
        if let Some((ni, nv, rng)) = &mut self.noise {
            for p in 0..3 {
                s.i[p] += ni.sample(rng);
                s.v[p] += nv.sample(rng);
            }
        }
        s
    }

    fn update_binary(&mut self, s: AnalogSample) -> Option<bool> {
        let bc = &self.config.binary_channel;
        if self.window.len() == bc.window {
            self.window.pop_front();
        }
        self.window.push_back(s);
        let flag = if self.window.len() < bc.window {
            false
        } else {
            (0..3).any(|p| {
                let i: Vec<f64> = self.window.iter().map(|s| s.i[p]).collect();
                let v: Vec<f64> = self.window.iter().map(|s| s.v[p]).collect();
                let i_rms = waveform::rms(&i).unwrap_or(0.0);
                let v_rms = waveform::rms(&v).unwrap_or(0.0);
                i_rms > bc.overcurrent_threshold || v_rms < bc.undervoltage_threshold
            })
        };
        if flag != self.state.binary_flag {
            self.state.binary_flag = flag;
            Some(flag)
        } else {
            None
        }
    }

    fn quantize(&self, s: &AnalogSample) -> [i32; CHANNEL_COUNT] {
        let q = |v: f64, k| self.scale.quantize_saturating(v, k);
        let (cur, vol) = (QuantityKind::Current, QuantityKind::Voltage);
        [
            q(s.i[0], cur),
            q(s.i[1], cur),
            q(s.i[2], cur),
            q(s.i[0] + s.i[1] + s.i[2], cur),
            q(s.v[0], vol),
            q(s.v[1], vol),
            q(s.v[2], vol),
            q(s.v[0] + s.v[1] + s.v[2], vol),
        ]
    }

    /// Samples at virtual time `t_us` and builds the frame to publish.
    pub fn tick(&mut self, t_us: Micros) -> TickOutput {
        let t = t_us as f64 / 1e6;
        if let Some(c) = self.ptp.as_mut() {
            *c = c.check_timeout(t_us);
        }
        let sync_changed = self.sync_from_ptp();
        let analog = self.analog(t);
        let binary_changed = self.update_binary(analog);
        let counts = self.quantize(&analog);
        let frame = SvFrame {
            dst_mac: self.config.dst_mac,
            src_mac: self.config.src_mac,
            appid: self.config.appid,
            asdu: Asdu {
                sv_id: self.config.sv_id.clone(),
                smp_cnt: self.state.smp_cnt,
                conf_rev: self.config.conf_rev,
                smp_synch: self.state.sync,
                channels: counts
                    .iter()
                    .map(|v| ChannelValue {
                        value: *v,
                        quality: 0,
                    })
                    .collect(),
            },
        };
        self.state.smp_cnt = (self.state.smp_cnt + 1) % SAMPLES_PER_SECOND;
        TickOutput {
            frame,
            analog,
            sync_changed,
            binary_changed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ptp_sync::{MasterRef, PtpMsgType};

    const PERIOD: Micros = 250;

    fn mu(fault: FaultSpec, ptp: Option<PtpClientState>) -> MergingUnit {
        MergingUnit::new(MuConfig::default(), SystemParams::default(), fault, ptp, 7).unwrap()
    }

    fn gm() -> MasterRef {
        MasterRef {
            id: [0, 0, 0, 0, 0, 0, 0, 1],
            priority: 128,
        }
    }

    #[test]
    fn counter_wraps_after_4000_ticks() {
        let mut m = mu(FaultSpec::none(), None);
        let cnts: Vec<u16> = (0..4001).map(|k| m.tick(k * PERIOD).frame.asdu.smp_cnt).collect();
        assert_eq!(cnts[..4000], (0..4000).collect::<Vec<_>>()[..]);
        assert_eq!(cnts[4000], 0);
    }

    #[test]
    fn fault_peak_counts() {
        let mut m = mu(FaultSpec::three_phase(0.1), None);
        // Sample 420 is t = 0.105 s, a phase-A peak inside the fault.
        let mut out = None;
        for k in 0..=420 {
            out = Some(m.tick(k * PERIOD));
        }
        let vals = out.unwrap().frame.asdu.values();
        assert_eq!(vals[0], 22_000);
        assert_eq!(vals[4], 500);
    }

    #[test]
    fn unsynced_client_marks_none() {
        let stale = PtpClientState::synced_to(gm(), 0, 1_000_000, 3);
        let mut m = mu(FaultSpec::none(), Some(stale));
        assert_eq!(m.tick(0).frame.asdu.smp_synch, SmpSynch::Global);
        let out = m.tick(3_000_250);
        assert_eq!(out.frame.asdu.smp_synch, SmpSynch::None);
        assert_eq!(out.sync_changed, Some(SmpSynch::None));

        let never = PtpClientState::new(1_000_000, 3);
        assert_eq!(mu(FaultSpec::none(), Some(never)).tick(0).frame.asdu.smp_synch, SmpSynch::None);
    }

    #[test]
    fn recovery_returns_to_global() {
        let client = PtpClientState::synced_to(gm(), 0, 1_000_000, 3);
        let mut m = mu(FaultSpec::none(), Some(client));
        m.tick(4_000_000);
        assert_eq!(m.state().sync, SmpSynch::None);
        let sync = PtpMessage {
            msg_type: PtpMsgType::Sync,
            grandmaster_id: gm().id,
            priority: 128,
            seq: 9,
            origin_timestamp: 4_100_000,
        };
        assert_eq!(m.on_ptp(&sync, 4_100_000), Some(SmpSynch::Global));
        assert_eq!(m.tick(4_100_250).frame.asdu.smp_synch, SmpSynch::Global);
    }

    #[test]
    fn set_sync_transitions() {
        let mut m = mu(FaultSpec::none(), None);
        assert!(m.set_sync(SmpSynch::None));
        assert!(!m.set_sync(SmpSynch::None));
        assert_eq!(m.tick(0).frame.asdu.smp_synch, SmpSynch::None);
        assert!(m.set_sync(SmpSynch::Global));
        assert_eq!(m.tick(PERIOD).frame.asdu.smp_synch, SmpSynch::Global);
    }

    #[test]
    fn optional_counter_reset_on_sync_loss() {
        let cfg = MuConfig {
            reset_smp_cnt_on_sync_loss: true,
            ..MuConfig::default()
        };
        let mut m = MergingUnit::new(cfg, SystemParams::default(), FaultSpec::none(), None, 0).unwrap();
        for k in 0..10 {
            m.tick(k * PERIOD);
        }
        m.set_sync(SmpSynch::None);
        assert_eq!(m.tick(10 * PERIOD).frame.asdu.smp_cnt, 0);
        // Without the flag the counter keeps running.
        let mut m = mu(FaultSpec::none(), None);
        for k in 0..10 {
            m.tick(k * PERIOD);
        }
        m.set_sync(SmpSynch::None);
        assert_eq!(m.tick(10 * PERIOD).frame.asdu.smp_cnt, 10);
    }

    #[test]
    fn binary_flag_nominal_and_fault() {
        let mut m = mu(FaultSpec::three_phase(0.1), None);
        for k in 0..400 {
            m.tick(k * PERIOD);
            assert!(!m.binary_flag(), "nominal tick {k}");
        }
        // One full cycle into the fault the window RMS is 22/√2 ≈ 15.6 A.
        for k in 400..480 {
            m.tick(k * PERIOD);
        }
        assert!(m.binary_flag());
    }

    #[test]
    fn rejects_mismatched_rate() {
        let params = SystemParams {
            sample_rate: 4800,
            frequency: 60.0,
            ..SystemParams::default()
        };
        assert!(MergingUnit::new(MuConfig::default(), params, FaultSpec::none(), None, 0).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        let cfg = MuConfig {
            noise: AnalogNoise {
                current_std: 0.01,
                voltage_std: 0.5,
            },
            ..MuConfig::default()
        };
        let run = |seed| {
            let mut m =
                MergingUnit::new(cfg.clone(), SystemParams::default(), FaultSpec::none(), None, seed).unwrap();
            (0..50).map(|k| m.tick(k * PERIOD).frame.asdu.values()).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(1));
        assert_ne!(run(1), run(2));
    }
}
