//! Sampled Values frame codec.
//!
//! Frames use a fixed-offset, definite-length layout modelled on the
//! IEC 61850-9-2LE profile: one ASDU, eight INT32 + quality channels, no
//! VLAN tag and no optional ASDU fields. Every length byte uses the one-byte
//! long form (`0x81 LL`) so the total size depends only on the `svID`
//! length. See `docs/wire-format.md` for the byte map.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SV_ETHERTYPE: u16 = 0x88BA;
pub const PTP_ETHERTYPE: u16 = 0x88F7;

/// Nominal publishing rate; `smp_cnt` wraps at this value.
pub const SAMPLES_PER_SECOND: u16 = 4000;
pub const CHANNEL_COUNT: usize = 8;
pub const MAX_SV_ID_LEN: usize = 64;

const ETH_HEADER_LEN: usize = 14;
const SV_HEADER_LEN: usize = 8;
const SEQ_DATA_LEN: usize = CHANNEL_COUNT * 8;
/// ASDU content minus the svID bytes: svID TL (2) + smpCnt (4) + confRev (6)
/// + smpSynch (3) + seqData TL (2) + data.
const ASDU_FIXED_LEN: usize = 2 + 4 + 6 + 3 + 2 + SEQ_DATA_LEN;

const TAG_SAVPDU: u8 = 0x60;
const TAG_NO_ASDU: u8 = 0x80;
const TAG_SEQ_ASDU: u8 = 0xA2;
const TAG_ASDU: u8 = 0x30;
const TAG_SV_ID: u8 = 0x80;
const TAG_SMP_CNT: u8 = 0x82;
const TAG_CONF_REV: u8 = 0x83;
const TAG_SMP_SYNCH: u8 = 0x85;
const TAG_SEQ_DATA: u8 = 0x87;
const LONG_FORM_1: u8 = 0x81;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CodecError {
    #[error("not a sampled values frame (ethertype {0:#06x})")]
    NotSv(u16),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("invalid frame: {0}")]
    Invalid(String),
    #[error("{value} does not fit a 32-bit count (saturates at {saturated})")]
    Saturated { value: f64, saturated: i32 },
}

fn malformed(msg: impl Into<String>) -> CodecError {
    CodecError::Malformed(msg.into())
}

/// Publisher time-synchronisation status carried in `smpSynch`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, schemars::JsonSchema,
)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SmpSynch {
    None = 0,
    Local = 1,
    Global = 2,
}

impl SmpSynch {
    pub fn from_u8(raw: u8) -> Option<Self> {
        match raw {
            0 => Some(SmpSynch::None),
            1 => Some(SmpSynch::Local),
            2 => Some(SmpSynch::Global),
            _ => None,
        }
    }
}

/// Channel order inside `seqData`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Ia = 0,
    Ib = 1,
    Ic = 2,
    In = 3,
    Va = 4,
    Vb = 5,
    Vc = 6,
    Vn = 7,
}

impl Channel {
    pub fn is_current(self) -> bool {
        (self as usize) < 4
    }

    pub fn from_index(idx: usize) -> Self {
        [
            Channel::Ia,
            Channel::Ib,
            Channel::Ic,
            Channel::In,
            Channel::Va,
            Channel::Vb,
            Channel::Vc,
            Channel::Vn,
        ][idx]
    }
}

/// One measurement channel: the scaled count and its quality word (0 = good).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ChannelValue {
    pub value: i32,
    pub quality: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Asdu {
    pub sv_id: String,
    pub smp_cnt: u16,
    pub conf_rev: u32,
    pub smp_synch: SmpSynch,
    pub channels: Vec<ChannelValue>,
}

impl Asdu {
    pub fn values(&self) -> [i32; CHANNEL_COUNT] {
        let mut out = [0; CHANNEL_COUNT];
        for (o, c) in out.iter_mut().zip(&self.channels) {
            *o = c.value;
        }
        out
    }

    pub fn set_values(&mut self, values: &[i32; CHANNEL_COUNT]) {
        for (c, v) in self.channels.iter_mut().zip(values) {
            c.value = *v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvFrame {
    pub dst_mac: [u8; 6],
    pub src_mac: [u8; 6],
    pub appid: u16,
    pub asdu: Asdu,
}

impl SvFrame {
    pub fn ethertype(&self) -> u16 {
        SV_ETHERTYPE
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        if self.dst_mac[0] & 0x01 == 0 {
            return Err(CodecError::Invalid("destination MAC is not multicast".into()));
        }
        if self.asdu.sv_id.len() > MAX_SV_ID_LEN {
            return Err(CodecError::Invalid(format!(
                "svID is {} bytes, limit {MAX_SV_ID_LEN}",
                self.asdu.sv_id.len()
            )));
        }
        if self.asdu.smp_cnt >= SAMPLES_PER_SECOND {
            return Err(CodecError::Invalid(format!(
                "smpCnt {} out of range",
                self.asdu.smp_cnt
            )));
        }
        if self.asdu.channels.len() != CHANNEL_COUNT {
            return Err(CodecError::Invalid(format!(
                "expected {CHANNEL_COUNT} channels, got {}",
                self.asdu.channels.len()
            )));
        }
        Ok(())
    }
}

/// Encoded size of a frame whose svID is `sv_id_len` bytes long.
pub fn frame_len(sv_id_len: usize) -> usize {
    ETH_HEADER_LEN + SV_HEADER_LEN + 12 + ASDU_FIXED_LEN + sv_id_len
}

pub fn encode(frame: &SvFrame) -> Result<Vec<u8>, CodecError> {
    frame.validate()?;
    let asdu = &frame.asdu;
    let id = asdu.sv_id.as_bytes();
    let asdu_len = ASDU_FIXED_LEN + id.len();
    let seq_asdu_len = 3 + asdu_len;
    let pdu_len = 3 + 3 + seq_asdu_len;
    let apdu_len = SV_HEADER_LEN + 3 + pdu_len;

    let mut buf = Vec::with_capacity(frame_len(id.len()));
    buf.extend_from_slice(&frame.dst_mac);
    buf.extend_from_slice(&frame.src_mac);
    buf.extend_from_slice(&SV_ETHERTYPE.to_be_bytes());
    buf.extend_from_slice(&frame.appid.to_be_bytes());
    buf.extend_from_slice(&(apdu_len as u16).to_be_bytes());
    buf.extend_from_slice(&[0, 0, 0, 0]);

    buf.extend_from_slice(&[TAG_SAVPDU, LONG_FORM_1, pdu_len as u8]);
    buf.extend_from_slice(&[TAG_NO_ASDU, 0x01, 0x01]);
    buf.extend_from_slice(&[TAG_SEQ_ASDU, LONG_FORM_1, seq_asdu_len as u8]);
    buf.extend_from_slice(&[TAG_ASDU, LONG_FORM_1, asdu_len as u8]);
    buf.extend_from_slice(&[TAG_SV_ID, id.len() as u8]);
    buf.extend_from_slice(id);
    buf.extend_from_slice(&[TAG_SMP_CNT, 0x02]);
    buf.extend_from_slice(&asdu.smp_cnt.to_be_bytes());
    buf.extend_from_slice(&[TAG_CONF_REV, 0x04]);
    buf.extend_from_slice(&asdu.conf_rev.to_be_bytes());
    buf.extend_from_slice(&[TAG_SMP_SYNCH, 0x01, asdu.smp_synch as u8]);
    buf.extend_from_slice(&[TAG_SEQ_DATA, SEQ_DATA_LEN as u8]);
    for ch in &asdu.channels {
        buf.extend_from_slice(&ch.value.to_be_bytes());
        buf.extend_from_slice(&ch.quality.to_be_bytes());
    }
    debug_assert_eq!(buf.len(), frame_len(id.len()));
    Ok(buf)
}

/// Reads the ethertype of a raw Ethernet frame, if it has a full header.
pub fn ethertype_of(bytes: &[u8]) -> Option<u16> {
    bytes
        .get(12..14)
        .map(|b| u16::from_be_bytes([b[0], b[1]]))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CodecError> {
        let end = self.pos + n;
        let slice = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| malformed(format!("truncated at {what} (offset {})", self.pos)))?;
        self.pos = end;
        Ok(slice)
    }

    fn expect(&mut self, expected: &[u8], what: &str) -> Result<(), CodecError> {
        let at = self.pos;
        let got = self.take(expected.len(), what)?;
        if got != expected {
            return Err(malformed(format!(
                "bad {what} at offset {at}: expected {expected:02x?}, got {got:02x?}"
            )));
        }
        Ok(())
    }

    fn u16(&mut self, what: &str) -> Result<u16, CodecError> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CodecError> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<SvFrame, CodecError> {
    if bytes.len() < ETH_HEADER_LEN {
        return Err(malformed(format!("{} bytes is shorter than an Ethernet header", bytes.len())));
    }
    let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
    if ethertype != SV_ETHERTYPE {
        return Err(CodecError::NotSv(ethertype));
    }
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let mut dst_mac = [0u8; 6];
    dst_mac.copy_from_slice(cur.take(6, "destination MAC")?);
    let mut src_mac = [0u8; 6];
    src_mac.copy_from_slice(cur.take(6, "source MAC")?);
    cur.take(2, "ethertype")?;
    if dst_mac[0] & 0x01 == 0 {
        return Err(malformed("destination MAC is not multicast"));
    }

    let appid = cur.u16("APPID")?;
    let apdu_len = cur.u16("length")? as usize;
    cur.expect(&[0, 0, 0, 0], "reserved words")?;

    // The svID length determines every other length, so read it up front.
    const SV_ID_LEN_OFFSET: usize = ETH_HEADER_LEN + SV_HEADER_LEN + 12 + 1;
    let id_len = *bytes
        .get(SV_ID_LEN_OFFSET)
        .ok_or_else(|| malformed("truncated before svID"))? as usize;
    if id_len > MAX_SV_ID_LEN {
        return Err(malformed(format!("svID length {id_len} exceeds {MAX_SV_ID_LEN}")));
    }
    let expected_total = frame_len(id_len);
    if bytes.len() != expected_total {
        return Err(malformed(format!(
            "frame is {} bytes, layout requires {expected_total}",
            bytes.len()
        )));
    }
    if apdu_len != expected_total - ETH_HEADER_LEN {
        return Err(malformed(format!("APDU length field {apdu_len} inconsistent")));
    }

    let asdu_len = ASDU_FIXED_LEN + id_len;
    let seq_asdu_len = 3 + asdu_len;
    let pdu_len = 6 + seq_asdu_len;
    cur.expect(&[TAG_SAVPDU, LONG_FORM_1, pdu_len as u8], "savPdu header")?;
    cur.expect(&[TAG_NO_ASDU, 0x01, 0x01], "noASDU")?;
    cur.expect(&[TAG_SEQ_ASDU, LONG_FORM_1, seq_asdu_len as u8], "seqASDU header")?;
    cur.expect(&[TAG_ASDU, LONG_FORM_1, asdu_len as u8], "ASDU header")?;
    cur.expect(&[TAG_SV_ID, id_len as u8], "svID header")?;
    let sv_id = std::str::from_utf8(cur.take(id_len, "svID")?)
        .map_err(|_| malformed("svID is not UTF-8"))?
        .to_owned();
    cur.expect(&[TAG_SMP_CNT, 0x02], "smpCnt header")?;
    let smp_cnt = cur.u16("smpCnt")?;
    if smp_cnt >= SAMPLES_PER_SECOND {
        return Err(malformed(format!("smpCnt {smp_cnt} out of range")));
    }
    cur.expect(&[TAG_CONF_REV, 0x04], "confRev header")?;
    let conf_rev = cur.u32("confRev")?;
    cur.expect(&[TAG_SMP_SYNCH, 0x01], "smpSynch header")?;
    let raw_synch = cur.take(1, "smpSynch")?[0];
    let smp_synch = SmpSynch::from_u8(raw_synch)
        .ok_or_else(|| malformed(format!("smpSynch value {raw_synch}")))?;
    cur.expect(&[TAG_SEQ_DATA, SEQ_DATA_LEN as u8], "seqData header")?;
    let mut channels = Vec::with_capacity(CHANNEL_COUNT);
    for _ in 0..CHANNEL_COUNT {
        let value = cur.u32("channel value")? as i32;
        let quality = cur.u32("channel quality")?;
        channels.push(ChannelValue { value, quality });
    }

    Ok(SvFrame {
        dst_mac,
        src_mac,
        appid,
        asdu: Asdu {
            sv_id,
            smp_cnt,
            conf_rev,
            smp_synch,
            channels,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantityKind {
    Current,
    Voltage,
}

/// Physical units per count for currents and voltages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleConvention {
    pub current_scale: f64,
    pub voltage_scale: f64,
}

impl Default for ScaleConvention {
    fn default() -> Self {
        ScaleConvention {
            current_scale: 0.001,
            voltage_scale: 0.01,
        }
    }
}

impl ScaleConvention {
    pub fn new(current_scale: f64, voltage_scale: f64) -> Result<Self, CodecError> {
        if !(current_scale > 0.0 && voltage_scale > 0.0) {
            return Err(CodecError::Invalid("scales must be strictly positive".into()));
        }
        Ok(ScaleConvention {
            current_scale,
            voltage_scale,
        })
    }

    pub fn scale(&self, kind: QuantityKind) -> f64 {
        match kind {
            QuantityKind::Current => self.current_scale,
            QuantityKind::Voltage => self.voltage_scale,
        }
    }

    /// Rounds half away from zero; out-of-range values report the saturated count.
    pub fn quantize(&self, value: f64, kind: QuantityKind) -> Result<i32, CodecError> {
        let counts = (value / self.scale(kind)).round();
        if counts.is_nan() {
            return Err(CodecError::Saturated {
                value,
                saturated: 0,
            });
        }
        if counts > i32::MAX as f64 {
            return Err(CodecError::Saturated {
                value,
                saturated: i32::MAX,
            });
        }
        if counts < i32::MIN as f64 {
            return Err(CodecError::Saturated {
                value,
                saturated: i32::MIN,
            });
        }
        Ok(counts as i32)
    }

    /// Like [`quantize`](Self::quantize) but clamps instead of failing.
    pub fn quantize_saturating(&self, value: f64, kind: QuantityKind) -> i32 {
        match self.quantize(value, kind) {
            Ok(c) => c,
            Err(CodecError::Saturated { saturated, .. }) => saturated,
            Err(_) => 0,
        }
    }

    pub fn dequantize(&self, count: i32, kind: QuantityKind) -> f64 {
        count as f64 * self.scale(kind)
    }

    pub fn channel_kind(channel: usize) -> QuantityKind {
        if Channel::from_index(channel).is_current() {
            QuantityKind::Current
        } else {
            QuantityKind::Voltage
        }
    }

    pub fn dequantize_all(&self, counts: &[i32; CHANNEL_COUNT]) -> [f64; CHANNEL_COUNT] {
        let mut out = [0.0; CHANNEL_COUNT];
        for (i, (o, c)) in out.iter_mut().zip(counts).enumerate() {
            *o = self.dequantize(*c, Self::channel_kind(i));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample_frame() -> SvFrame {
        SvFrame {
            dst_mac: [0x01, 0x0C, 0xCD, 0x04, 0x00, 0x01],
            src_mac: [0x00, 0x1A, 0x11, 0x00, 0x00, 0x01],
            appid: 0x4000,
            asdu: Asdu {
                sv_id: "MU01".into(),
                smp_cnt: 17,
                conf_rev: 1,
                smp_synch: SmpSynch::Global,
                channels: (0..8)
                    .map(|i| ChannelValue {
                        value: i * 1000 - 3000,
                        quality: 0,
                    })
                    .collect(),
            },
        }
    }

    #[test]
    fn zero_channels_encode_as_zero_counts() {
        let mut f = sample_frame();
        for c in &mut f.asdu.channels {
            *c = ChannelValue::default();
        }
        let bytes = encode(&f).unwrap();
        let data = &bytes[bytes.len() - SEQ_DATA_LEN..];
        assert!(data.iter().all(|b| *b == 0));
    }

    #[test]
    fn round_trip_and_length() {
        let f = sample_frame();
        let bytes = encode(&f).unwrap();
        assert_eq!(bytes.len(), frame_len(4));
        assert_eq!(bytes.len(), 119);
        assert_eq!(decode(&bytes).unwrap(), f);
    }

    #[test]
    fn rejects_out_of_range_counter() {
        let mut f = sample_frame();
        f.asdu.smp_cnt = 4000;
        assert!(matches!(encode(&f), Err(CodecError::Invalid(_))));

        // Patch a valid encoding so the decoder sees the bad counter.
        f.asdu.smp_cnt = 3999;
        let mut bytes = encode(&f).unwrap();
        let off = ETH_HEADER_LEN + SV_HEADER_LEN + 12 + 2 + 4 + 2;
        assert_eq!(&bytes[off..off + 2], &3999u16.to_be_bytes());
        bytes[off..off + 2].copy_from_slice(&4000u16.to_be_bytes());
        assert!(matches!(decode(&bytes), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut f = sample_frame();
        f.asdu.channels.pop();
        assert!(encode(&f).is_err());
    }

    #[test]
    fn ptp_ethertype_is_not_sv() {
        let mut bytes = encode(&sample_frame()).unwrap();
        bytes[12..14].copy_from_slice(&PTP_ETHERTYPE.to_be_bytes());
        assert_eq!(decode(&bytes), Err(CodecError::NotSv(0x88F7)));
    }

    #[test]
    fn empty_and_truncated_are_malformed() {
        assert!(matches!(decode(&[]), Err(CodecError::Malformed(_))));
        let bytes = encode(&sample_frame()).unwrap();
        for cut in [13, 14, 30, bytes.len() - 1] {
            assert!(
                matches!(decode(&bytes[..cut]), Err(CodecError::Malformed(_))),
                "cut at {cut}"
            );
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(CodecError::Malformed(_))));
    }

    #[test]
    fn unicast_destination_rejected() {
        let mut f = sample_frame();
        f.dst_mac[0] = 0x00;
        assert!(encode(&f).is_err());
        let mut bytes = encode(&sample_frame()).unwrap();
        bytes[0] = 0x00;
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn quantize_examples() {
        let s = ScaleConvention::default();
        assert_eq!(s.quantize(0.370, QuantityKind::Current).unwrap(), 370);
        assert_eq!(s.quantize(83.0, QuantityKind::Voltage).unwrap(), 8300);
        assert_eq!(s.quantize(0.0, QuantityKind::Current).unwrap(), 0);
        assert_eq!(s.quantize(0.0, QuantityKind::Voltage).unwrap(), 0);
        assert_eq!(s.quantize(-0.0005, QuantityKind::Current).unwrap(), -1);
        assert_eq!(s.quantize(0.0005, QuantityKind::Current).unwrap(), 1);
    }

    #[test]
    fn quantize_saturates() {
        let s = ScaleConvention::default();
        assert_eq!(
            s.quantize(1e9, QuantityKind::Current),
            Err(CodecError::Saturated {
                value: 1e9,
                saturated: i32::MAX
            })
        );
        assert_eq!(s.quantize_saturating(-1e9, QuantityKind::Current), i32::MIN);
        assert!(ScaleConvention::new(0.0, 0.01).is_err());
    }
}
