#![allow(dead_code)]

use bayguard::sv_codec::{Asdu, ChannelValue, SmpSynch, SvFrame, CHANNEL_COUNT, SAMPLES_PER_SECOND};
use proptest::prelude::*;

pub const LINK_LATENCY_US: u64 = 5;
pub const FRAME_PERIOD_US: u64 = 250;

pub fn arb_synch() -> impl Strategy<Value = SmpSynch> {
    prop_oneof![Just(SmpSynch::None), Just(SmpSynch::Local), Just(SmpSynch::Global)]
}

pub fn arb_frame() -> impl Strategy<Value = SvFrame> {
    (
        any::<[u8; 6]>(),
        any::<[u8; 6]>(),
        any::<u16>(),
        proptest::string::string_regex("[ -~]{0,64}").unwrap(),
        0..SAMPLES_PER_SECOND,
        any::<u32>(),
        arb_synch(),
        proptest::collection::vec((any::<i32>(), any::<u32>()), CHANNEL_COUNT),
    )
        .prop_map(|(mut dst, src, appid, sv_id, smp_cnt, conf_rev, smp_synch, ch)| {
            dst[0] |= 0x01;
            SvFrame {
                dst_mac: dst,
                src_mac: src,
                appid,
                asdu: Asdu {
                    sv_id,
                    smp_cnt,
                    conf_rev,
                    smp_synch,
                    channels: ch
                        .into_iter()
                        .map(|(value, quality)| ChannelValue { value, quality })
                        .collect(),
                },
            }
        })
}

/// Offsets of fixed tag and length bytes for an svID of `n` bytes.
pub fn fixed_offsets(n: usize) -> Vec<usize> {
    let mut v = vec![22, 23, 24, 25, 26, 27, 28, 29, 30, 31, 32, 33, 34];
    v.extend([36 + n, 37 + n, 40 + n, 41 + n, 46 + n, 47 + n, 49 + n, 50 + n]);
    v
}

/// One corrupted copy of `bytes` per malformed-input class.
pub fn malformed_variants(bytes: &[u8], id_len: usize) -> Vec<(&'static str, Vec<u8>)> {
    let mut out = Vec::new();
    let edit = |f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.to_vec();
        f(&mut b);
        b
    };
    out.push(("empty", Vec::new()));
    out.push(("header only", bytes[..14].to_vec()));
    out.push(("truncated by one", bytes[..bytes.len() - 1].to_vec()));
    out.push(("trailing byte", edit(&|b| b.push(0))));
    out.push(("foreign ethertype", edit(&|b| b[12..14].copy_from_slice(&[0x08, 0x00]))));
    out.push(("unicast destination", edit(&|b| b[0] &= 0xFE)));
    out.push(("reserved word set", edit(&|b| b[19] = 1)));
    out.push(("length field", edit(&|b| b[17] ^= 0x01)));
    for at in fixed_offsets(id_len) {
        out.push(("tag or inner length", edit(&|b| b[at] ^= 0x10)));
    }
    out.push(("svID length over 64", edit(&|b| b[35] = 65)));
    out.push(("svID length mismatch", edit(&|b| b[35] = b[35].wrapping_add(1))));
    let cnt = 38 + id_len;
    out.push(("smpCnt 4000", edit(&|b| b[cnt..cnt + 2].copy_from_slice(&4000u16.to_be_bytes()))));
    out.push(("smpCnt max", edit(&|b| b[cnt..cnt + 2].copy_from_slice(&[0xFF, 0xFF]))));
    out.push(("smpSynch 3", edit(&|b| b[48 + id_len] = 3)));
    if id_len > 0 {
        out.push(("svID not UTF-8", edit(&|b| b[36] = 0xFF)));
    }
    out
}

/// Raw channel counts read at fixed offsets, bypassing the decoder.
pub fn raw_counts(bytes: &[u8]) -> [i32; CHANNEL_COUNT] {
    let n = bytes[35] as usize;
    let base = 51 + n;
    std::array::from_fn(|c| {
        let at = base + 8 * c;
        i32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
    })
}

pub fn raw_smp_cnt(bytes: &[u8]) -> u16 {
    let at = 38 + bytes[35] as usize;
    u16::from_be_bytes([bytes[at], bytes[at + 1]])
}

pub fn raw_smp_synch(bytes: &[u8]) -> u8 {
    bytes[48 + bytes[35] as usize]
}

pub fn raw_sv_id(bytes: &[u8]) -> &[u8] {
    &bytes[36..36 + bytes[35] as usize]
}
