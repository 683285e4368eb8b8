//! Fixtures shared by the benchmarks.

use bayguard::merging_unit::{MergingUnit, MuConfig};
use bayguard::{FaultSpec, SvFrame, SystemParams};

/// `n` consecutive frames from a healthy merging unit.
pub fn nominal_frames(n: usize) -> Vec<SvFrame> {
    let mut mu = MergingUnit::new(MuConfig::default(), SystemParams::default(), FaultSpec::none(), None, 0)
        .expect("default MU config is valid");
    (0..n as u64).map(|k| mu.tick(k * 250).frame).collect()
}
