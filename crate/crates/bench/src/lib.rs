//! Shared fixtures for the criterion benchmarks.

use dwc_core::FeatureMap;

/// Deterministic pseudo-random feature map (no RNG dependency needed).
pub fn fixture_map(channels: usize, side: usize, salt: u32) -> FeatureMap {
    let n = channels * side * side * side;
    let data = (0..n as u32)
        .map(|i| {
            let x = i.wrapping_mul(2_654_435_761).wrapping_add(salt.wrapping_mul(40_503));
            (x >> 8) as f32 / (1u32 << 24) as f32 - 0.5
        })
        .collect();
    FeatureMap::new(data, channels, [side; 3]).expect("fixture shape")
}
