//! Counter-based uniform generator for dropout masks.
//!
//! Masks are a pure function of (key, element index), so they do not depend
//! on evaluation order or worker count. Keys are derived by folding a seed
//! with structural coordinates (layer id, call site, step).

/// SplitMix64 finalizer; full-avalanche 64-bit mix.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Fold another coordinate into a key.
#[inline]
pub fn fold(key: u64, v: u64) -> u64 {
    mix64(key ^ v.wrapping_mul(0xff51afd7ed558ccd).wrapping_add(0x2545f4914f6cdd1d))
}

/// Uniform f64 in [0, 1) for (key, index).
#[inline]
pub fn unit_f64(key: u64, index: u64) -> f64 {
    (mix64(key ^ mix64(index)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}
