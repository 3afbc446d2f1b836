//! Small shared helpers.

/// SplitMix64 step, used to derive independent seeds from a base seed.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Deterministically combine seed components into one stream seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x51a7_3c0f_9e24_6d81u64;
    for &p in parts {
        acc = splitmix64(acc ^ p);
    }
    acc
}
