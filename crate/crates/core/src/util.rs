//! Small internal helpers shared across modules.

/// 64-bit FNV-1a over a byte slice.
///
/// Used to fingerprint weight tables and canonical config JSON. The hash is
/// stable across platforms and runs, which is all the reports need; it is not
/// meant to resist adversarial collisions.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Mean of a slice; 0.0 for an empty slice.
pub(crate) fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Half-width of a normal-approximation 95% confidence interval on the mean.
///
/// Uses the sample standard deviation (n - 1 denominator). Returns 0.0 when
/// fewer than two samples are available or when all samples coincide.
pub(crate) fn ci95_half_width(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    1.96 * (var / n as f64).sqrt()
}
