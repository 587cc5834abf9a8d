use super::FlowKey;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seeded 64-bit hash of the canonical 5-tuple encoding.
pub fn flow_hash(key: &FlowKey, seed: u64) -> u64 {
    let b = key.canonical_bytes();
    let mut w0 = [0u8; 8];
    w0.copy_from_slice(&b[0..8]);
    let mut w1 = [0u8; 8];
    w1[3..8].copy_from_slice(&b[8..13]);
    let mut h = mix(seed.wrapping_add(GOLDEN));
    h = mix(h ^ u64::from_be_bytes(w0));
    mix(h.wrapping_add(GOLDEN) ^ u64::from_be_bytes(w1))
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Maps `hash` to an index of `weights`. The hash is reduced modulo the
/// gcd-normalized total weight and the index owning that interval is chosen.
/// Zero weights own no interval. Returns `None` when every weight is zero.
pub fn select_weighted(hash: u64, weights: &[u32]) -> Option<usize> {
    let g = weights
        .iter()
        .map(|&w| u64::from(w))
        .fold(0, gcd);
    if g == 0 {
        return None;
    }
    let total: u64 = weights.iter().map(|&w| u64::from(w) / g).sum();
    let mut r = hash % total;
    for (i, &w) in weights.iter().enumerate() {
        let span = u64::from(w) / g;
        if r < span {
            return Some(i);
        }
        r -= span;
    }
    unreachable!("r < total by construction")
}
