//! Deterministic random streams.
//!
//! Every stochastic operation takes an explicit `&mut Rng`. The generator is
//! ChaCha with 12 rounds, which produces the same sequence on every platform
//! for a given seed. Independent substreams are obtained by selecting a
//! ChaCha stream id derived from a text label, so consuming draws from one
//! substream never shifts the sequence of another.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub type Rng = ChaCha12Rng;

/// Create the root stream for `seed`.
pub fn make_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Create the substream of `seed` identified by `label`.
pub fn substream(seed: u64, label: &str) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(label_id(label));
    rng
}

/// Create the substream of `seed` identified by `label` and a numeric index.
pub fn indexed_substream(seed: u64, label: &str, index: u64) -> Rng {
    let mut rng = Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(label_id(label) ^ splitmix64(index)));
    rng
}

/// Derive a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ label_id(label))
}

// FNV-1a, then one splitmix round to spread short labels.
fn label_id(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(h)
}

pub(crate) fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
