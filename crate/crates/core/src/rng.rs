//! Counter-based random streams.
//!
//! Every random draw in the pipeline comes from a stream keyed by the run seed
//! plus a tuple of counters (epoch, step, sample, modality, pass, purpose).
//! Streams are independent of the order in which they are created, which is
//! what makes resumed runs and the dual-pass masks reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ParamInit = 1,
    EpochOrder = 2,
    FrameChoice = 3,
    ContrastiveMask = 4,
    ReconstructionMask = 5,
    Synthetic = 7,
    ReaderShuffle = 8,
    Probe = 9,
    Generic = 10,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Fold a seed and a list of counters into one 64-bit key.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = splitmix64(seed ^ 0x5447_4450_5f52_4e47);
    for &p in parts {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    h
}

/// A ChaCha stream keyed by `(seed, purpose, parts...)`.
pub fn stream(seed: u64, purpose: Purpose, parts: &[u64]) -> StreamRng {
    let mut key = Vec::with_capacity(parts.len() + 1);
    key.push(purpose as u64);
    key.extend_from_slice(parts);
    let mut h = mix(seed, &key);
    let mut bytes = [0u8; 32];
    for chunk in bytes.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Stable 64-bit hash of a string (FNV-1a), used to key per-parameter streams.
pub fn hash_str(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
