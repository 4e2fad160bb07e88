//! Deterministic RNG stream derivation.
//!
//! Every random draw in the system comes from a stream addressed by
//! (master seed, purpose, index), so results do not depend on batch
//! size, thread count or evaluation order.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Purpose tags for derived streams.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    /// Network weight and codebook initialization.
    Init,
    /// Training episode `index`: UE position, channel, noise.
    TrainEpisode,
    /// Held-out validation episode `index`.
    ValEpisode,
    /// Evaluation episode `index`.
    EvalEpisode,
    /// Random codeword draws of the random-sensing baseline.
    BaselineDraw,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Init => 0x01,
            Stream::TrainEpisode => 0x02,
            Stream::ValEpisode => 0x03,
            Stream::EvalEpisode => 0x04,
            Stream::BaselineDraw => 0x05,
        }
    }
}

/// splitmix64 finalizer; decorrelates nearby (seed, index) pairs.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// RNG for one (seed, stream, index) address.
pub fn derive_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&mix(seed).to_le_bytes());
    key[8..16].copy_from_slice(&mix(stream.tag()).to_le_bytes());
    key[16..24].copy_from_slice(&mix(index).to_le_bytes());
    key[24..32].copy_from_slice(&mix(seed ^ index.rotate_left(17)).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
