//! Counter-based random substreams.
//!
//! Every random draw in the pipeline comes from a ChaCha stream whose seed is
//! a hash of a [`StreamKey`]. Two keys that differ in any field give
//! independent streams, so per-episode work can run in any order (or in
//! parallel) and still reproduce bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags that keep unrelated consumers of one seed apart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Stream {
    Split = 1,
    Synthetic = 2,
    Init = 3,
    Shuffle = 4,
    StrongView = 5,
    PositiveView = 6,
    Evaluation = 7,
    Discriminator = 8,
    Dropout = 9,
    Trials = 10,
    CstRandom = 11,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub stream: Stream,
    pub episode: u64,
    pub kind: u64,
    pub counter: u64,
}

impl StreamKey {
    pub fn new(seed: u64, stream: Stream) -> Self {
        Self {
            seed,
            stream,
            episode: 0,
            kind: 0,
            counter: 0,
        }
    }

    pub fn episode(mut self, episode: u64) -> Self {
        self.episode = episode;
        self
    }

    pub fn kind(mut self, kind: u64) -> Self {
        self.kind = kind;
        self
    }

    pub fn counter(mut self, counter: u64) -> Self {
        self.counter = counter;
        self
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        let words = [
            self.seed,
            self.stream as u64,
            self.episode,
            self.kind,
            self.counter,
        ];
        let mut state = 0x243F_6A88_85A3_08D3u64;
        for (slot, chunk) in seed.chunks_exact_mut(8).enumerate() {
            for (i, w) in words.iter().enumerate() {
                state = splitmix64(state ^ w.wrapping_add((i as u64) << 56 | slot as u64));
            }
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        ChaCha8Rng::from_seed(seed)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
