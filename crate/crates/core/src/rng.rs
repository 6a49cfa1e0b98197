//! Counter-based, splittable seeding.
//!
//! A [`Seed`] is a (master seed, replication index) pair. Each consumer asks
//! for a generator on a named [`Stream`]; the key is a SplitMix64 hash of
//! the pair and the stream selects an independent ChaCha stream under that
//! key. Replication `i` therefore gets the same numbers no matter which
//! thread runs it or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag for a random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Corruption = 2,
    Folds = 3,
    Policy = 4,
    Environment = 5,
    Aux = 6,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed {
    pub master: u64,
    pub replication: u64,
}

impl From<u64> for Seed {
    fn from(master: u64) -> Self {
        Seed::new(master)
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    pub fn new(master: u64) -> Self {
        Seed {
            master,
            replication: 0,
        }
    }

    /// Seed for replication `i` under the same master.
    pub fn replication(self, i: u64) -> Self {
        Seed {
            master: self.master,
            replication: i,
        }
    }

    /// Child seed for a sub-task (cell, fold, ...). Mixing keeps children of
    /// different parents apart.
    pub fn child(self, tag: u64) -> Self {
        Seed {
            master: splitmix64(self.master ^ splitmix64(self.replication)),
            replication: tag,
        }
    }

    fn key(self) -> [u8; 32] {
        let mut key = [0u8; 32];
        let mut state = splitmix64(self.master) ^ self.replication.rotate_left(32);
        for chunk in key.chunks_mut(8) {
            state = splitmix64(state ^ self.replication);
            chunk.copy_from_slice(&state.to_le_bytes());
        }
        key
    }

    pub fn rng(self, stream: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(stream as u64);
        rng
    }
}
