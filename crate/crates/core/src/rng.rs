//! Counter-based noise streams.
//!
//! Every Gaussian draw is a pure function of `(master_seed, path_id,
//! step_counter, lane)`: the four words form the 256-bit ChaCha key, so
//! distinct triples never share a keystream and results do not depend on
//! how paths are scheduled across workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub path_id: u64,
    pub step_counter: u64,
}

impl NoiseStream {
    pub fn new(master_seed: u64, path_id: u64) -> Self {
        Self {
            master_seed,
            path_id,
            step_counter: 0,
        }
    }

    pub fn at(self, step_counter: u64) -> Self {
        Self {
            step_counter,
            ..self
        }
    }

    pub fn advance(&mut self) {
        self.step_counter += 1;
    }

    /// Generator for this triple on the default lane.
    pub fn rng(&self) -> ChaCha8Rng {
        self.rng_lane(0)
    }

    /// Generator for this triple on a separate lane, for auxiliary draws
    /// (acceptance uniforms and the like) that must not reuse increment noise.
    pub fn rng_lane(&self, lane: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.master_seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.path_id.to_le_bytes());
        key[16..24].copy_from_slice(&self.step_counter.to_le_bytes());
        key[24..].copy_from_slice(&lane.to_le_bytes());
        ChaCha8Rng::from_seed(key)
    }

    pub fn fill_standard_normal(&self, out: &mut [f64]) {
        let mut rng = self.rng();
        for o in out.iter_mut() {
            *o = rng.sample(StandardNormal);
        }
    }
}

/// Derives an independent master seed for a named sub-experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
