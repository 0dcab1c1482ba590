//! Counter-addressed random streams.
//!
//! Every random draw is keyed by a tuple such as (domain, step, instance,
//! candidate, slot), so results never depend on evaluation order or on how
//! work is split across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream domains.
pub mod domain {
    pub const PROMPT: u64 = 1;
    pub const LABEL: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const BATCH: u64 = 4;
    pub const MASKING: u64 = 5;
    pub const INIT: u64 = 6;
    pub const SELECTION: u64 = 7;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseSource {
    seed: u64,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn key(&self, path: &[u64]) -> u64 {
        path.iter().fold(splitmix(self.seed), |acc, &p| splitmix(acc ^ splitmix(p)))
    }

    pub fn rng(&self, path: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key(path))
    }

    /// `len` standard normal draws addressed by `path`.
    pub fn normals(&self, path: &[u64], len: usize) -> Vec<f64> {
        let mut rng = self.rng(path);
        (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
    }
}
