//! Deterministic random substreams.
//!
//! Every training step draws one `u64` from the run's generator and derives
//! independent ChaCha streams from it, one per consumer. Loss evaluation and
//! gradient computation both rebuild the streams from the same
//! [`StepSeeds`], so they see identical masks and noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Negatives = 0,
    Mask = 1,
    NoiseVisual1 = 2,
    NoiseVisual2 = 3,
    NoiseTextual1 = 4,
    NoiseTextual2 = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeeds {
    pub seed: u64,
}

impl StepSeeds {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn draw<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { seed: rng.gen() }
    }

    pub fn stream(&self, which: Stream) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(which as u64 + 1);
        rng
    }
}
