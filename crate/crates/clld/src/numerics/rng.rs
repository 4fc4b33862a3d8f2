//! Seed-deterministic random number generation.
//!
//! All randomness in the crate flows through [`RngState`], a thin wrapper
//! around ChaCha8. Independent concerns (parameter init, dropout, batch
//! shuffling, synthetic data) use separate streams of the same seed so that
//! adding draws to one concern never perturbs another.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Stream ids carving one seed into independent generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Init,
    Dropout,
    Synthetic,
    /// Batch shuffle for a given epoch.
    Shuffle(u64),
}

impl Domain {
    fn stream(self) -> u64 {
        match self {
            Domain::Init => 1,
            Domain::Dropout => 2,
            Domain::Synthetic => 3,
            // Epochs start at 1, so shuffle streams never collide with the
            // fixed ids above.
            Domain::Shuffle(epoch) => (1 << 32) | epoch,
        }
    }
}

/// Deterministic generator state: identical seeds yield identical draws.
#[derive(Debug, Clone)]
pub struct RngState {
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn for_domain(seed: u64, domain: Domain) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(domain.stream());
        Self { rng }
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform draw in [-limit, limit).
    pub fn uniform_symmetric(&mut self, limit: f64) -> f64 {
        (self.rng.gen::<f64>() * 2.0 - 1.0) * limit
    }

    pub fn below(&mut self, bound: usize) -> usize {
        self.rng.gen_range(0..bound)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            items.swap(i, j);
        }
    }

    /// Snapshot of the generator for checkpointing.
    pub fn save(&self) -> RngSnapshot {
        RngSnapshot {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn restore(snapshot: &RngSnapshot) -> Self {
        let mut rng = ChaCha8Rng::from_seed(snapshot.seed);
        rng.set_stream(snapshot.stream);
        rng.set_word_pos(snapshot.word_pos);
        Self { rng }
    }

    pub fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest);
    }
}

/// Serializable generator position.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}
