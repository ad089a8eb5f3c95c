//! Seeded random streams.
//!
//! A run is driven by one seed. Each consumer draws from its own ChaCha8
//! stream so adding draws in one place never shifts another:
//!
//! | stream | consumer |
//! |-------:|----------|
//! | 1 | teacher initialization |
//! | 2 | student initialization |
//! | 3 | protocol sample selection |
//! | 4 | training batch sampling |
//! | 16 + d | synthetic generation for domain `d` |
//!
//! Specialized protocols offset streams 2 and 4 by `32 · (model index + 1)` so
//! that every per-domain model gets fresh student weights and batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const TEACHER: u64 = 1;
pub const STUDENT: u64 = 2;
pub const SELECTION: u64 = 3;
pub const BATCH: u64 = 4;
pub const SYNTH_BASE: u64 = 16;
pub const MODEL_OFFSET: u64 = 32;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
