//! Counter-style random streams: every `(seed, purpose, block)` triple maps to
//! its own ChaCha stream, so parallel blocks never share state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Distinct purposes get disjoint stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    DataMatrix = 1,
    Brownian = 2,
    AmpInit = 3,
    AmpStage2 = 4,
    MonteCarlo = 5,
    Optimizer = 6,
    Probe = 7,
}

pub fn stream(seed: u64, purpose: Purpose, block: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 48) ^ block);
    rng
}
