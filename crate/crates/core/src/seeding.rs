//! Counter-based derivation of independent random streams from one seed.
//!
//! Each consumer asks for `(purpose, index)`; streams never overlap, so adding
//! a new consumer leaves every existing stream untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Data = 1,
    Init = 2,
    Shuffle = 3,
    Oracle = 4,
}

pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << 40) | (index & ((1 << 40) - 1)));
    rng
}
