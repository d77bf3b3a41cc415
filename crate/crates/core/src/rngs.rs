//! Named random streams. Every consumer gets its own ChaCha stream so that
//! changing, say, the augmentation policy never perturbs initialisation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    World = 1,
    Init = 2,
    Shuffle = 3,
    Augment = 4,
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}
