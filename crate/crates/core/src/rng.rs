//! Seeded generators, one ChaCha stream per concern, so equal seeds for
//! different concerns still give independent draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Batch = 1,
    Params = 2,
    FcInjection = 3,
    ConvPlan = 4,
    ConvInjection = 5,
    Defense = 6,
    Leakage = 7,
}

pub fn seeded(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}
