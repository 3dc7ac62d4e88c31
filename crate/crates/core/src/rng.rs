use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream for sample `index` of a run seeded with `seed`.
pub fn for_sample(seed: u64, index: u64) -> Rng {
    let mut r = seeded(seed);
    r.set_stream(index);
    r
}
