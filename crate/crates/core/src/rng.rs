//! Seeded, stream-splittable randomness.
//!
//! Every consumer derives its own ChaCha stream from (seed, stream id), so
//! batch content, init draws and sampler noise depend only on those two
//! numbers — never on thread timing or call order elsewhere.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{Element, Tensor};

pub type Prng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Prng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` of the generator seeded with `seed`.
pub fn stream(seed: u64, stream: u64) -> Prng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn randn<E: Element>(rng: &mut Prng, shape: &[usize]) -> Tensor<E>
where
    StandardNormal: Distribution<E>,
{
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

pub fn uniform<E: Element>(rng: &mut Prng, shape: &[usize], lo: f64, hi: f64) -> Tensor<E> {
    Tensor::from_fn(shape, |_| {
        E::from_f64(lo + (hi - lo) * rng.gen::<f64>())
    })
}
