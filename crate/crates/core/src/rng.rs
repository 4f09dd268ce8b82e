//! Deterministic, splittable random numbers.
//!
//! A stream is ChaCha8 keyed by a 32-byte seed. `fork` derives a child key
//! from the parent key and a label (never from the parent's position), which
//! gives every parameter tensor its own stream independent of construction
//! order.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{Axis, Tensor};

// Stable across platforms and releases, unlike `DefaultHasher`.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xCBF2_9CE4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    key: [u8; 32],
    stream: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::from_key(ChaCha8Rng::seed_from_u64(seed).get_seed())
    }

    fn from_key(key: [u8; 32]) -> Self {
        Self {
            key,
            stream: ChaCha8Rng::from_seed(key),
        }
    }

    fn derive(&self, stream: u64) -> Rng {
        let mut g = ChaCha8Rng::from_seed(self.key);
        g.set_stream(stream);
        let mut key = [0u8; 32];
        g.fill_bytes(&mut key);
        Self::from_key(key)
    }

    /// Independent stream derived from this stream's key and a label. The
    /// parent's position is not consulted or advanced.
    pub fn fork(&self, label: &str) -> Rng {
        self.derive(fnv1a(label.as_bytes()) | 1 << 63)
    }

    pub fn fork_index(&self, index: u64) -> Rng {
        self.derive(index & !(1 << 63))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.stream.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.stream.random()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.stream.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.stream)
    }

    /// Geometric length on `{1, 2, ...}` with the given mean.
    pub fn geometric(&mut self, mean: f64) -> usize {
        if mean <= 1.0 {
            return 1;
        }
        let g = Geometric::new(1.0 / mean).expect("probability in (0, 1)");
        1 + g.sample(&mut self.stream) as usize
    }
}

/// I.i.d. `normal(0, std^2)` tensor.
pub fn normal_init(axes: Vec<Axis>, std: f64, rng: &mut Rng) -> Result<Tensor> {
    if std < 0.0 || std.is_nan() {
        return Err(Error::NegativeStd(std));
    }
    if std == 0.0 {
        return Tensor::zeros(axes);
    }
    Tensor::from_fn(axes, |_| std * rng.normal())
}
