//! Counter-based Gaussian noise addressed by global canvas coordinates.
//!
//! Every sample is a pure function of `(seed, stream, row, col, channel)`, so a
//! crop of a canvas-sized field equals the field generated directly for that
//! crop. Tiled and untiled sampling therefore see the same noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed for an independent purpose (`salt`) under `seed`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    splitmix(splitmix(seed) ^ salt)
}

/// Named noise streams; each yields an independent field per seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseStream {
    /// Initial `Z_T`.
    Init,
    /// Ancestral sampler noise used when stepping down from level `t`.
    Ancestral(usize),
    /// Forward-diffusion noise used to re-noise the first pass to level `t`.
    Renoise(usize),
}

impl NoiseStream {
    fn tag(self) -> u64 {
        match self {
            NoiseStream::Init => 0x1,
            NoiseStream::Ancestral(t) => 0x2 | ((t as u64) << 8),
            NoiseStream::Renoise(t) => 0x3 | ((t as u64) << 8),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseField {
    seed: u64,
}

impl NoiseField {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    #[inline]
    pub fn sample(&self, stream: NoiseStream, y: usize, x: usize, c: usize) -> f64 {
        let mut key = splitmix(self.seed ^ stream.tag());
        key = splitmix(key ^ y as u64);
        key = splitmix(key ^ x as u64);
        key = splitmix(key ^ c as u64);
        ChaCha8Rng::seed_from_u64(key).sample(StandardNormal)
    }

    /// Noise window of size `height × width × channels` whose top-left pixel
    /// sits at global `origin`.
    pub fn window<S: Scalar>(
        &self,
        stream: NoiseStream,
        origin: (usize, usize),
        height: usize,
        width: usize,
        channels: usize,
    ) -> Tensor3<S> {
        Tensor3::from_fn(height, width, channels, |y, x, c| {
            S::of(self.sample(stream, origin.0 + y, origin.1 + x, c))
        })
    }
}
