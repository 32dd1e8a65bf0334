//! Counter-based random streams.
//!
//! A stream is identified by `(root seed, index, purpose)`; the `n`-th draw of
//! a stream is a pure function of that key and `n`. Work can therefore be split
//! across any number of threads without changing a single bit of output.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a stream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    InitState = 1,
    Cocycle = 2,
    Parameters = 3,
    MapNoise = 4,
    Surrogate = 5,
    InitLaw = 6,
    Realization = 7,
    Tangent = 8,
    Synthetic = 9,
}

/// Derives a child seed, e.g. one per realization or per grid point.
#[inline]
pub fn derive_seed(root: u64, index: u64, purpose: Purpose) -> u64 {
    let a = mix64(root ^ (purpose as u64).wrapping_mul(GOLDEN));
    mix64(a ^ mix64(index.wrapping_add(GOLDEN)))
}

/// `n`-th draw of the stream whose key is `derive_seed(root, index, purpose)`.
#[inline]
pub fn keyed_draw(key: u64, n: u64) -> u64 {
    mix64(key ^ mix64(n.wrapping_mul(GOLDEN).wrapping_add(key)))
}

/// Random-access generator: `draw(n)` is the `n`-th output of the stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(root: u64, index: u64, purpose: Purpose) -> Self {
        Self {
            key: derive_seed(root, index, purpose),
            counter: 0,
        }
    }

    /// Stream positioned at `counter`.
    pub fn at(root: u64, index: u64, purpose: Purpose, counter: u64) -> Self {
        let mut rng = Self::new(root, index, purpose);
        rng.counter = counter;
        rng
    }

    #[inline]
    pub fn draw(&self, n: u64) -> u64 {
        keyed_draw(self.key, n)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval `(0, 1)`.
    #[inline]
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let out = self.draw(self.counter);
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
