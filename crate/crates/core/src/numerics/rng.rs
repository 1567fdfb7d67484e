//! Counter-keyed random streams.
//!
//! Every random draw in the simulator comes from a [`SeededRng`] keyed by the
//! global seed plus a [`StreamId`]. The key is hashed into a ChaCha8 seed, so
//! a stream's sequence depends only on its key and never on which thread or
//! in which order the streams are consumed.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// What a stream is used for; part of the stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    /// Conductance programming variation.
    Program,
    /// Synthetic operand generation.
    Operands,
    /// Dataset synthesis and shuffling.
    Data,
    /// Parameter initialization.
    Init,
    /// Cluster seeding.
    Seeding,
    Test,
    Custom(u64),
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::Program => 1,
            Purpose::Operands => 2,
            Purpose::Data => 3,
            Purpose::Init => 4,
            Purpose::Seeding => 5,
            Purpose::Test => 6,
            Purpose::Custom(c) => 0x1000_0000 ^ c,
        }
    }
}

/// Stream key: (purpose, block-row, block-col, slice, cycle).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamId {
    pub purpose: Purpose,
    pub block_row: u64,
    pub block_col: u64,
    pub slice: u64,
    pub cycle: u64,
}

impl StreamId {
    pub fn new(purpose: Purpose) -> Self {
        Self {
            purpose,
            block_row: 0,
            block_col: 0,
            slice: 0,
            cycle: 0,
        }
    }

    pub fn block(mut self, row: usize, col: usize) -> Self {
        self.block_row = row as u64;
        self.block_col = col as u64;
        self
    }

    pub fn slice(mut self, slice: usize) -> Self {
        self.slice = slice as u64;
        self
    }

    pub fn cycle(mut self, cycle: u64) -> Self {
        self.cycle = cycle;
        self
    }
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_key(seed: u64, id: &StreamId) -> [u8; 32] {
    let words = [
        seed,
        id.purpose.code(),
        id.block_row,
        id.block_col,
        id.slice,
        id.cycle,
    ];
    let mut h = 0x6A09_E667_F3BC_C908u64;
    for w in words {
        h = splitmix64(h ^ w);
    }
    let mut key = [0u8; 32];
    let mut s = h;
    for chunk in key.chunks_mut(8) {
        s = splitmix64(s);
        chunk.copy_from_slice(&s.to_le_bytes());
    }
    key
}

/// Deterministic random stream for one `(seed, StreamId)` key.
#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, id: StreamId) -> Self {
        Self {
            inner: ChaCha8Rng::from_seed(derive_key(seed, &id)),
        }
    }

    /// Uniform draw on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
