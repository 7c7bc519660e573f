//! Portable deterministic random numbers.
//!
//! Everything stochastic in this crate (phantom geometry, weight init,
//! training draws, sampler noise) flows through [`Pcg32`], a PCG XSH-RR
//! 64/32 generator pinned by its constants so that a `(seed, stream)`
//! pair identifies the same byte stream in any implementation:
//!
//! * state update: `state = state * 6364136223846793005 + inc` (mod 2^64)
//! * increment:    `inc = (stream << 1) | 1`
//! * output:       `rotr32((((state >> 18) ^ state) >> 27) as u32, state >> 59)`
//!   computed from the pre-update state
//! * seeding:      `state = 0`; advance once; `state += seed`; advance once
//!
//! Uniform doubles take 53 bits from two consecutive outputs (high word
//! first); Gaussians are Box-Muller cosine draws from two uniforms, with
//! no spare caching so the state alone determines the stream.

const PCG_MULTIPLIER: u64 = 6364136223846793005;

/// Stream ids keep unrelated consumers of the same user seed decorrelated.
pub mod streams {
    pub const PHANTOM: u64 = 0x01;
    pub const MODEL_INIT: u64 = 0x02;
    pub const TRAIN_DRAW_BASE: u64 = 0x1000;
    pub const TRAIN_SHUFFLE_BASE: u64 = 0x2000_0000;
    pub const RESTORE: u64 = 0x03;
    pub const GENERATE: u64 = 0x04;
    pub const SYNTH: u64 = 0x05;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 {
            state: 0,
            inc: (stream << 1) | 1,
        };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULTIPLIER).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    /// Uniform in `[0, n)` by rejection-free modulo of a 64-bit draw
    /// (bias < 2^-32 for any practical `n`).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        let wide = ((self.next_u32() as u64) << 32) | self.next_u32() as u64;
        (wide % n as u64) as usize
    }

    /// Uniform in `[0, 1)` with 53 random mantissa bits.
    pub fn next_f64(&mut self) -> f64 {
        let hi = (self.next_u32() as u64) << 21;
        let lo = (self.next_u32() as u64) >> 11;
        (hi | lo) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn next_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal draw: `sqrt(-2 ln u1) * cos(2 pi u2)` with
    /// `u1` in `(0, 1]`. The sine branch is discarded.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn state(&self) -> (u64, u64) {
        (self.state, self.inc)
    }
}

/// FNV-1a 64-bit hash (offset 14695981039346656037, prime 1099511628211).
/// Used to derive per-image seeds as `seed ^ stable_hash(id)` so that
/// serial and parallel runs agree on every image's noise stream.
pub fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 14695981039346656037;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(1099511628211);
    }
    h
}
