//! Counter-based generator: output `i` is a hash of `(seed, i)`, so a stream
//! can be consumed in any chunking and still produce the same flat sequence.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rng {
    seed: u64,
    position: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { seed, position: 0 }
    }

    /// Generator positioned at an arbitrary counter value.
    pub fn at(seed: u64, position: u64) -> Self {
        Self { seed, position }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Independent stream keyed by `stream`. Does not advance `self`.
    pub fn derive(&self, stream: u64) -> Rng {
        Rng::new(mix64(self.seed ^ mix64(stream.wrapping_add(GOLDEN))))
    }

    #[inline]
    fn word(&self, counter: u64) -> u64 {
        let key = mix64(self.seed.wrapping_add(GOLDEN));
        mix64(key ^ mix64(counter.wrapping_mul(GOLDEN).wrapping_add(key)))
    }

    pub fn next_u64(&mut self) -> u64 {
        let w = self.word(self.position);
        self.position = self.position.wrapping_add(1);
        w
    }

    /// Uniform in `[0, 1)` with 24 bits of resolution.
    pub fn uniform(&mut self) -> f32 {
        (self.next_u64() >> 40) as f32 * (1.0 / (1u32 << 24) as f32)
    }

    /// Uniform integer in `0..n`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; the residual bias is < n / 2^64.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// One standard normal sample per counter position (Box-Muller, cosine branch).
    pub fn normal(&mut self) -> f32 {
        let w = self.next_u64();
        let u1 = (((w >> 40) + 1) as f32) * (1.0 / (1u32 << 24) as f32);
        let u2 = ((w >> 8) & 0xFF_FFFF) as f32 * (1.0 / (1u32 << 24) as f32);
        let r = libm::sqrtf(-2.0 * libm::logf(u1));
        r * libm::cosf(core::f32::consts::TAU * u2)
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out {
            *v = self.normal();
        }
    }
}
