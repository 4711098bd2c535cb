use crate::tensor::{num, Element};

/// Deterministic pseudo-random generator used everywhere randomness is
/// needed: weight init, minibatch sampling, latent noise and scene sampling.
///
/// The core is SplitMix64 (Steele, Lea & Flood's mixing constants): a counter
/// advanced by an odd constant and scrambled by two xor-shift multiplies. It
/// is implemented by hand, rather than pulled in as a dependency, because the
/// byte-level determinism contract of dataset generation and training makes
/// the exact stream part of the on-disk format — it must not change under us
/// when a third-party crate revs. The algorithm is tiny, public domain, and
/// passes BigCrush when used as a mixer.
///
/// Streams for distinct purposes are derived by seeding with
/// `seed ^ DOMAIN ^ index`; the 64-bit avalanche of the mixer decorrelates
/// adjacent seeds, so simple xor composition is safe.
#[derive(Clone, Debug)]
pub struct Rng {
    state: u64,
    /// Box-Muller produces normals in pairs; the unused one is cached here.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed, spare_normal: None }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` via 128-bit multiply-shift, which is
    /// unbiased for any `n` that is tiny relative to 2^64 (all uses here).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Bernoulli draw with probability `p`.
    pub fn chance(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Uniformly pick one element of a slice.
    pub fn pick<'a, T>(&mut self, xs: &'a [T]) -> &'a T {
        &xs[self.below(xs.len())]
    }

    /// Standard normal via Box-Muller; caches the second variate of each
    /// pair so consecutive calls consume one uniform pair per two normals.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn fill_normal<E: Element>(&mut self, out: &mut [E]) {
        for v in out {
            *v = num(self.normal());
        }
    }

    /// Normal truncated to two standard deviations, for weight init.
    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}

/// Domain-separation constants for deriving independent streams from one
/// user-facing seed. Arbitrary distinct values; fixed forever because they
/// participate in the determinism contract.
pub mod domains {
    pub const SCENE: u64 = 0x5343_454e_4531_0001;
    pub const INIT: u64 = 0x494e_4954_5731_0002;
    pub const BATCH: u64 = 0x4241_5443_4831_0003;
    pub const NOISE: u64 = 0x4e4f_4953_4531_0004;
    pub const SAMPLE: u64 = 0x5341_4d50_4c31_0005;
    pub const EVAL: u64 = 0x4556_414c_3131_0006;
}
