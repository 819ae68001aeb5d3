//! Counter-based random streams.
//!
//! Every stochastic component of the toolkit (weight init, perturbation
//! sampling, batch shuffling) draws from [`RngStream`], a keyed counter
//! generator: the n-th draw of a stream is a pure function of
//! `(seed, stream_id, n)`. That property is what makes perturbation *replay*
//! possible — a gradient estimate can regenerate the exact noise tensor for
//! any parameter block later, without ever storing it.
//!
//! Draws must be bit-identical across platforms, so the Gaussian path avoids
//! the platform `libm` entirely: `ln` and `cos` are evaluated with fixed
//! polynomial routines built only from IEEE-exact primitives (+, −, ×, ÷,
//! `sqrt`, `floor`).

use serde::{Deserialize, Serialize};

/// Distribution used when sampling perturbation noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    /// Standard normal entries.
    Gaussian,
    /// Uniform ±1 entries.
    Rademacher,
}

/// Keyed counter generator; draw `n` depends only on `(seed, stream_id, n)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const KEY_SALT: u64 = 0x6A09_E667_F3BC_C909;

#[inline]
fn avalanche(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    /// Stream starting at counter zero.
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let key = avalanche(avalanche(seed ^ KEY_SALT).wrapping_add(stream_id));
        RngStream { key, counter: 0 }
    }

    /// Stream positioned at an arbitrary counter (used to resume or skip).
    pub fn with_counter(seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut s = RngStream::new(seed, stream_id);
        s.counter = counter;
        s
    }

    /// Current counter position.
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Next raw 64-bit draw.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let z = avalanche(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter += 1;
        z
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform draw in `(0, 1]` (never zero; safe to take a logarithm of).
    #[inline]
    fn next_unit_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Standard normal draw (Box–Muller). Consumes exactly two counters.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_unit_open();
        let u2 = self.next_unit();
        let radius = (-2.0 * portable_ln(u1)).sqrt();
        radius * portable_cos(TWO_PI * u2)
    }

    /// ±1 draw with equal probability. Consumes exactly one counter.
    pub fn next_rademacher(&mut self) -> f64 {
        if self.next_u64() >> 63 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// Draw from the given distribution.
    pub fn next_from(&mut self, distribution: Distribution) -> f64 {
        match distribution {
            Distribution::Gaussian => self.next_gaussian(),
            Distribution::Rademacher => self.next_rademacher(),
        }
    }

    /// Uniform integer in `[0, bound)` via rejection-free 128-bit scaling.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "bound must be positive");
        ((self.next_u64() as u128 * bound as u128) >> 64) as u64
    }

    /// Deterministic Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

// ---- Portable elementary functions ----
//
// Fixed sequences of IEEE-754 double operations; no table lookups, no libm.
// Absolute error is below 1e-12 on the domains used, which is far tighter
// than any statistical property of the generator requires.

const TWO_PI: f64 = 6.283185307179586;
const LN_2: f64 = 0.6931471805599453;
const SQRT_2: f64 = 1.4142135623730951;
const INV_PI_OVER_2: f64 = 0.6366197723675814;
const PI_OVER_2_HI: f64 = 1.5707963267948966;
const PI_OVER_2_LO: f64 = 6.123233995736766e-17;

/// Natural log for finite positive normal inputs.
fn portable_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut exp = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | 0x3FF0_0000_0000_0000);
    if m > SQRT_2 {
        m *= 0.5;
        exp += 1;
    }
    // atanh series around 1: ln(m) = 2t(1 + s/3 + s^2/5 + ...), t = (m-1)/(m+1)
    let t = (m - 1.0) / (m + 1.0);
    let s = t * t;
    let series = 1.0
        + s * (1.0 / 3.0
            + s * (1.0 / 5.0
                + s * (1.0 / 7.0
                    + s * (1.0 / 9.0
                        + s * (1.0 / 11.0 + s * (1.0 / 13.0 + s * (1.0 / 15.0)))))));
    exp as f64 * LN_2 + 2.0 * t * series
}

/// Cosine for inputs in `[0, 2π]`.
fn portable_cos(x: f64) -> f64 {
    debug_assert!((0.0..=TWO_PI + 1e-9).contains(&x));
    let k = (x * INV_PI_OVER_2 + 0.5).floor();
    let r = (x - k * PI_OVER_2_HI) - k * PI_OVER_2_LO;
    match (k as i64) & 3 {
        0 => cos_kernel(r),
        1 => -sin_kernel(r),
        2 => -cos_kernel(r),
        _ => sin_kernel(r),
    }
}

/// Taylor cosine on |r| ≤ π/4.
fn cos_kernel(r: f64) -> f64 {
    let z = r * r;
    1.0 + z * (-1.0 / 2.0
        + z * (1.0 / 24.0
            + z * (-1.0 / 720.0
                + z * (1.0 / 40320.0
                    + z * (-1.0 / 3628800.0 + z * (1.0 / 479001600.0))))))
}

/// Taylor sine on |r| ≤ π/4.
fn sin_kernel(r: f64) -> f64 {
    let z = r * r;
    r * (1.0
        + z * (-1.0 / 6.0
            + z * (1.0 / 120.0
                + z * (-1.0 / 5040.0
                    + z * (1.0 / 362880.0
                        + z * (-1.0 / 39916800.0 + z * (1.0 / 6227020800.0)))))))
}
