//! Counter-based random numbers.
//!
//! Every Brownian increment is a pure function of `(seed, path, step,
//! component)`, so path `m` draws the same numbers no matter how many paths
//! run, in which order, or on how many threads. That keying is what makes
//! common-random-number comparisons across configurations possible.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;
const K_PATH: u64 = 0xd6e8_feb8_6659_fd93;
const K_STEP: u64 = 0xa076_1d64_78bd_642f;
const K_COMP: u64 = 0xe703_7ed1_a0b4_28db;

/// SplitMix64 finalizer; full-avalanche 64-bit mixer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[inline]
fn key(seed: u64, path: u64, step: u64, comp: u64) -> u64 {
    let mut h = mix(seed ^ GOLDEN);
    h = mix(h ^ path.wrapping_mul(K_PATH));
    h = mix(h ^ step.wrapping_mul(K_STEP));
    h ^ comp.wrapping_mul(K_COMP)
}

/// Uniform in (0, 1]; safe as a logarithm argument.
#[inline]
fn to_unit_open_zero(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 1.0) * (1.0 / 9_007_199_254_740_992.0)
}

/// Uniform in [0, 1).
#[inline]
fn to_unit(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
}

/// Standard normal draw for one (path, step, component) cell via Box-Muller.
#[inline]
pub fn standard_normal(seed: u64, path: u64, step: u64, comp: u64) -> f64 {
    let k = key(seed, path, step, comp);
    let u1 = to_unit_open_zero(mix(k ^ 0x5bf0_3635));
    let u2 = to_unit(mix(k ^ 0xa1c9_05f7_2e8b_d3a1));
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Sequential deterministic generator for sampling tasks (validation points,
/// comparison patterns). Not used for Brownian increments.
#[derive(Clone, Debug)]
pub struct SeqRng {
    state: u64,
    counter: u64,
}

impl SeqRng {
    pub fn new(seed: u64) -> Self {
        Self {
            state: mix(seed ^ GOLDEN),
            counter: 0,
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.state ^ self.counter.wrapping_mul(K_STEP))
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * to_unit(self.next_u64())
    }

    pub fn standard_normal(&mut self) -> f64 {
        let u1 = to_unit_open_zero(self.next_u64());
        let u2 = to_unit(self.next_u64());
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
