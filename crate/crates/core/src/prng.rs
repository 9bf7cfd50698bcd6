//! Deterministic pseudo-random stream: xoshiro256** seeded through a
//! splitmix64 expansion of a 64-bit seed.
//!
//! All randomized steps in the crate draw from [`PrngStream`], so any model,
//! key, attack, or experiment is reproducible from seeds alone. Child streams
//! for independent sub-tasks are derived with [`mix64`], which keeps parallel
//! loops deterministic regardless of scheduling.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from a parent seed and a tag.
///
/// Used to split one root seed into independent streams (position lists,
/// permutation draws, noise, null sampling) with a fixed, documented layout.
pub fn mix64(seed: u64, tag: u64) -> u64 {
    let mut x = seed ^ tag.wrapping_mul(GOLDEN).wrapping_add(0x6A09_E667_F3BC_C909);
    splitmix64(&mut x)
}

/// xoshiro256** stream with a splitmix64-expanded seed.
#[derive(Debug, Clone)]
pub struct PrngStream {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl PrngStream {
    /// Create a stream from a 64-bit seed.
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let mut s = [0u64; 4];
        for slot in &mut s {
            *slot = splitmix64(&mut sm);
        }
        if s == [0, 0, 0, 0] {
            s[0] = 1;
        }
        Self {
            s,
            spare_normal: None,
        }
    }

    /// Child stream for an independent sub-task.
    pub fn derived(seed: u64, tag: u64) -> Self {
        Self::new(mix64(seed, tag))
    }

    /// Next raw 64-bit output.
    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform f64 in [0, 1) with 53-bit resolution.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform integer in [0, bound). `bound` must be positive.
    pub fn gen_range(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "gen_range bound must be positive");
        let b = bound as u64;
        // Reject the incomplete block at the top of the u64 range.
        let limit = (u64::MAX / b) * b;
        loop {
            let x = self.next_u64();
            if x < limit {
                return (x % b) as usize;
            }
        }
    }

    /// Standard normal via Box-Muller; pairs are cached so consecutive
    /// draws cost one transcendental pass per two values.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `count` distinct indices drawn uniformly from [0, domain) minus
    /// `exclude`, in draw order.
    pub fn sample_distinct(
        &mut self,
        count: usize,
        domain: usize,
        exclude: &[usize],
    ) -> Vec<usize> {
        assert!(
            count + exclude.len() <= domain,
            "sample_distinct: not enough free indices"
        );
        let mut taken = vec![false; domain];
        for &e in exclude {
            taken[e] = true;
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            let i = self.gen_range(domain);
            if !taken[i] {
                taken[i] = true;
                out.push(i);
            }
        }
        out
    }
}
