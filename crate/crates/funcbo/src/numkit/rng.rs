//! Seeded random number generation with a fully pinned algorithm.
//!
//! Runs must be byte-reproducible from `(config, seed)` across platforms and
//! builds, so the generator is spelled out here rather than pulled from a
//! crate whose stream might change between versions: a splitmix64 expander
//! turns the user seed into the 128-bit state and stream of a PCG XSL-RR
//! 128/64 generator. Golden values for the first draws are frozen in the
//! tests below; if they ever change, saved runs stop being replayable.

const PCG_MUL: u128 = 0x2360_ed05_1fc6_5da4_4385_df64_9fcc_f645;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// PCG XSL-RR 128/64 generator seeded through splitmix64.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u128,
    inc: u128,
}

impl Rng {
    /// Stream 0 generator for `seed`.
    pub fn new(seed: u64) -> Rng {
        Rng::with_stream(seed, 0)
    }

    /// Independent generator for `(seed, stream)`; distinct streams from the
    /// same seed never share a sequence (the PCG increment differs).
    pub fn with_stream(seed: u64, stream: u64) -> Rng {
        let mut sm = seed;
        let state = ((splitmix64(&mut sm) as u128) << 64) | splitmix64(&mut sm) as u128;
        let mut sm_inc = stream ^ 0x6a09_e667_f3bc_c909;
        let inc =
            ((((splitmix64(&mut sm_inc) as u128) << 64) | splitmix64(&mut sm_inc) as u128) << 1)
                | 1;
        let mut rng = Rng { state: 0, inc };
        rng.step();
        rng.state = rng.state.wrapping_add(state);
        rng.step();
        rng
    }

    /// Derives a fresh generator from this one (for giving components their
    /// own streams without coupling their draw counts).
    pub fn fork(&mut self) -> Rng {
        let seed = self.next_u64();
        let stream = self.next_u64();
        Rng::with_stream(seed, stream)
    }

    #[inline]
    fn step(&mut self) {
        self.state = self.state.wrapping_mul(PCG_MUL).wrapping_add(self.inc);
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.step();
        let xored = ((self.state >> 64) as u64) ^ (self.state as u64);
        let rot = (self.state >> 122) as u32;
        xored.rotate_right(rot)
    }

    /// Uniform draw in `[0, 1)` with 53-bit resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `(0, 1]` (never zero; safe under `ln`).
    #[inline]
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; consumes exactly two draws per call.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn uniform_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.uniform()).collect()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform index in `0..n` (Lemire reduction; `n` must be nonzero).
    pub fn choice(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// Index drawn with probability proportional to `weights` (nonnegative,
    /// not all zero).
    pub fn choice_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Symmetric Dirichlet(1, ..., 1) draw: uniform on the k-simplex.
    pub fn dirichlet_uniform(&mut self, k: usize) -> Vec<f64> {
        let mut e: Vec<f64> = (0..k).map(|_| -self.uniform_open().ln()).collect();
        let total: f64 = e.iter().sum();
        for v in e.iter_mut() {
            *v /= total;
        }
        e
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Golden values freeze the exact stream. They were produced by this
    // implementation at its introduction; any change to seeding or output
    // mixing will break replay of saved runs and must show up here.
    #[test]
    fn golden_stream_for_fixed_seed() {
        let mut rng = Rng::new(0x5EED);
        let first: Vec<u64> = (0..4).map(|_| rng.next_u64()).collect();
        assert_eq!(
            first,
            [
                13714692799147349140,
                16922938500554206329,
                15706814437208844015,
                9054936931064860137
            ]
        );
        let mut rng = Rng::new(0x5EED);
        let u: Vec<f64> = (0..2).map(|_| rng.uniform()).collect();
        assert_eq!(u, [0.7434749863903429, 0.9173943343569727]);
    }

    #[test]
    fn streams_differ_and_replay() {
        let mut a = Rng::with_stream(42, 0);
        let mut b = Rng::with_stream(42, 1);
        let mut a2 = Rng::with_stream(42, 0);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        let xs2: Vec<u64> = (0..8).map(|_| a2.next_u64()).collect();
        assert_eq!(xs, xs2);
        assert_ne!(xs, ys);
    }

    #[test]
    fn uniform_bounds_and_moments() {
        let mut rng = Rng::new(1);
        let n = 20000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(2);
        let n = 20000;
        let xs = rng.normal_vec(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn dirichlet_on_simplex() {
        let mut rng = Rng::new(3);
        for _ in 0..100 {
            let p = rng.dirichlet_uniform(8);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn choice_in_range_and_weighted_respects_zeros() {
        let mut rng = Rng::new(4);
        for _ in 0..1000 {
            assert!(rng.choice(7) < 7);
        }
        for _ in 0..200 {
            let i = rng.choice_weighted(&[0.0, 2.0, 0.0, 1.0]);
            assert!(i == 1 || i == 3, "drew zero-weight index {i}");
        }
    }
}
