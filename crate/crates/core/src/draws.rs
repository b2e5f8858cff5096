//! Counter-based uniform draws.
//!
//! Every perturbation coefficient is a pure function of its key, so a
//! candidate can be regenerated at any node without replaying a stream and
//! the result never depends on evaluation order or thread count.

/// Identifies the stream of draws for one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DrawKey {
    pub seed: u64,
    /// Distinguishes independent trainings sharing a seed (e.g. time strips).
    pub stream: u64,
    pub iteration: u64,
}

impl DrawKey {
    pub fn new(seed: u64, stream: u64, iteration: u64) -> Self {
        Self {
            seed,
            stream,
            iteration,
        }
    }
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn absorb(h: u64, word: u64) -> u64 {
    mix(h ^ word.wrapping_add(GOLDEN).wrapping_mul(0xD6E8_FEB8_6659_FD93))
}

/// Uniform draw in `[0, 1)` keyed by `(key, candidate, slot)`.
#[inline]
pub fn uniform(key: DrawKey, candidate: u64, slot: u64) -> f64 {
    let mut h = mix(key.seed ^ GOLDEN);
    h = absorb(h, key.stream);
    h = absorb(h, key.iteration);
    h = absorb(h, candidate);
    h = absorb(h, slot);
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_are_pure_and_key_sensitive() {
        let k = DrawKey::new(7, 0, 3);
        assert_eq!(uniform(k, 1, 2), uniform(k, 1, 2));
        assert_ne!(uniform(k, 1, 2), uniform(k, 2, 1));
        assert_ne!(uniform(k, 1, 2), uniform(DrawKey::new(8, 0, 3), 1, 2));
        assert_ne!(uniform(k, 1, 2), uniform(DrawKey::new(7, 1, 3), 1, 2));
    }

    #[test]
    fn moments_look_uniform() {
        let k = DrawKey::new(1, 0, 0);
        let n = 200_000;
        let xs: Vec<f64> = (0..n).map(|i| uniform(k, i / 97, i % 97)).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 5e-3, "mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 2e-3, "var {var}");
        assert!(xs.iter().all(|&x| (0.0..1.0).contains(&x)));
    }
}
