use rand::{Rng as _, SeedableRng};

use super::Tensor;

/// Seeded generator used everywhere for reproducible runs.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Independent stream for a named component, so adding or removing one
/// component never shifts the initial values of another.
pub fn component_rng(seed: u64, component: &str) -> Rng {
    // FNV-1a over the component name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    Rng::seed_from_u64(splitmix64(seed ^ h))
}

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Glorot/Xavier uniform matrix `fan_in x fan_out`, marked trainable.
pub fn uniform_xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.random_range(-bound..=bound))
        .collect();
    Tensor::new(&[fan_in, fan_out], data)
        .expect("consistent by construction")
        .with_grad()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xavier_bounds_and_determinism() {
        let a = uniform_xavier(4, 2, &mut component_rng(7, "w"));
        let b = uniform_xavier(4, 2, &mut component_rng(7, "w"));
        let c = uniform_xavier(4, 2, &mut component_rng(7, "v"));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let bound = 1.0f64;
        assert!(a.data().iter().all(|x| x.abs() <= bound));
        assert!(a.requires_grad());
    }
}
