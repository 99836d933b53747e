use rand::Rng;

use super::{c, Element, Tensor};

/// Half-width of the Xavier (Glorot) uniform distribution.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Samples in `f64` and rounds, so both element types see the same draws.
pub fn xavier_uniform<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<T> {
    let a = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| c(rng.gen_range(-a..=a)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_stay_within_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f64> = xavier_uniform(&mut rng, &[64, 32], 64, 32);
        let a = xavier_bound(64, 32);
        assert!(t.data().iter().all(|v| v.abs() <= a));
        assert!(t.data().iter().any(|v| v.abs() > 0.9 * a));
    }

    #[test]
    fn element_types_share_draws() {
        let a: Tensor<f64> = xavier_uniform(&mut ChaCha8Rng::seed_from_u64(5), &[7], 3, 4);
        let b: Tensor<f32> = xavier_uniform(&mut ChaCha8Rng::seed_from_u64(5), &[7], 3, 4);
        assert_eq!(a.cast::<f32>(), b);
    }
}
