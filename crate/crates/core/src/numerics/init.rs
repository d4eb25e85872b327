use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Glorot uniform bound `sqrt(6 / (fan_in + fan_out))`.
///
/// Rank-2 shapes are `[fan_in, fan_out]`; a rank-1 shape `[n]` is treated as a
/// single row, i.e. `fan_in = 1, fan_out = n`.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    let (fan_in, fan_out) = match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => {
            return Err(Error::shape(format!(
                "xavier init needs rank 1 or 2, got {shape:?}"
            )))
        }
    };
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::DegenerateShape(format!("xavier init over {shape:?}")));
    }
    Ok((6.0 / (fan_in + fan_out) as f64).sqrt())
}

/// Draws a Xavier-uniform tensor from `rng`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let bound = xavier_bound(shape)?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Seeded convenience wrapper over [`xavier_uniform`].
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    xavier_uniform(shape, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_stay_inside_bound() {
        let shape = [100, 100];
        let bound = (6.0f64 / 200.0).sqrt();
        let t = xavier_init(&shape, 11).unwrap();
        assert_eq!(t.numel(), 10_000);
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn sample_mean_is_near_zero() {
        // Uniform(-b, b) has standard deviation b / sqrt(3).
        let t = xavier_init(&[100, 100], 5).unwrap();
        let bound = xavier_bound(&[100, 100]).unwrap();
        let se = bound / 3f64.sqrt() / (t.numel() as f64).sqrt();
        assert!(t.mean().abs() < 3.0 * se, "mean {} se {se}", t.mean());
    }

    #[test]
    fn same_seed_same_bits() {
        let a = xavier_init(&[7, 3], 42).unwrap();
        let b = xavier_init(&[7, 3], 42).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), xavier_init(&[7, 3], 43).unwrap().data());
    }

    #[test]
    fn zero_sized_dimension_is_rejected() {
        assert!(xavier_init(&[0, 4], 1).is_err());
        assert!(xavier_init(&[2, 2, 2], 1).is_err());
    }
}
