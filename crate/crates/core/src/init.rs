//! Xavier (Glorot) normal initialization.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `count` samples from `N(0, 2 / (fan_in + fan_out))`.
pub fn xavier_normal<R: Rng>(rng: &mut R, count: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("finite std");
    (0..count).map(|_| dist.sample(rng)).collect()
}

/// Fan-in and fan-out of a tensor shape, using the usual conventions:
/// `[out, in]` for matrices and `[out, in, kh, kw]` for conv kernels; a
/// vector `[n]` is treated as `[1, n]`.
pub fn fans(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [n] => Ok((n, 1)),
        [out, inp] => Ok((inp, out)),
        [out, inp, ref rest @ ..] => {
            let field: usize = rest.iter().product();
            Ok((inp * field, out * field))
        }
        [] => Err(Error::InvalidArgument("cannot derive fans from a scalar shape".into())),
    }
}

/// Seeded Xavier-normal tensor of the given shape, flattened row-major.
pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Vec<f64>> {
    let (fan_in, fan_out) = fans(shape)?;
    if fan_in + fan_out == 0 {
        return Err(Error::InvalidArgument("zero-sized shape".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(xavier_normal(&mut rng, shape.iter().product(), fan_in, fan_out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_std(v: &[f64]) -> f64 {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
    }

    #[test]
    fn square_matrix_std() {
        let w = xavier_init(&[512, 512], 42).unwrap();
        let want = (2.0f64 / 1024.0).sqrt();
        assert!((sample_std(&w) - want).abs() / want < 0.05);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01 * want);
    }

    #[test]
    fn same_seed_same_tensor() {
        let a = xavier_init(&[16, 8, 3, 3], 9).unwrap();
        let b = xavier_init(&[16, 8, 3, 3], 9).unwrap();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_ne!(a, xavier_init(&[16, 8, 3, 3], 10).unwrap());
    }

    #[test]
    fn unit_fans_give_unit_std() {
        assert_eq!(fans(&[1, 1]).unwrap(), (1, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = xavier_normal(&mut rng, 200_000, 1, 1);
        assert!((sample_std(&v) - 1.0).abs() < 0.01);
    }

    #[test]
    fn conv_fans() {
        assert_eq!(fans(&[8, 4, 3, 3]).unwrap(), (36, 72));
        assert!(fans(&[]).is_err());
    }
}
