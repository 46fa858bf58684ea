//! Synthetic feature datasets.
//!
//! Both generators place class means uniformly on the unit hypersphere and
//! add isotropic Gaussian noise. The distractor variant appends
//! class-independent noise coordinates whose variance is meant to dwarf the
//! signal, so nearest-prototype distances get swamped unless something
//! suppresses or reweights those axes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::episodes::{Dataset, Split};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Isotropic Gaussian blobs: `classes` means on the unit sphere in `dim`
/// dimensions, `per_class` samples each with noise `sigma`. `sigma` of zero
/// degenerates to every item equalling its class mean.
pub fn generate_blobs<T: Scalar>(
    classes: usize,
    dim: usize,
    per_class: usize,
    sigma: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    generate(classes, dim, 0, per_class, sigma, 0.0, seed)
}

/// Blobs in the first `signal_dim` coordinates plus `distractor_dim`
/// class-independent noise coordinates of scale `sigma_distractor`.
/// `distractor_dim` of zero reduces to [`generate_blobs`] exactly.
pub fn generate_distractor<T: Scalar>(
    classes: usize,
    signal_dim: usize,
    distractor_dim: usize,
    per_class: usize,
    sigma_signal: f64,
    sigma_distractor: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if distractor_dim != 0 && distractor_dim < signal_dim {
        return Err(Error::InvalidArgument(format!(
            "distractor_dim ({distractor_dim}) must be 0 or >= signal_dim ({signal_dim})"
        )));
    }
    generate(
        classes,
        signal_dim,
        distractor_dim,
        per_class,
        sigma_signal,
        sigma_distractor,
        seed,
    )
}

fn generate<T: Scalar>(
    classes: usize,
    signal_dim: usize,
    distractor_dim: usize,
    per_class: usize,
    sigma_signal: f64,
    sigma_distractor: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if classes < 5 {
        return Err(Error::InvalidArgument(format!(
            "need at least 5 classes, got {classes}"
        )));
    }
    if signal_dim == 0 {
        return Err(Error::InvalidArgument("signal dimension must be >= 1".into()));
    }
    if per_class < 20 {
        return Err(Error::InvalidArgument(format!(
            "need at least 20 items per class, got {per_class}"
        )));
    }
    for (name, sigma) in [("sigma", sigma_signal), ("sigma_distractor", sigma_distractor)] {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{name} must be finite and non-negative, got {sigma}"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");

    // All class means first, then all items, so the stream layout is easy
    // to reason about when comparing generator variants.
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| loop {
            let v: Vec<f64> = (0..signal_dim).map(|_| unit.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.iter().map(|x| x / norm).collect();
            }
        })
        .collect();

    let dim = signal_dim + distractor_dim;
    let mut items = Vec::with_capacity(classes * per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            let mut data = Vec::with_capacity(dim);
            for &m in mean {
                data.push(T::from_f64(m + sigma_signal * unit.sample(&mut rng)));
            }
            for _ in 0..distractor_dim {
                data.push(T::from_f64(sigma_distractor * unit.sample(&mut rng)));
            }
            items.push((Tensor::from_vec(vec![dim], data)?, class as u32));
        }
    }
    Dataset::new(items, Split::Train)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_bookkeeping() {
        let ds = generate_blobs::<f64>(20, 16, 100, 0.3, 11).unwrap();
        assert_eq!(ds.len(), 2000);
        assert_eq!(ds.class_count(), 20);
        assert_eq!(ds.item_shape(), &[16]);
        for class in ds.classes() {
            assert_eq!(ds.items_of(class).len(), 100);
        }
    }

    #[test]
    fn blobs_same_seed_identical_different_seed_not() {
        let a = generate_blobs::<f64>(5, 4, 20, 0.2, 1).unwrap();
        let b = generate_blobs::<f64>(5, 4, 20, 0.2, 1).unwrap();
        let c = generate_blobs::<f64>(5, 4, 20, 0.2, 2).unwrap();
        for i in 0..a.len() {
            assert_eq!(a.item(i).0, b.item(i).0);
        }
        let differs = (0..a.len()).any(|i| a.item(i).0 != c.item(i).0);
        assert!(differs);
    }

    #[test]
    fn zero_sigma_collapses_items_onto_class_means() {
        let ds = generate_blobs::<f64>(5, 8, 20, 0.0, 3).unwrap();
        for class in ds.classes() {
            let idx = ds.items_of(class);
            let first = ds.item(idx[0]).0;
            // All items of a class coincide and sit on the unit sphere.
            assert!((first.norm() - 1.0).abs() < 1e-12);
            for &i in idx {
                assert_eq!(ds.item(i).0, first);
            }
        }
    }

    #[test]
    fn blob_parameters_are_validated() {
        assert!(generate_blobs::<f64>(4, 8, 20, 0.1, 0).is_err());
        assert!(generate_blobs::<f64>(5, 8, 19, 0.1, 0).is_err());
        assert!(generate_blobs::<f64>(5, 0, 20, 0.1, 0).is_err());
        assert!(generate_blobs::<f64>(5, 8, 20, -0.1, 0).is_err());
        assert!(generate_blobs::<f64>(5, 8, 20, f64::NAN, 0).is_err());
    }

    #[test]
    fn distractor_appends_noise_coordinates() {
        let ds = generate_distractor::<f64>(20, 4, 28, 100, 0.2, 1.0, 3).unwrap();
        assert_eq!(ds.item_shape(), &[32]);
        assert_eq!(ds.len(), 2000);

        // Signal coordinates hug the class mean; distractor coordinates are
        // zero-mean with visibly larger spread.
        let mut signal_var = 0.0;
        let mut distractor_var = 0.0;
        for i in 0..ds.len() {
            let item = ds.item(i).0;
            for d in 0..4 {
                let v = item.data()[d];
                signal_var += v * v;
            }
            for d in 4..32 {
                let v = item.data()[d];
                distractor_var += v * v;
            }
        }
        signal_var /= (ds.len() * 4) as f64;
        distractor_var /= (ds.len() * 28) as f64;
        // Signal energy = mean^2 + sigma^2 is about 0.29; distractor is 1.
        assert!(distractor_var > 2.0 * signal_var);
    }

    #[test]
    fn zero_distractor_dim_equals_blobs_bitwise() {
        let a = generate_distractor::<f64>(6, 5, 0, 20, 0.3, 9.9, 17).unwrap();
        let b = generate_blobs::<f64>(6, 5, 20, 0.3, 17).unwrap();
        assert_eq!(a.len(), b.len());
        for i in 0..a.len() {
            assert_eq!(a.item(i), b.item(i));
        }
    }

    #[test]
    fn distractor_dim_below_signal_dim_is_rejected() {
        let err = generate_distractor::<f64>(5, 4, 2, 20, 0.2, 1.0, 0).unwrap_err();
        assert!(err.to_string().contains("distractor_dim"));
    }
}
