//! Squared-exponential kernel with per-dimension lengthscales.
//!
//! The kernel is `k(a, b) = exp(-sum_m ((a_m - b_m) / l_m)^2)`: no one-half factor in the
//! exponent and unit signal amplitude. Targets are standardized to unit variance, which stands
//! in for the missing amplitude hyperparameter.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default noise floor imposed during hyperparameter training (target units).
pub const NOISE_STD_FLOOR: f64 = 0.15;
/// Initial diagonal jitter; escalated by x10 up to [`MAX_JITTER`] when a factorization fails.
pub const DEFAULT_JITTER: f64 = 1e-9;
pub const MAX_JITTER: f64 = 1e-6;

/// Hyperparameters of one acceleration channel.
///
/// Lengthscales act on standardized inputs. `noise_std` is expressed in target units and is
/// converted to the standardized target space internally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub noise_std: f64,
    pub jitter: f64,
}

impl KernelParams {
    pub fn new(lengthscales: Vec<f64>, noise_std: f64) -> Result<Self> {
        let params = Self {
            lengthscales,
            noise_std,
            jitter: DEFAULT_JITTER,
        };
        params.validate()?;
        Ok(params)
    }

    /// Isotropic parameters, mostly useful in tests.
    pub fn isotropic(dim: usize, lengthscale: f64, noise_std: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], noise_std)
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("kernel needs at least one lengthscale"));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::invalid(format!(
                "lengthscale must be positive, got {l}"
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::invalid(format!(
                "noise std must be non-negative, got {}",
                self.noise_std
            )));
        }
        if !(self.jitter.is_finite() && self.jitter > 0.0) {
            return Err(Error::invalid("jitter must be positive"));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn scaled_sq_dist(lengthscales: &[f64], a: &[f64], b: &[f64]) -> f64 {
    lengthscales
        .iter()
        .zip(a.iter().zip(b))
        .map(|(l, (x, y))| {
            let r = (x - y) / l;
            r * r
        })
        .sum()
}

fn check_pair(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<()> {
    let d = params.dim();
    if a.len() != d || b.len() != d {
        return Err(Error::invalid(format!(
            "dimension mismatch: kernel has {d} lengthscales, inputs have {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("kernel inputs must be finite"));
    }
    Ok(())
}

/// Lengthscale-weighted squared distance `sum_m ((a_m - b_m) / l_m)^2`.
///
/// Equal to `-ln kernel_eval(a, b)`; nearest-neighbour selection uses it as its metric.
pub fn weighted_distance(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(params, a, b)?;
    Ok(scaled_sq_dist(&params.lengthscales, a, b))
}

pub fn kernel_eval(params: &KernelParams, a: &[f64], b: &[f64]) -> Result<f64> {
    Ok((-weighted_distance(params, a, b)?).exp())
}

/// Covariance matrix over the rows of `x` (one input per row).
pub fn gram_matrix(params: &KernelParams, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.nrows() == 0 {
        return Err(Error::invalid("gram matrix needs at least one row"));
    }
    if x.ncols() != params.dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} columns vs {} lengthscales",
            x.ncols(),
            params.dim()
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("gram matrix inputs must be finite"));
    }
    let rows: Vec<Vec<f64>> = x.row_iter().map(|r| r.iter().copied().collect()).collect();
    Ok(gram_from_rows(&params.lengthscales, &rows))
}

pub(crate) fn gram_from_rows(lengthscales: &[f64], rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = 1.0;
        for j in 0..i {
            let v = (-scaled_sq_dist(lengthscales, &rows[i], &rows[j])).exp();
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_distance_is_one() {
        let p = KernelParams::isotropic(3, 0.7, 0.1).unwrap();
        let a = [0.3, -1.0, 2.0];
        assert_eq!(kernel_eval(&p, &a, &a).unwrap(), 1.0);
    }

    #[test]
    fn unit_distance_closed_form() {
        let p = KernelParams::isotropic(1, 1.0, 0.1).unwrap();
        let v = kernel_eval(&p, &[0.0], &[1.0]).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = KernelParams::isotropic(2, 1.0, 0.1).unwrap();
        assert!(matches!(
            kernel_eval(&p, &[0.0], &[1.0, 2.0]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn weighted_distance_examples() {
        let p = KernelParams::isotropic(1, 2.0, 0.1).unwrap();
        assert_eq!(weighted_distance(&p, &[0.0], &[2.0]).unwrap(), 1.0);
        assert_eq!(weighted_distance(&p, &[1.5], &[1.5]).unwrap(), 0.0);
    }

    #[test]
    fn gram_small_cases() {
        let p = KernelParams::isotropic(2, 1.0, 0.1).unwrap();
        let one = DMatrix::from_row_slice(1, 2, &[0.4, 0.1]);
        assert_eq!(
            gram_matrix(&p, &one).unwrap(),
            DMatrix::from_element(1, 1, 1.0)
        );
        let twins = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.4, 0.1]);
        assert_eq!(
            gram_matrix(&p, &twins).unwrap(),
            DMatrix::from_element(2, 2, 1.0)
        );
        let bad = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.1]);
        assert!(gram_matrix(&p, &bad).is_err());
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(KernelParams::new(vec![1.0, 0.0], 0.1).is_err());
        assert!(KernelParams::new(vec![1.0], -0.1).is_err());
        assert!(KernelParams::new(vec![], 0.1).is_err());
    }
}
