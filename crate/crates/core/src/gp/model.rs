use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::dataset::GpDataset;
use super::kernel::{gram_from_rows, scaled_sq_dist, KernelParams, MAX_JITTER};
use crate::error::{Error, Result};

/// Variance values in `[-VARIANCE_TOLERANCE, 0)` are clamped to zero; anything more negative is a
/// numerical failure.
pub const VARIANCE_TOLERANCE: f64 = 1e-10;

/// Exact GP posterior for one scalar channel.
///
/// Immutable after [`GpModel::fit`]; predictions only read, so a model can be shared across
/// threads.
#[derive(Debug, Clone)]
pub struct GpModel {
    params: KernelParams,
    dataset: GpDataset,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

/// Factorizes `k + (sigma^2 + jitter) I`, escalating the jitter by x10 up to [`MAX_JITTER`].
pub(crate) fn factorize(
    k: &DMatrix<f64>,
    noise_var: f64,
    jitter: f64,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let mut jitter = jitter;
    loop {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += noise_var + jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
        if jitter >= MAX_JITTER {
            return Err(Error::numerical(format!(
                "Cholesky failed with jitter {jitter:e}"
            )));
        }
        jitter = (jitter * 10.0).min(MAX_JITTER);
    }
}

impl GpModel {
    /// Solves `(K + sigma_n^2 I) alpha = y` on the standardized targets.
    pub fn fit(params: &KernelParams, dataset: &GpDataset) -> Result<Self> {
        params.validate()?;
        if params.dim() != dataset.dim() {
            return Err(Error::invalid(format!(
                "kernel dimension {} does not match dataset dimension {}",
                params.dim(),
                dataset.dim()
            )));
        }
        let rows = dataset.z_rows();
        let k = gram_from_rows(&params.lengthscales, &rows);
        let sigma = dataset.noise_to_std_space(params.noise_std);
        let (chol, jitter_used) = factorize(&k, sigma * sigma, params.jitter)?;
        let alpha = chol.solve(dataset.y_std());
        Ok(Self {
            params: params.clone(),
            dataset: dataset.clone(),
            alpha,
            chol,
            jitter_used,
        })
    }

    /// Rebuilds a model from stored parts, keeping the stored `alpha` verbatim.
    pub(crate) fn from_parts(
        params: KernelParams,
        dataset: GpDataset,
        alpha: DVector<f64>,
    ) -> Result<Self> {
        let mut model = Self::fit(&params, &dataset)?;
        if alpha.len() != model.alpha.len() {
            return Err(Error::invalid("stored alpha has the wrong length"));
        }
        model.alpha = alpha;
        Ok(model)
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Lower-triangular factor of `K + (sigma_n^2 + jitter) I` in standardized space.
    pub fn chol_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Noise std in standardized target units.
    pub fn noise_std_standardized(&self) -> f64 {
        self.dataset.noise_to_std_space(self.params.noise_std)
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    fn check_query(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dataset.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, model expects {}",
                x.len(),
                self.dataset.dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("query must be finite"));
        }
        Ok(())
    }

    fn cross_covariance(&self, z: &[f64]) -> DVector<f64> {
        let ls = &self.params.lengthscales;
        DVector::from_iterator(
            self.len(),
            (0..self.len()).map(|i| (-scaled_sq_dist(ls, z, self.dataset.z_row(i))).exp()),
        )
    }

    fn standardized(&self, x: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; x.len()];
        self.dataset.standardize_input(x, &mut z);
        z
    }

    /// Posterior mean `k_* alpha`, returned in target units.
    pub fn posterior_mean(&self, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        let kstar = self.cross_covariance(&self.standardized(x));
        Ok(self.dataset.target_shift() + self.dataset.target_scale() * kstar.dot(&self.alpha))
    }

    /// Posterior variance of the latent function in standardized units (prior variance 1).
    pub fn posterior_variance(&self, x: &[f64]) -> Result<f64> {
        self.check_query(x)?;
        let kstar = self.cross_covariance(&self.standardized(x));
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&kstar)
            .ok_or_else(|| Error::numerical("triangular solve failed"))?;
        let var = 1.0 - v.norm_squared();
        if var < -VARIANCE_TOLERANCE {
            return Err(Error::numerical(format!(
                "negative posterior variance {var:e}"
            )));
        }
        Ok(var.max(0.0))
    }

    /// Gradient of the posterior mean with respect to the physical input.
    pub fn mean_gradient(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_query(x)?;
        let mut grad = vec![0.0; x.len()];
        self.mean_and_gradient_into(x, &mut grad);
        Ok(grad)
    }

    /// Hot-path evaluation of mean and input-gradient without validation. `x` must have the
    /// model dimension; `grad` receives the gradient in physical units.
    pub fn mean_and_gradient_into(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dataset.dim();
        let ls = &self.params.lengthscales;
        let mut z = [0.0; 16];
        let mut zbuf;
        let z: &mut [f64] = if d <= 16 {
            &mut z[..d]
        } else {
            zbuf = vec![0.0; d];
            &mut zbuf
        };
        self.dataset.standardize_input(x, z);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut mean = 0.0;
        for i in 0..self.len() {
            let row = self.dataset.z_row(i);
            let w = (-scaled_sq_dist(ls, z, row)).exp() * self.alpha[i];
            mean += w;
            for m in 0..d {
                grad[m] -= 2.0 * w * (z[m] - row[m]) / (ls[m] * ls[m]);
            }
        }
        let sy = self.dataset.target_scale();
        for m in 0..d {
            grad[m] *= sy / self.dataset.input_scale()[m];
        }
        self.dataset.target_shift() + sy * mean
    }

    /// Mean only, without validation.
    pub fn mean_unchecked(&self, x: &[f64]) -> f64 {
        let d = self.dataset.dim();
        let ls = &self.params.lengthscales;
        let mut z = vec![0.0; d];
        self.dataset.standardize_input(x, &mut z);
        let mut mean = 0.0;
        for i in 0..self.len() {
            mean += (-scaled_sq_dist(ls, &z, self.dataset.z_row(i))).exp() * self.alpha[i];
        }
        self.dataset.target_shift() + self.dataset.target_scale() * mean
    }

    /// Gaussian log-evidence of the standardized targets and its gradient with respect to
    /// `[ln l_1, .., ln l_d, ln sigma_n]`.
    pub fn log_marginal_likelihood(&self) -> Result<(f64, Vec<f64>)> {
        let rows = self.dataset.z_rows();
        log_ml_with_grad(
            &self.params.lengthscales,
            self.noise_std_standardized(),
            self.jitter_used,
            &rows,
            self.dataset.y_std(),
        )
    }
}

/// Log marginal likelihood and its log-space gradient for standardized data.
pub(crate) fn log_ml_with_grad(
    lengthscales: &[f64],
    sigma: f64,
    jitter: f64,
    rows: &[Vec<f64>],
    y: &DVector<f64>,
) -> Result<(f64, Vec<f64>)> {
    let n = rows.len();
    let d = lengthscales.len();
    let k = gram_from_rows(lengthscales, rows);
    let (chol, _) = factorize(&k, sigma * sigma, jitter)?;
    let alpha = chol.solve(y);
    let l = chol.l_dirty();
    let log_det_half: f64 = (0..n).map(|i| l[(i, i)].ln()).sum();
    let value =
        -0.5 * y.dot(&alpha) - log_det_half - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();

    // W = alpha alpha^T - K^{-1}; dL/dtheta = 1/2 tr(W dK/dtheta)
    let kinv = chol.inverse();
    let mut grad = vec![0.0; d + 1];
    let mut trace_w = 0.0;
    for i in 0..n {
        trace_w += alpha[i] * alpha[i] - kinv[(i, i)];
        for j in 0..i {
            let w = alpha[i] * alpha[j] - kinv[(i, j)];
            let kij = k[(i, j)];
            if kij == 0.0 {
                continue;
            }
            // symmetric pair counted twice, times the 1/2 prefactor
            let c = w * kij * 2.0;
            for m in 0..d {
                let r = (rows[i][m] - rows[j][m]) / lengthscales[m];
                grad[m] += c * r * r;
            }
        }
    }
    grad[d] = sigma * sigma * trace_w;
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::numerical("non-finite marginal likelihood"));
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GpDataset {
        let x = DMatrix::from_row_slice(1, 2, &[0.5, -0.5]);
        GpDataset::raw(x, DVector::from_vec(vec![3.0])).unwrap()
    }

    #[test]
    fn single_point_interpolates() {
        let mut p = KernelParams::isotropic(2, 1.0, 0.0).unwrap();
        p.jitter = 1e-9;
        let m = GpModel::fit(&p, &tiny()).unwrap();
        assert!((m.alpha()[0] - 3.0).abs() < 1e-7);
        assert!((m.posterior_mean(&[0.5, -0.5]).unwrap() - 3.0).abs() < 1e-7);
        assert!(m.posterior_variance(&[0.5, -0.5]).unwrap() < 1e-8);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let ds = GpDataset::new(x, DVector::from_vec(vec![1.0, 3.0])).unwrap();
        let m = GpModel::fit(&KernelParams::isotropic(1, 0.5, 0.1).unwrap(), &ds).unwrap();
        let far = [1e3];
        assert!((m.posterior_mean(&far).unwrap() - 2.0).abs() < 1e-12);
        assert!((m.posterior_variance(&far).unwrap() - 1.0).abs() < 1e-12);
        let g = m.mean_gradient(&far).unwrap();
        assert!(g[0].abs() < 1e-10);
    }

    #[test]
    fn large_noise_shrinks_alpha() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let ds = GpDataset::raw(x, DVector::from_vec(vec![1.0, -1.0, 0.5])).unwrap();
        let sigma = 1e3;
        let m = GpModel::fit(&KernelParams::isotropic(1, 1.0, sigma).unwrap(), &ds).unwrap();
        for i in 0..3 {
            let expected = ds.targets()[i] / (sigma * sigma);
            assert!((m.alpha()[i] - expected).abs() < 1e-8 * expected.abs().max(1e-12) + 1e-12);
        }
        assert!(m.alpha().norm() < 1e-5);
    }

    #[test]
    fn scalar_log_ml() {
        let x = DMatrix::from_row_slice(1, 1, &[0.0]);
        let ds = GpDataset::raw(x, DVector::from_vec(vec![0.0])).unwrap();
        let m = GpModel::fit(&KernelParams::isotropic(1, 1.0, 1.0).unwrap(), &ds).unwrap();
        let (v, _) = m.log_marginal_likelihood().unwrap();
        let expected = -0.5 * (2.0 * std::f64::consts::PI * 2.0).ln();
        assert!((v - expected).abs() < 1e-8);
        assert!((v + 1.2655).abs() < 1e-4);
    }

    #[test]
    fn symmetric_midpoint_has_zero_gradient() {
        let x = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        let ds = GpDataset::raw(x, DVector::from_vec(vec![2.0, 2.0])).unwrap();
        let m = GpModel::fit(&KernelParams::isotropic(1, 1.0, 0.1).unwrap(), &ds).unwrap();
        assert!(m.mean_gradient(&[0.0]).unwrap()[0].abs() < 1e-14);
    }

    #[test]
    fn query_validation() {
        let m = GpModel::fit(&KernelParams::isotropic(2, 1.0, 0.1).unwrap(), &tiny()).unwrap();
        assert!(m.posterior_mean(&[0.0]).is_err());
        assert!(m.posterior_variance(&[0.0, f64::NAN]).is_err());
    }
}
