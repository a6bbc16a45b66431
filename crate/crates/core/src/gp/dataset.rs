use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Training data of one acceleration channel, kept in physical units together with the
/// per-column affine maps into the standardized space the kernel works in.
#[derive(Debug, Clone, PartialEq)]
pub struct GpDataset {
    inputs: DMatrix<f64>,
    targets: DVector<f64>,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    target_shift: f64,
    target_scale: f64,
    // row-major standardized inputs, T x d
    z: Vec<f64>,
    y: DVector<f64>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    // constant columns keep unit scale
    let std = if std > 1e-12 * (1.0 + mean.abs()) {
        std
    } else {
        1.0
    };
    (mean, std)
}

impl GpDataset {
    /// Builds a dataset with standardizers fitted to the data (zero mean, unit variance per
    /// input column and for the targets).
    pub fn new(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        Self::check_shapes(&inputs, &targets)?;
        let d = inputs.ncols();
        let mut shift = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for c in 0..d {
            let (m, s) = mean_std(inputs.column(c).iter().copied());
            shift.push(m);
            scale.push(s);
        }
        let (ty, sy) = mean_std(targets.iter().copied());
        Self::with_standardizers(inputs, targets, shift, scale, ty, sy)
    }

    /// Identity standardizers: the kernel sees the raw data.
    pub fn raw(inputs: DMatrix<f64>, targets: DVector<f64>) -> Result<Self> {
        let d = inputs.ncols();
        Self::with_standardizers(inputs, targets, vec![0.0; d], vec![1.0; d], 0.0, 1.0)
    }

    pub fn with_standardizers(
        inputs: DMatrix<f64>,
        targets: DVector<f64>,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
        target_shift: f64,
        target_scale: f64,
    ) -> Result<Self> {
        Self::check_shapes(&inputs, &targets)?;
        let d = inputs.ncols();
        if input_shift.len() != d || input_scale.len() != d {
            return Err(Error::invalid(
                "standardizer length does not match input dimension",
            ));
        }
        if input_scale
            .iter()
            .chain(std::iter::once(&target_scale))
            .any(|s| !(s.is_finite() && *s > 0.0))
            || input_shift.iter().any(|v| !v.is_finite())
            || !target_shift.is_finite()
        {
            return Err(Error::invalid(
                "standardizer scales must be positive and finite",
            ));
        }
        let t = inputs.nrows();
        let mut z = Vec::with_capacity(t * d);
        for i in 0..t {
            for c in 0..d {
                z.push((inputs[(i, c)] - input_shift[c]) / input_scale[c]);
            }
        }
        let y = targets.map(|v| (v - target_shift) / target_scale);
        Ok(Self {
            inputs,
            targets,
            input_shift,
            input_scale,
            target_shift,
            target_scale,
            z,
            y,
        })
    }

    fn check_shapes(inputs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<()> {
        if inputs.nrows() == 0 || inputs.ncols() == 0 {
            return Err(Error::invalid(
                "dataset needs at least one row and one column",
            ));
        }
        if inputs.nrows() != targets.len() {
            return Err(Error::invalid(format!(
                "{} input rows but {} targets",
                inputs.nrows(),
                targets.len()
            )));
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite entries"));
        }
        Ok(())
    }

    /// Rows `indices` of this dataset, sharing its standardizers.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("empty subset"));
        }
        if let Some(i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("row {i} out of range")));
        }
        let inputs = self.inputs.select_rows(indices);
        let targets =
            DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.targets[i]));
        let d = self.dim();
        let mut z = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            z.extend_from_slice(self.z_row(i));
        }
        let y = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.y[i]));
        Ok(Self {
            inputs,
            targets,
            input_shift: self.input_shift.clone(),
            input_scale: self.input_scale.clone(),
            target_shift: self.target_shift,
            target_scale: self.target_scale,
            z,
            y,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    pub fn input_shift(&self) -> &[f64] {
        &self.input_shift
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn target_shift(&self) -> f64 {
        self.target_shift
    }

    pub fn target_scale(&self) -> f64 {
        self.target_scale
    }

    /// Standardized input row `i`.
    pub fn z_row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.z[i * d..(i + 1) * d]
    }

    /// Standardized targets.
    pub fn y_std(&self) -> &DVector<f64> {
        &self.y
    }

    pub(crate) fn z_rows(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.z_row(i).to_vec()).collect()
    }

    pub fn standardize_input(&self, x: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = (x[c] - self.input_shift[c]) / self.input_scale[c];
        }
    }

    /// Converts a physical noise std into the standardized target space.
    pub fn noise_to_std_space(&self, noise_std: f64) -> f64 {
        noise_std / self.target_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizers_fit_mean_and_scale() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 5.0, 2.0, 5.0, 3.0, 5.0]);
        let y = DVector::from_vec(vec![2.0, 4.0, 6.0]);
        let ds = GpDataset::new(x, y).unwrap();
        assert!((ds.input_shift()[0] - 2.0).abs() < 1e-15);
        // constant column falls back to unit scale
        assert_eq!(ds.input_scale()[1], 1.0);
        assert!((ds.y_std().sum()).abs() < 1e-12);
        assert!((ds.z_row(2)[0] - 1.0 / (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        let x = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        assert!(GpDataset::new(x.clone(), DVector::from_vec(vec![1.0])).is_err());
        assert!(GpDataset::new(x, DVector::from_vec(vec![1.0, f64::INFINITY])).is_err());
    }

    #[test]
    fn subset_keeps_standardizers() {
        let x = DMatrix::from_row_slice(4, 1, &[0.0, 1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![0.0, 1.0, 4.0, 9.0]);
        let ds = GpDataset::new(x, y).unwrap();
        let sub = ds.subset(&[1, 3]).unwrap();
        assert_eq!(sub.target_scale(), ds.target_scale());
        assert_eq!(sub.z_row(1), ds.z_row(3));
        assert_eq!(sub.targets()[1], 9.0);
        assert!(ds.subset(&[4]).is_err());
    }
}
