//! Two-stage model reduction: offline Subset-of-Data selection driven by the posterior
//! variance, then online nearest-neighbour local models along the predicted horizon.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{GpDataset, GpModel, KernelParams};

pub use crate::gp::weighted_distance;

/// Default SoD threshold, as a multiple of the (standardized) noise variance.
pub const DEFAULT_SOD_THRESHOLD: f64 = 1.0;
/// Default neighbour counts for the lateral and yaw channels.
pub const DEFAULT_NN_LATERAL: usize = 30;
pub const DEFAULT_NN_YAW: usize = 50;

/// Indices of the retained training rows, in increasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SodSet {
    pub indices: Vec<usize>,
    pub threshold_factor: f64,
    pub params: KernelParams,
}

impl SodSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Growing lower-triangular factor of `K_S + (sigma^2 + jitter) I`.
struct IncrementalChol {
    rows: Vec<Vec<f64>>,
    diag_add: f64,
}

impl IncrementalChol {
    fn new(diag_add: f64) -> Self {
        Self {
            rows: Vec::new(),
            diag_add,
        }
    }

    /// Solves `L v = k` by forward substitution.
    fn forward(&self, k: &[f64]) -> Vec<f64> {
        let mut v = Vec::with_capacity(k.len());
        for (i, row) in self.rows.iter().enumerate() {
            let s: f64 = row[..i].iter().zip(&v).map(|(a, b)| a * b).sum();
            v.push((k[i] - s) / row[i]);
        }
        v
    }

    fn push(&mut self, mut v: Vec<f64>) -> Result<()> {
        let d2 = 1.0 + self.diag_add - v.iter().map(|x| x * x).sum::<f64>();
        if !(d2 > 0.0) {
            return Err(Error::numerical(
                "incremental Cholesky lost positive definiteness",
            ));
        }
        v.push(d2.sqrt());
        self.rows.push(v);
        Ok(())
    }
}

/// Greedy Subset-of-Data selection.
///
/// Rows are visited in dataset order; row 0 seeds the subset and row `j` is appended when its
/// posterior variance under the current subset exceeds `threshold_factor * sigma_n^2`, both in
/// standardized units.
pub fn sod_reduce(
    params: &KernelParams,
    dataset: &GpDataset,
    threshold_factor: f64,
) -> Result<SodSet> {
    params.validate()?;
    if params.dim() != dataset.dim() {
        return Err(Error::invalid("kernel dimension does not match dataset"));
    }
    if !(threshold_factor >= 0.0 && threshold_factor.is_finite()) {
        return Err(Error::invalid(
            "threshold factor must be a non-negative number",
        ));
    }
    let sigma = dataset.noise_to_std_space(params.noise_std);
    let threshold = threshold_factor * sigma * sigma;
    let ls = &params.lengthscales;

    let mut chol = IncrementalChol::new(sigma * sigma + params.jitter);
    let mut indices = vec![0];
    chol.push(Vec::new())?;
    for j in 1..dataset.len() {
        let zj = dataset.z_row(j);
        let k: Vec<f64> = indices
            .iter()
            .map(|&i| (-crate::gp_kernel_dist(ls, zj, dataset.z_row(i))).exp())
            .collect();
        let v = chol.forward(&k);
        let var = 1.0 - v.iter().map(|x| x * x).sum::<f64>();
        if var > threshold {
            chol.push(v)?;
            indices.push(j);
        }
    }
    Ok(SodSet {
        indices,
        threshold_factor,
        params: params.clone(),
    })
}

/// A GP refitted on the nearest SoD points of one anchor.
#[derive(Debug, Clone)]
pub struct LocalModel {
    /// Dataset rows used by the model, increasing.
    pub indices: Vec<usize>,
    pub model: GpModel,
    /// Query point (physical units) that selected the neighbours.
    pub anchor: Vec<f64>,
}

/// Fits a GP over `indices` of `dataset`, reusing its standardizers and the given kernel.
pub fn build_local_model(
    dataset: &GpDataset,
    params: &KernelParams,
    indices: &[usize],
    anchor: &[f64],
) -> Result<LocalModel> {
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let subset = dataset.subset(&sorted)?;
    Ok(LocalModel {
        model: GpModel::fit(params, &subset)?,
        indices: sorted,
        anchor: anchor.to_vec(),
    })
}

/// A training set together with its SoD selection, ready for online neighbour queries.
#[derive(Debug, Clone)]
pub struct SparseGp {
    dataset: Arc<GpDataset>,
    sod: SodSet,
}

impl SparseGp {
    pub fn new(dataset: Arc<GpDataset>, sod: SodSet) -> Result<Self> {
        if sod.is_empty() {
            return Err(Error::invalid("empty SoD set"));
        }
        if sod.indices.windows(2).any(|w| w[0] >= w[1])
            || *sod.indices.last().unwrap() >= dataset.len()
        {
            return Err(Error::invalid(
                "SoD indices must be increasing and in range",
            ));
        }
        Ok(Self { dataset, sod })
    }

    pub fn dataset(&self) -> &GpDataset {
        &self.dataset
    }

    pub fn sod(&self) -> &SodSet {
        &self.sod
    }

    pub fn params(&self) -> &KernelParams {
        &self.sod.params
    }

    /// Model over the whole SoD set.
    pub fn sod_model(&self) -> Result<GpModel> {
        GpModel::fit(&self.sod.params, &self.dataset.subset(&self.sod.indices)?)
    }

    /// The `t_nn` SoD rows closest to `query` (physical units) under the lengthscale-weighted
    /// metric, ordered by distance with ties going to the lower dataset index.
    pub fn nn_select(&self, query: &[f64], t_nn: usize) -> Result<Vec<usize>> {
        if t_nn == 0 {
            return Err(Error::invalid("neighbour count must be at least 1"));
        }
        if query.len() != self.dataset.dim() {
            return Err(Error::invalid("query dimension mismatch"));
        }
        let mut z = vec![0.0; query.len()];
        self.dataset.standardize_input(query, &mut z);
        let ls = &self.sod.params.lengthscales;
        let mut scored: Vec<(f64, usize)> = self
            .sod
            .indices
            .iter()
            .map(|&i| (crate::gp_kernel_dist(ls, &z, self.dataset.z_row(i)), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if t_nn < scored.len() {
            scored.select_nth_unstable_by(t_nn - 1, cmp);
            scored.truncate(t_nn);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored.into_iter().map(|(_, i)| i).collect())
    }

    pub fn build_local_model(&self, indices: &[usize], anchor: &[f64]) -> Result<LocalModel> {
        build_local_model(&self.dataset, &self.sod.params, indices, anchor)
    }

    /// One local model per anchor, in anchor order. Anchors that select the same neighbour set
    /// share a single factorization.
    pub fn select_along_horizon(
        &self,
        anchors: &[Vec<f64>],
        t_nn: usize,
    ) -> Result<Vec<Arc<LocalModel>>> {
        let mut cache: HashMap<Vec<usize>, Arc<LocalModel>> = HashMap::new();
        let mut out = Vec::with_capacity(anchors.len());
        for anchor in anchors {
            let mut idx = self.nn_select(anchor, t_nn)?;
            idx.sort_unstable();
            let model = match cache.get(&idx) {
                Some(m) => Arc::clone(m),
                None => {
                    let m = Arc::new(self.build_local_model(&idx, anchor)?);
                    cache.insert(idx, Arc::clone(&m));
                    m
                }
            };
            out.push(model);
        }
        Ok(out)
    }
}
