use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::GpDataset;
use super::kernel::{KernelParams, DEFAULT_JITTER, NOISE_STD_FLOOR};
use super::model::log_ml_with_grad;
use crate::error::{Error, Result};

/// Minibatch marginal-likelihood training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Lower bound on `noise_std`, target units.
    pub noise_floor: f64,
    pub seed: u64,
    /// Starting lengthscale (standardized inputs) for every dimension.
    pub init_lengthscale: f64,
    /// Starting noise std in target units; defaults to a fifth of the target spread.
    pub init_noise_std: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 100,
            epochs: 400,
            learning_rate: 0.001,
            noise_floor: NOISE_STD_FLOOR,
            seed: 0,
            init_lengthscale: 1.5,
            init_noise_std: None,
        }
    }
}

/// Adam state for gradient ascent.
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn ascend(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            theta[i] += self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn params_from_theta(theta: &[f64], jitter: f64) -> KernelParams {
    let d = theta.len() - 1;
    KernelParams {
        lengthscales: theta[..d].iter().map(|t| t.exp()).collect(),
        noise_std: theta[d].exp(),
        jitter,
    }
}

/// Maximizes the marginal likelihood over shuffled minibatches with Adam in log-space.
///
/// The noise std is projected onto `[noise_floor, inf)` after every update. Deterministic for a
/// fixed `config.seed`.
pub fn train_hyperparams(dataset: &GpDataset, config: &TrainConfig) -> Result<KernelParams> {
    let init = KernelParams {
        lengthscales: vec![config.init_lengthscale; dataset.dim()],
        noise_std: config
            .init_noise_std
            .unwrap_or(0.2 * dataset.target_scale())
            .max(config.noise_floor),
        jitter: DEFAULT_JITTER,
    };
    train_hyperparams_from(dataset, init, config)
}

pub fn train_hyperparams_from(
    dataset: &GpDataset,
    init: KernelParams,
    config: &TrainConfig,
) -> Result<KernelParams> {
    init.validate()?;
    if init.dim() != dataset.dim() {
        return Err(Error::invalid(
            "initial parameters do not match dataset dimension",
        ));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) || !(config.noise_floor > 0.0) {
        return Err(Error::invalid(
            "batch size, learning rate and noise floor must be positive",
        ));
    }
    let d = dataset.dim();
    let jitter = init.jitter;
    let mut theta: Vec<f64> = init.lengthscales.iter().map(|l| l.ln()).collect();
    theta.push(init.noise_std.max(config.noise_floor).ln());
    let log_floor = config.noise_floor.ln();

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut adam = Adam::new(d + 1, config.learning_rate);
    let mut last_good = params_from_theta(&theta, jitter);
    let y_all = dataset.y_std();

    for _epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let rows: Vec<Vec<f64>> = batch.iter().map(|&i| dataset.z_row(i).to_vec()).collect();
            let y = nalgebra::DVector::from_iterator(batch.len(), batch.iter().map(|&i| y_all[i]));
            let ls: Vec<f64> = theta[..d].iter().map(|t| t.exp()).collect();
            let sigma = dataset.noise_to_std_space(theta[d].exp());
            let grad = match log_ml_with_grad(&ls, sigma, jitter, &rows, &y) {
                Ok((_, g)) => g,
                Err(e) => {
                    return Err(Error::TrainingFailure {
                        reason: e.to_string(),
                        last_params: Box::new(last_good),
                    })
                }
            };
            adam.ascend(&mut theta, &grad);
            if theta[d] < log_floor {
                theta[d] = log_floor;
            }
            if theta.iter().any(|t| !t.is_finite()) {
                return Err(Error::TrainingFailure {
                    reason: "non-finite hyperparameters".into(),
                    last_params: Box::new(last_good),
                });
            }
            last_good = params_from_theta(&theta, jitter);
        }
    }
    Ok(last_good)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};

    #[test]
    fn defaults_match_published_configuration() {
        let c = TrainConfig::default();
        assert_eq!(
            (c.batch_size, c.epochs, c.learning_rate, c.noise_floor),
            (100, 400, 0.001, 0.15)
        );
    }

    #[test]
    fn constant_targets_drive_noise_to_floor() {
        let n = 40;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 * 0.1);
        let ds = GpDataset::new(x, DVector::from_element(n, 1.25)).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let p = train_hyperparams(&ds, &cfg).unwrap();
        assert_eq!(p.noise_std, 0.15);
    }

    #[test]
    fn deterministic_under_seed() {
        let n = 60;
        let x = DMatrix::from_fn(n, 2, |i, j| ((i * 13 + j * 5) % 17) as f64 * 0.2);
        let y = DVector::from_fn(n, |i, _| (x[(i, 0)] - x[(i, 1)]).sin());
        let ds = GpDataset::new(x, y).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            batch_size: 16,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = train_hyperparams(&ds, &cfg).unwrap();
        let b = train_hyperparams(&ds, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
