use gpkart::gp::{
    gram_matrix, kernel_eval, train_hyperparams, GpDataset, GpModel, KernelParams, TrainConfig,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const D: usize = 6;

fn random_dataset(rng: &mut ChaCha8Rng, t: usize, d: usize) -> GpDataset {
    let x = DMatrix::from_fn(t, d, |_, c| {
        rng.random_range(-2.0..2.0) * (c + 1) as f64 + c as f64
    });
    let y = DVector::from_fn(t, |i, _| {
        let row = x.row(i);
        5.0 + 3.0 * row[0].sin() + 0.3 * row[d - 1] + rng.random_range(-0.2..0.2)
    });
    GpDataset::new(x, y).unwrap()
}

fn random_params(rng: &mut ChaCha8Rng, d: usize) -> KernelParams {
    let ls = (0..d).map(|_| rng.random_range(0.5..3.0)).collect();
    KernelParams::new(ls, rng.random_range(0.3..1.5)).unwrap()
}

/// Posterior computed from scratch: own standardization, naive kernel loops and an explicit
/// LU inverse of the regularized Gram matrix.
struct DenseOracle {
    mu_x: Vec<f64>,
    sd_x: Vec<f64>,
    mu_y: f64,
    sd_y: f64,
    z: Vec<Vec<f64>>,
    kinv: DMatrix<f64>,
    ys: DVector<f64>,
    ls: Vec<f64>,
}

fn column_stats(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
    (m, s)
}

fn naive_kernel(ls: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let mut e = 0.0;
    for m in 0..ls.len() {
        let r = (a[m] - b[m]) / ls[m];
        e += r * r;
    }
    (-e).exp()
}

impl DenseOracle {
    fn new(ds: &GpDataset, params: &KernelParams, jitter: f64) -> Self {
        let (t, d) = (ds.len(), ds.dim());
        let mut mu_x = vec![0.0; d];
        let mut sd_x = vec![0.0; d];
        for c in 0..d {
            let col: Vec<f64> = ds.inputs().column(c).iter().copied().collect();
            (mu_x[c], sd_x[c]) = column_stats(&col);
        }
        let (mu_y, sd_y) = column_stats(ds.targets().as_slice());
        let z: Vec<Vec<f64>> = (0..t)
            .map(|i| {
                (0..d)
                    .map(|c| (ds.inputs()[(i, c)] - mu_x[c]) / sd_x[c])
                    .collect()
            })
            .collect();
        let sigma = params.noise_std / sd_y;
        let mut k = DMatrix::from_fn(t, t, |i, j| {
            naive_kernel(&params.lengthscales, &z[i], &z[j])
        });
        for i in 0..t {
            k[(i, i)] += sigma * sigma + jitter;
        }
        let kinv = k.clone().try_inverse().unwrap();
        let ys = DVector::from_fn(t, |i, _| (ds.targets()[i] - mu_y) / sd_y);
        Self {
            mu_x,
            sd_x,
            mu_y,
            sd_y,
            z,
            kinv,
            ys,
            ls: params.lengthscales.clone(),
        }
    }

    fn kstar(&self, x: &[f64]) -> DVector<f64> {
        let zq: Vec<f64> = (0..x.len())
            .map(|c| (x[c] - self.mu_x[c]) / self.sd_x[c])
            .collect();
        DVector::from_fn(self.z.len(), |i, _| naive_kernel(&self.ls, &zq, &self.z[i]))
    }

    fn mean(&self, x: &[f64]) -> f64 {
        let k = self.kstar(x);
        self.mu_y + self.sd_y * (k.transpose() * &self.kinv * &self.ys)[0]
    }

    fn variance(&self, x: &[f64]) -> f64 {
        let k = self.kstar(x);
        1.0 - (k.transpose() * &self.kinv * &k)[0]
    }

    fn log_ml(&self) -> f64 {
        let n = self.ys.len() as f64;
        let det = self.kinv.clone().try_inverse().unwrap().determinant();
        -0.5 * (self.ys.transpose() * &self.kinv * &self.ys)[0]
            - 0.5 * det.ln()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn random_query(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d)
        .map(|c| rng.random_range(-2.5..2.5) * (c + 1) as f64 + c as f64)
        .collect()
}

#[test]
fn posterior_matches_dense_inverse_on_twenty_datasets() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let t = rng.random_range(5..=100);
        let ds = random_dataset(&mut rng, t, D);
        let params = random_params(&mut rng, D);
        let model = GpModel::fit(&params, &ds).unwrap();
        let oracle = DenseOracle::new(&ds, &params, model.jitter_used());
        for _ in 0..25 {
            let q = random_query(&mut rng, D);
            let m = model.posterior_mean(&q).unwrap();
            let mo = oracle.mean(&q);
            worst = worst.max((m - mo).abs() / mo.abs().max(oracle.sd_y));
            let v = model.posterior_variance(&q).unwrap();
            let vo = oracle.variance(&q).max(0.0);
            worst = worst.max((v - vo).abs() / vo.max(1.0));
        }
        let alpha_oracle = &oracle.kinv * &oracle.ys;
        let rel = (model.alpha() - &alpha_oracle).norm() / alpha_oracle.norm();
        assert!(rel <= 1e-8, "alpha relative error {rel:e}");
    }
    assert!(worst <= 1e-8, "worst relative error {worst:e}");
}

#[test]
fn log_ml_matches_dense_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let ds = random_dataset(&mut rng, 40, D);
        let params = random_params(&mut rng, D);
        let model = GpModel::fit(&params, &ds).unwrap();
        let (value, _) = model.log_marginal_likelihood().unwrap();
        let oracle = DenseOracle::new(&ds, &params, model.jitter_used()).log_ml();
        assert!(
            (value - oracle).abs() <= 1e-8 * oracle.abs().max(1.0),
            "{value} vs {oracle}"
        );
    }
}

fn log_ml_at(ds: &GpDataset, log_theta: &[f64]) -> f64 {
    let d = ds.dim();
    let ls = log_theta[..d].iter().map(|v| v.exp()).collect();
    let params = KernelParams::new(ls, log_theta[d].exp()).unwrap();
    GpModel::fit(&params, ds)
        .unwrap()
        .log_marginal_likelihood()
        .unwrap()
        .0
}

#[test]
fn log_ml_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..10 {
        let t = rng.random_range(20..=60);
        let ds = random_dataset(&mut rng, t, D);
        let params = random_params(&mut rng, D);
        let model = GpModel::fit(&params, &ds).unwrap();
        let (_, grad) = model.log_marginal_likelihood().unwrap();
        let mut theta: Vec<f64> = params.lengthscales.iter().map(|l| l.ln()).collect();
        theta.push(params.noise_std.ln());
        for k in 0..theta.len() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += h;
            dn[k] -= h;
            let fd = (log_ml_at(&ds, &up) - log_ml_at(&ds, &dn)) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(1e-2);
            assert!(
                rel <= 1e-4,
                "component {k}: analytic {} fd {fd} rel {rel:e}",
                grad[k]
            );
        }
    }
}

#[test]
fn noise_scan_peaks_where_gradient_vanishes() {
    // On a 1-D grid in ln sigma the log evidence is maximized where the analytic noise
    // gradient changes sign.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let clean = random_dataset(&mut rng, 50, D);
    let noisy = DVector::from_fn(50, |i, _| {
        let e: f64 = StandardNormal.sample(&mut rng);
        clean.targets()[i] + e
    });
    let ds = GpDataset::new(clean.inputs().clone(), noisy).unwrap();
    let ls = vec![3.0; D];
    let grid: Vec<f64> = (0..141).map(|i| -4.0 + 0.05 * i as f64).collect();
    let values: Vec<f64> = grid
        .iter()
        .map(|&g| {
            let mut th: Vec<f64> = ls.iter().map(|l: &f64| l.ln()).collect();
            th.push(g);
            log_ml_at(&ds, &th)
        })
        .collect();
    let best = (0..grid.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap();
    assert!(
        best > 0 && best < grid.len() - 1,
        "scan maximum at the grid edge ({best})"
    );
    let grad_at = |g: f64| {
        let p = KernelParams::new(ls.clone(), g.exp()).unwrap();
        GpModel::fit(&p, &ds)
            .unwrap()
            .log_marginal_likelihood()
            .unwrap()
            .1[D]
    };
    assert!(grad_at(grid[best - 1]) > 0.0);
    assert!(grad_at(grid[best + 1]) < 0.0);

    // doubling sigma moves the value by exactly the scan difference
    let p1 = KernelParams::new(ls.clone(), 0.4).unwrap();
    let p2 = KernelParams::new(ls.clone(), 0.8).unwrap();
    let v1 = GpModel::fit(&p1, &ds)
        .unwrap()
        .log_marginal_likelihood()
        .unwrap()
        .0;
    let v2 = GpModel::fit(&p2, &ds)
        .unwrap()
        .log_marginal_likelihood()
        .unwrap()
        .0;
    let mut th: Vec<f64> = ls.iter().map(|l| l.ln()).collect();
    th.push(0.4f64.ln());
    let s1 = log_ml_at(&ds, &th);
    th[D] = 0.8f64.ln();
    let s2 = log_ml_at(&ds, &th);
    assert!(((v2 - v1) - (s2 - s1)).abs() < 1e-10);
}

#[test]
fn mean_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let ds = random_dataset(&mut rng, 60, D);
        let params = random_params(&mut rng, D);
        let model = GpModel::fit(&params, &ds).unwrap();
        let q = random_query(&mut rng, D);
        let grad = model.mean_gradient(&q).unwrap();
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        for m in 0..D {
            let h = 1e-5 * (1.0 + q[m].abs());
            let mut up = q.clone();
            let mut dn = q.clone();
            up[m] += h;
            dn[m] -= h;
            let fd = (model.posterior_mean(&up).unwrap() - model.posterior_mean(&dn).unwrap())
                / (2.0 * h);
            let rel = (grad[m] - fd).abs() / gnorm.max(1e-8);
            assert!(rel <= 1e-6, "dim {m}: analytic {} fd {fd}", grad[m]);
        }
    }
}

#[test]
fn far_query_has_vanishing_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let ds = random_dataset(&mut rng, 30, D);
    let model = GpModel::fit(&random_params(&mut rng, D), &ds).unwrap();
    let g = model.mean_gradient(&[1e3; D]).unwrap();
    assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
}

#[test]
fn kernel_symmetric_and_positive() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let params = random_params(&mut rng, D);
    for _ in 0..1000 {
        let a = random_query(&mut rng, D);
        let b = random_query(&mut rng, D);
        let kab = kernel_eval(&params, &a, &b).unwrap();
        assert_eq!(kab, kernel_eval(&params, &b, &a).unwrap());
        assert!(kab > 0.0 && kab <= 1.0);
        assert!((kab - naive_kernel(&params.lengthscales, &a, &b)).abs() <= 1e-12);
    }
    let x = DMatrix::from_fn(20, D, |_, _| rng.random_range(-1.0..1.0));
    let k = gram_matrix(&params, &x).unwrap();
    for i in 0..20 {
        for j in 0..20 {
            let row_i: Vec<f64> = x.row(i).iter().copied().collect();
            let row_j: Vec<f64> = x.row(j).iter().copied().collect();
            assert_eq!(k[(i, j)], kernel_eval(&params, &row_i, &row_j).unwrap());
        }
    }
    let eig = k.symmetric_eigenvalues();
    assert!(eig.min() >= -1e-10, "gram matrix eigenvalue {}", eig.min());
}

#[test]
fn variance_non_negative_on_random_queries() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..5 {
        let ds = random_dataset(&mut rng, 80, D);
        let mut params = random_params(&mut rng, D);
        params.noise_std = 1e-3;
        let model = GpModel::fit(&params, &ds).unwrap();
        for i in 0..1000 {
            // half of the queries sit on training inputs, where the variance is smallest
            let q: Vec<f64> = if i % 2 == 0 {
                ds.inputs().row(i % ds.len()).iter().copied().collect()
            } else {
                random_query(&mut rng, D)
            };
            let v = model.posterior_variance(&q).unwrap();
            assert!(v >= -1e-10);
        }
    }
}

#[test]
fn jitter_only_noise_interpolates_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let ds = random_dataset(&mut rng, 30, D);
    let params = KernelParams::new(vec![2.0; D], 0.0).unwrap();
    let model = GpModel::fit(&params, &ds).unwrap();
    for i in 0..ds.len() {
        let q: Vec<f64> = ds.inputs().row(i).iter().copied().collect();
        let err = (model.posterior_mean(&q).unwrap() - ds.targets()[i]) / ds.target_scale();
        assert!(err.abs() <= 1e-6, "row {i}: standardized error {err:e}");
    }
}

#[test]
fn row_permutation_leaves_posterior_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let ds = random_dataset(&mut rng, 70, D);
    let params = random_params(&mut rng, D);
    let mut perm: Vec<usize> = (0..ds.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let x = DMatrix::from_fn(ds.len(), D, |i, c| ds.inputs()[(perm[i], c)]);
    let y = DVector::from_fn(ds.len(), |i, _| ds.targets()[perm[i]]);
    let shuffled = GpDataset::new(x, y).unwrap();
    let a = GpModel::fit(&params, &ds).unwrap();
    let b = GpModel::fit(&params, &shuffled).unwrap();
    let la = a.log_marginal_likelihood().unwrap().0;
    let lb = b.log_marginal_likelihood().unwrap().0;
    assert!((la - lb).abs() <= 1e-10 * la.abs().max(1.0));
    for _ in 0..200 {
        let q = random_query(&mut rng, D);
        let dm = a.posterior_mean(&q).unwrap() - b.posterior_mean(&q).unwrap();
        let dv = a.posterior_variance(&q).unwrap() - b.posterior_variance(&q).unwrap();
        assert!(
            dm.abs() <= 1e-10 * ds.target_scale(),
            "mean differs by {dm:e}"
        );
        assert!(dv.abs() <= 1e-10, "variance differs by {dv:e}");
    }
}

/// Draws a function from a zero-mean SE-GP prior on a random design.
fn gp_draw(rng: &mut ChaCha8Rng, t: usize, ls: &[f64], noise: f64) -> GpDataset {
    let d = ls.len();
    let x = DMatrix::from_fn(t, d, |_, _| rng.random_range(-1.7..1.7));
    let params = KernelParams::new(ls.to_vec(), 0.0).unwrap();
    let mut k = gram_matrix(&params, &x).unwrap();
    for i in 0..t {
        k[(i, i)] += 1e-8;
    }
    let l = k.cholesky().unwrap().l();
    let w = DVector::from_fn(t, |_, _| StandardNormal.sample(rng));
    let eps = DVector::from_fn(t, |_, _| {
        let e: f64 = StandardNormal.sample(rng);
        noise * e
    });
    GpDataset::new(x, l * w + eps).unwrap()
}

#[test]
fn training_recovers_lengthscales_of_a_gp_draw() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth = [0.8, 1.6, 3.0];
    let ds = gp_draw(&mut rng, 300, &truth, 0.1);
    let config = TrainConfig {
        epochs: 1500,
        learning_rate: 0.01,
        noise_floor: 1e-3,
        init_lengthscale: 1.0,
        ..TrainConfig::default()
    };
    let params = train_hyperparams(&ds, &config).unwrap();
    for (m, (&l, &t)) in params.lengthscales.iter().zip(&truth).enumerate() {
        // the fitted lengthscale acts on standardized inputs; the truth acts on raw ones
        let l_raw = l * ds.input_scale()[m];
        assert!(
            l_raw / t < 2.0 && t / l_raw < 2.0,
            "dim {m}: fitted {l_raw} truth {t}"
        );
    }
}

#[test]
fn training_is_deterministic_under_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let ds = random_dataset(&mut rng, 250, D);
    let config = TrainConfig {
        epochs: 20,
        seed: 42,
        ..TrainConfig::default()
    };
    let a = train_hyperparams(&ds, &config).unwrap();
    let b = train_hyperparams(&ds, &config).unwrap();
    assert_eq!(a, b);
}
