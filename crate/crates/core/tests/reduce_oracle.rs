use std::sync::Arc;

use gpkart::gp::{kernel_eval, weighted_distance, GpDataset, GpModel, KernelParams};
use gpkart::reduce::{sod_reduce, SparseGp};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: usize = 6;

/// A noisy periodic path through input space (300 samples per lap), sampled in time order like
/// logged driving data.
fn trajectory_dataset(rng: &mut ChaCha8Rng, t: usize) -> GpDataset {
    let phases: Vec<f64> = (0..D).map(|_| rng.random_range(0.0..6.0)).collect();
    let x = DMatrix::from_fn(t, D, |i, c| {
        let tau = i as f64 * std::f64::consts::TAU / 300.0;
        (tau * (1 + c % 3) as f64 + phases[c]).sin() * (1.0 + c as f64)
            + 0.1 * rng.random_range(-1.0..1.0)
    });
    let y = DVector::from_fn(t, |i, _| {
        x[(i, 0)].sin() * 2.0 + x[(i, 2)] * 0.5 + rng.random_range(-0.1..0.1)
    });
    GpDataset::new(x, y).unwrap()
}

fn params() -> KernelParams {
    KernelParams::new(vec![0.7, 1.1, 0.9, 2.0, 1.4, 3.0], 0.15).unwrap()
}

/// Replays the greedy loop with dense refits: every row must be excluded exactly when its
/// variance under the subset selected so far is at or below the threshold.
fn assert_replay(ds: &GpDataset, p: &KernelParams, factor: f64, indices: &[usize]) {
    let sigma = ds.noise_to_std_space(p.noise_std);
    let threshold = factor * sigma * sigma;
    assert_eq!(indices[0], 0);
    let mut excluded_checked = 0;
    // the subset only changes when a row is appended, so fit once per prefix
    for (k, &start) in indices.iter().enumerate() {
        let end = indices.get(k + 1).copied().unwrap_or(ds.len());
        let prefix = ds.subset(&indices[..=k]).unwrap();
        let model = GpModel::fit(p, &prefix).unwrap();
        for j in start + 1..end {
            let q: Vec<f64> = ds.inputs().row(j).iter().copied().collect();
            let v = model.posterior_variance(&q).unwrap();
            assert!(
                v <= threshold + 1e-9,
                "excluded row {j} had variance {v} > {threshold}"
            );
            excluded_checked += 1;
        }
        if let Some(&next) = indices.get(k + 1) {
            let q: Vec<f64> = ds.inputs().row(next).iter().copied().collect();
            let v = model.posterior_variance(&q).unwrap();
            assert!(v > threshold - 1e-9, "included row {next} had variance {v}");
        }
    }
    assert_eq!(excluded_checked + indices.len(), ds.len());
}

#[test]
fn sod_replay_holds() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ds = trajectory_dataset(&mut rng, 1500);
    let p = params();
    for factor in [0.5, 1.0, 2.0] {
        let sod = sod_reduce(&p, &ds, factor).unwrap();
        assert!(sod.len() > 1 && sod.len() < ds.len(), "size {}", sod.len());
        assert_replay(&ds, &p, factor, &sod.indices);
    }
}

#[test]
fn sod_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ds = trajectory_dataset(&mut rng, 800);
    let a = sod_reduce(&params(), &ds, 1.0).unwrap();
    let b = sod_reduce(&params(), &ds, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn raising_threshold_never_grows_the_subset() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ds = trajectory_dataset(&mut rng, 1500);
    let sizes: Vec<usize> = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 64.0]
        .iter()
        .map(|&f| sod_reduce(&params(), &ds, f).unwrap().len())
        .collect();
    assert!(sizes.windows(2).all(|w| w[1] <= w[0]), "sizes {sizes:?}");
}

fn sparse(seed: u64, t: usize) -> SparseGp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ds = Arc::new(trajectory_dataset(&mut rng, t));
    let sod = sod_reduce(&params(), &ds, 0.5).unwrap();
    SparseGp::new(ds, sod).unwrap()
}

/// Sorts every SoD row by its physical-unit weighted distance, ties to the lower index.
fn brute_force_nn(gp: &SparseGp, q: &[f64], t_nn: usize) -> Vec<usize> {
    let ds = gp.dataset();
    let ls = &gp.params().lengthscales;
    let mut scored: Vec<(f64, usize)> = gp
        .sod()
        .indices
        .iter()
        .map(|&i| {
            let mut s = 0.0;
            for m in 0..D {
                let r = (q[m] - ds.inputs()[(i, m)]) / (ds.input_scale()[m] * ls[m]);
                s += r * r;
            }
            (s, i)
        })
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    scored.into_iter().take(t_nn).map(|(_, i)| i).collect()
}

fn random_query(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..D)
        .map(|c| rng.random_range(-1.2..1.2) * (1.0 + c as f64))
        .collect()
}

#[test]
fn nn_select_matches_brute_force_sort() {
    let gp = sparse(4, 1500);
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for k in 0..1000 {
        let q = random_query(&mut rng);
        let t_nn = [1, 5, 30, 50][k % 4];
        assert_eq!(
            gp.nn_select(&q, t_nn).unwrap(),
            brute_force_nn(&gp, &q, t_nn)
        );
    }
}

#[test]
fn ties_go_to_the_lower_index() {
    let x = DMatrix::from_row_slice(4, 1, &[1.0, -1.0, 1.0, 3.0]);
    let ds = Arc::new(GpDataset::raw(x, DVector::from_vec(vec![0.0, 1.0, 2.0, 3.0])).unwrap());
    let p = KernelParams::new(vec![1.0], 0.1).unwrap();
    let sod = sod_reduce(&p, &ds, 0.0).unwrap();
    let gp = SparseGp::new(ds, sod).unwrap();
    assert_eq!(gp.nn_select(&[0.0], 3).unwrap(), vec![0, 1, 2]);
    assert_eq!(gp.nn_select(&[2.0], 2).unwrap(), vec![0, 2]);
}

#[test]
fn distance_and_kernel_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = params();
    for _ in 0..200 {
        let a = random_query(&mut rng);
        let b = random_query(&mut rng);
        let d = weighted_distance(&p, &a, &b).unwrap();
        assert!(((-d).exp() - kernel_eval(&p, &a, &b).unwrap()).abs() <= 1e-12);
    }
}

#[test]
fn local_model_matches_direct_solve() {
    let gp = sparse(6, 1200);
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let ds = gp.dataset();
    let p = gp.params();
    for _ in 0..5 {
        let anchor = random_query(&mut rng);
        let idx = gp.nn_select(&anchor, 30).unwrap();
        let local = gp.build_local_model(&idx, &anchor).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(local.indices, sorted);

        // direct solve in the dataset's standardized space
        let n = sorted.len();
        let z = |i: usize, q: Option<&[f64]>| -> Vec<f64> {
            (0..D)
                .map(|m| {
                    let v = q.map_or(ds.inputs()[(i, m)], |q| q[m]);
                    (v - ds.input_shift()[m]) / ds.input_scale()[m]
                })
                .collect()
        };
        let k_of = |a: &[f64], b: &[f64]| {
            (-(0..D)
                .map(|m| ((a[m] - b[m]) / p.lengthscales[m]).powi(2))
                .sum::<f64>())
            .exp()
        };
        let sigma = ds.noise_to_std_space(p.noise_std);
        let mut k = DMatrix::from_fn(n, n, |a, b| k_of(&z(sorted[a], None), &z(sorted[b], None)));
        for a in 0..n {
            k[(a, a)] += sigma * sigma + local.model.jitter_used();
        }
        let y = DVector::from_fn(n, |a, _| {
            (ds.targets()[sorted[a]] - ds.target_shift()) / ds.target_scale()
        });
        let w = k.lu().solve(&y).unwrap();
        for _ in 0..10 {
            let q: Vec<f64> = anchor
                .iter()
                .map(|v| v + rng.random_range(-0.3..0.3))
                .collect();
            let zq = z(0, Some(&q));
            let kstar = DVector::from_fn(n, |a, _| k_of(&zq, &z(sorted[a], None)));
            let expected = ds.target_shift() + ds.target_scale() * kstar.dot(&w);
            let got = local.model.posterior_mean(&q).unwrap();
            assert!(
                (got - expected).abs() <= 1e-8 * expected.abs().max(ds.target_scale()),
                "{got} vs {expected}"
            );
        }
    }
}

#[test]
fn horizon_selection_matches_per_anchor_sort() {
    let gp = sparse(7, 1500);
    let ds = gp.dataset();
    // anchors walk along the recorded trajectory
    let anchors: Vec<Vec<f64>> = (0..33)
        .map(|k| ds.inputs().row(k * 40 + 3).iter().copied().collect())
        .collect();
    let models = gp.select_along_horizon(&anchors, 30).unwrap();
    assert_eq!(models.len(), anchors.len());
    for (m, a) in models.iter().zip(&anchors) {
        let mut expected = brute_force_nn(&gp, a, 30);
        expected.sort_unstable();
        assert_eq!(m.indices, expected);
    }
}
