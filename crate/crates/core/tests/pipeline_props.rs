use std::sync::Arc;

use gpkart::gp::{GpModel, KernelParams};
use gpkart::pipeline::{
    config_hash, extract_rows, kalman_filter, kalman_smooth, record_run, rmse_report, split_rows,
    write_long_format, DatasetConfig, DriverKind, EvalModels, RecordConfig, TargetSource,
};
use gpkart::reduce::{sod_reduce, SparseGp};
use gpkart::sim::{RunLog, SimConfig};
use gpkart::track::{make_synthetic_track, Track, TrackSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn circuit() -> Arc<Track> {
    Arc::new(make_synthetic_track(&TrackSpec::default_circuit()).unwrap())
}

fn grid(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|i| i as f64 * dt).collect()
}

fn scripted(laps: usize) -> RecordConfig {
    RecordConfig {
        driver: DriverKind::Scripted,
        sim: SimConfig {
            laps: Some(laps),
            ..SimConfig::default()
        },
        dither: None,
        ..RecordConfig::default()
    }
}

#[test]
fn filter_and_smoother_reproduce_a_ramp() {
    let t = grid(200, 0.01);
    let y: Vec<f64> = t.iter().map(|t| -1.5 + 4.0 * t).collect();
    let s = kalman_smooth(&t, &y, 50.0, 0.05).unwrap();
    let f = kalman_filter(&t, &y, 50.0, 0.05).unwrap();
    for i in 0..t.len() {
        assert!((s.values[i] - y[i]).abs() <= 1e-9);
        assert!((s.rates[i] - 4.0).abs() <= 1e-9, "smoothed rate {i}");
        assert!((f.values[i] - y[i]).abs() <= 1e-9);
        assert!((f.rates[i] - 4.0).abs() <= 1e-9, "filtered rate {i}");
    }
}

#[test]
fn smoother_is_symmetric_under_time_reversal() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let half: Vec<f64> = (0..60).map(|_| noise.sample(&mut rng)).collect();
    let mut y = half.clone();
    y.extend(half.iter().rev());
    let t = grid(y.len(), 0.01);
    let s = kalman_smooth(&t, &y, 100.0, 0.1).unwrap();
    let n = y.len();
    for k in 0..n {
        assert!(
            (s.values[k] - s.values[n - 1 - k]).abs() <= 1e-9,
            "value {k}"
        );
        assert!((s.rates[k] + s.rates[n - 1 - k]).abs() <= 1e-9, "rate {k}");
    }
}

#[test]
fn smoother_beats_causal_filter_on_noisy_sinusoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigma = 0.02;
    let noise = Normal::new(0.0, sigma).unwrap();
    let w = 2.0 * std::f64::consts::PI * 0.7;
    let t = grid(1000, 0.01);
    let truth: Vec<f64> = t.iter().map(|t| (w * t).sin()).collect();
    let rate: Vec<f64> = t.iter().map(|t| w * (w * t).cos()).collect();
    let y: Vec<f64> = truth.iter().map(|v| v + noise.sample(&mut rng)).collect();
    let s = kalman_smooth(&t, &y, 400.0, sigma).unwrap();
    let f = kalman_filter(&t, &y, 400.0, sigma).unwrap();
    let rms = |a: &[f64], b: &[f64]| {
        let m = a.len() - 20;
        (a[10..m]
            .iter()
            .zip(&b[10..m])
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            / (m - 10) as f64)
            .sqrt()
    };
    assert!(rms(&s.values, &truth) < sigma);
    assert!(rms(&s.values, &truth) < rms(&f.values, &truth));
    assert!(rms(&s.rates, &rate) < rms(&f.rates, &rate));
}

#[test]
fn malformed_series_are_rejected() {
    let t = [0.0, 0.01, 0.03];
    assert!(kalman_filter(&t, &[0.0; 3], 1.0, 1.0).is_err());
    assert!(kalman_smooth(&[0.0, 0.01], &[0.0; 3], 1.0, 1.0).is_err());
    assert!(kalman_smooth(&[0.0, 0.01], &[0.0, f64::NAN], 1.0, 1.0).is_err());
    assert!(kalman_smooth(&[0.0, 0.01], &[0.0, 1.0], 1.0, 0.0).is_err());
}

#[test]
fn extracted_rows_join_the_log_by_timestamp() {
    let track = circuit();
    let mut cfg = scripted(1);
    cfg.sim.max_time = 8.0;
    let log = record_run(&cfg, &track, "circuit").unwrap();
    let rows = extract_rows(&log, &TargetSource::Plant).unwrap();
    assert_eq!(rows.len(), log.samples.len());
    for (i, &t) in rows.t.iter().enumerate() {
        let s = log.samples.iter().find(|s| s.t == t).unwrap();
        assert!((rows.lateral[i] - s.ay).abs() <= 1e-12);
        assert!((rows.yaw[i] - s.yaw_acc).abs() <= 1e-12);
        assert_eq!(
            rows.inputs[i],
            [s.vx, s.vy, s.yaw_rate, s.gamma_cmd, s.beta_cmd, s.tau_cmd]
        );
        assert_eq!(rows.lap[i], s.lap);
    }
    let source = TargetSource::Smoothed {
        process_noise_vy: 400.0,
        process_noise_yaw_rate: 400.0,
        meas_noise_vy: 0.02,
        meas_noise_yaw_rate: 0.01,
        inject_noise: false,
        seed: 0,
    };
    let smoothed = extract_rows(&log, &source).unwrap();
    let vy: Vec<f64> = log.samples.iter().map(|s| s.vy).collect();
    let oracle = kalman_smooth(&rows.t, &vy, 400.0, 0.02).unwrap();
    for i in 0..rows.len() {
        assert!((smoothed.lateral[i] - oracle.rates[i]).abs() <= 1e-12);
    }
}

#[test]
fn split_holds_out_whole_laps() {
    let track = circuit();
    let log = record_run(&scripted(3), &track, "circuit").unwrap();
    assert_eq!(log.completed_laps(), 3);
    let config = DatasetConfig::default();
    let split = split_rows(&log, &config).unwrap();
    assert!(split.train.lap.iter().all(|&l| l < 2));
    assert!(split.holdout.lap.iter().all(|&l| l == 2));
    let last_lap = log.samples.iter().filter(|s| s.lap == 2).count();
    assert_eq!(split.holdout.len(), last_lap);
    for t in &split.train.t {
        assert!(!split.holdout.t.contains(t));
    }
    assert!(split.train.t.windows(2).all(|w| w[0] < w[1]));
    let capped = split_rows(
        &log,
        &DatasetConfig {
            max_points: 500,
            ..DatasetConfig::default()
        },
    )
    .unwrap();
    assert!(capped.train.len() <= 500);
}

#[test]
fn rmse_of_matching_models_vanishes() {
    let track = circuit();
    let mut cfg = scripted(1);
    cfg.sim.max_time = 6.0;
    let log = record_run(&cfg, &track, "circuit").unwrap();
    let mut rows = extract_rows(&log, &TargetSource::Plant)
        .unwrap()
        .decimate(300);
    let p = KernelParams::new(vec![2.0, 1.0, 1.0, 3.0, 1.0, 3.0], 0.15).unwrap();
    let (lat, yaw) = rows.to_datasets().unwrap();
    let (lat_full, yaw_full) = (
        GpModel::fit(&p, &lat).unwrap(),
        GpModel::fit(&p, &yaw).unwrap(),
    );
    // targets replaced by the full model's own predictions
    for i in 0..rows.len() {
        rows.lateral[i] = lat_full.posterior_mean(&rows.inputs[i]).unwrap();
        rows.yaw[i] = yaw_full.posterior_mean(&rows.inputs[i]).unwrap();
    }
    let (lat, yaw) = (Arc::new(lat), Arc::new(yaw));
    let sl = SparseGp::new(Arc::clone(&lat), sod_reduce(&p, &lat, 1.0).unwrap()).unwrap();
    let sy = SparseGp::new(Arc::clone(&yaw), sod_reduce(&p, &yaw, 1.0).unwrap()).unwrap();
    // a neighbourhood covering the whole subset is the subset model itself
    let t_nn = (sl.sod().len(), sy.sod().len());
    let report = rmse_report(
        &EvalModels {
            nominal: None,
            full: Some((&lat_full, &yaw_full)),
            sparse: Some((&sl, &sy)),
            t_nn,
        },
        &rows,
    )
    .unwrap();
    let names: Vec<_> = report.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(names, ["gp_full", "gp_sod", "gp_nn"]);
    assert!(report[0].lateral <= 1e-9 && report[0].yaw <= 1e-9);
    assert!((report[1].lateral - report[2].lateral).abs() <= 1e-8);
    assert!((report[1].yaw - report[2].yaw).abs() <= 1e-8);
    assert!(report.iter().all(|r| r.samples == rows.len()));
}

fn strip_timing(log: &mut RunLog) {
    for c in &mut log.control {
        c.solve_time_ms = 0.0;
    }
}

#[test]
fn recording_is_deterministic_under_seed() {
    let track = circuit();
    let mut cfg = RecordConfig::default();
    cfg.sim.max_time = 3.0;
    cfg.sim.seed = 11;
    let mut a = record_run(&cfg, &track, "circuit").unwrap();
    let mut b = record_run(&cfg, &track, "circuit").unwrap();
    strip_timing(&mut a);
    strip_timing(&mut b);
    assert!(!a.samples.is_empty() && !a.control.is_empty());
    assert_eq!(a, b);
    cfg.sim.seed = 12;
    let mut c = record_run(&cfg, &track, "circuit").unwrap();
    strip_timing(&mut c);
    assert_ne!(a.samples, c.samples);
}

#[test]
fn zero_duration_run_is_empty() {
    let track = circuit();
    let mut cfg = RecordConfig::default();
    cfg.sim.laps = Some(0);
    let log = record_run(&cfg, &track, "circuit").unwrap();
    assert!(log.samples.is_empty() && log.control.is_empty());
    assert_eq!(log.completed_laps(), 0);
    assert!(extract_rows(&log, &TargetSource::Plant).is_err());
}

#[test]
fn logs_survive_a_disk_round_trip() {
    let track = circuit();
    let mut cfg = RecordConfig::default();
    cfg.sim.max_time = 2.0;
    let log = record_run(&cfg, &track, "circuit").unwrap();
    let dir = tempfile::tempdir().unwrap();
    log.save(dir.path()).unwrap();
    let back = RunLog::load(dir.path()).unwrap();
    assert_eq!(back, log);
    let long = dir.path().join("long.csv");
    write_long_format(&long, &[("a", &log)]).unwrap();
    let text = std::fs::read_to_string(long).unwrap();
    assert_eq!(text.lines().next().unwrap(), "run,variable,t,s,value");
    assert_eq!(text.lines().count(), 1 + 8 * log.samples.len());
}

#[test]
fn config_hash_tracks_content() {
    let a = RecordConfig::default();
    let h = config_hash(&a).unwrap();
    assert_eq!(h.len(), 64);
    assert!(h.chars().all(|c| c.is_ascii_hexdigit()));
    assert_eq!(h, config_hash(&a.clone()).unwrap());
    let mut b = a.clone();
    b.sim.seed += 1;
    assert_ne!(h, config_hash(&b).unwrap());
    let log = record_run(
        &RecordConfig {
            sim: SimConfig {
                laps: Some(0),
                ..SimConfig::default()
            },
            ..RecordConfig::default()
        },
        &circuit(),
        "circuit",
    )
    .unwrap();
    assert_eq!(log.metadata.driver, "nominal");
    assert_eq!(log.metadata.track_id, "circuit");
}
