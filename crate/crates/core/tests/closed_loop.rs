use std::sync::Arc;

use gpkart::dynamics::{idx, VehicleState};
use gpkart::ocp::{reduced_bounds, OcpConfig};
use gpkart::pipeline::{lap_report, record_run, RecordConfig};
use gpkart::plant::{NominalModel, PlantParams};
use gpkart::sim::{RunLog, SimConfig};
use gpkart::sqp::{Controller, ControllerConfig, PredictionModel, StepOutcome};
use gpkart::track::{make_synthetic_track, Track, TrackSpec};

fn circuit() -> Arc<Track> {
    Arc::new(make_synthetic_track(&TrackSpec::default_circuit()).unwrap())
}

fn nominal_lap(seed: u64) -> RunLog {
    let config = RecordConfig {
        sim: SimConfig {
            laps: Some(1),
            seed,
            ..SimConfig::default()
        },
        dither: None,
        ..RecordConfig::default()
    };
    record_run(&config, &circuit(), "circuit").unwrap()
}

#[test]
fn nominal_controller_completes_a_lap_on_track() {
    let track = circuit();
    let log = nominal_lap(0);
    assert_eq!(log.completed_laps(), 1);
    let rows = lap_report("nominal", &log, &track, 0.0).unwrap();
    assert_eq!(rows[0].hard_violations, 0);
    assert!(
        rows[0].min_vx >= 2.5 && rows[0].max_vx <= 15.0,
        "{:?}",
        rows[0]
    );
    assert!(log.control.iter().all(|c| !c.degraded && !c.safe_stop));
    // every QP of the lap is solved to the pinned KKT tolerance
    let worst = log.control.iter().map(|c| c.kkt_max).fold(0.0, f64::max);
    assert!(worst <= 1e-6, "KKT residual {worst:e}");
}

#[test]
fn lap_time_is_insensitive_to_the_noise_seed() {
    let a = nominal_lap(1).lap_times[0];
    let b = nominal_lap(2).lap_times[0];
    assert!((a - b).abs() <= 0.01 * a, "{a} vs {b}");
}

#[test]
fn commands_stay_within_actuator_and_rate_limits() {
    let log = nominal_lap(3);
    let ocp = OcpConfig::default();
    let dt = 1.0 / ControllerConfig::default().rate;
    for c in &log.control {
        assert!(
            c.gamma_cmd >= ocp.stage_lower[2] - 1e-9 && c.gamma_cmd <= ocp.stage_upper[2] + 1e-9
        );
        assert!(c.beta_cmd >= ocp.stage_lower[3] - 1e-9 && c.beta_cmd <= ocp.stage_upper[3] + 1e-9);
        assert!(c.tau_cmd >= ocp.stage_lower[4] - 1e-9 && c.tau_cmd <= ocp.stage_upper[4] + 1e-9);
    }
    for w in log.control.windows(2) {
        let limit = ocp.stage_upper[7] * dt + 1e-6;
        assert!(
            (w[1].beta_cmd - w[0].beta_cmd).abs() <= limit,
            "t {}",
            w[1].t
        );
    }
}

#[test]
fn slack_restores_every_lateral_row_of_the_plan() {
    let track = circuit();
    let config = ControllerConfig::default();
    let ocp = config.ocp.clone();
    let model = PredictionModel::Nominal(NominalModel::new(PlantParams::default()).unwrap());
    let mut ctrl = Controller::new(config, model, Arc::clone(&track)).unwrap();
    let mut s = 3.0;
    // drifting towards the left edge forces the slack to act
    for k in 0..20 {
        let measured = VehicleState {
            vx: 8.0,
            e_y: 1.0 + 0.05 * k as f64,
            e_theta: 0.05,
            ..Default::default()
        };
        let (_, diag) = ctrl.rti_step(&measured, s);
        assert_eq!(diag.outcome, StepOutcome::Ok);
        let it = ctrl.iterate().unwrap();
        let m = ocp.n_intervals();
        for j in 0..=m {
            let eta = it.u[j.min(m - 1)][idx::ETA];
            let (lo, hi) = reduced_bounds(&ocp, &track, it.s[j]).unwrap();
            let v = it.x[j][idx::EY] + eta;
            assert!(v >= lo - 1e-6 && v <= hi + 1e-6, "step {k} node {j}");
            assert!(eta.abs() <= 5.0 + 1e-9);
        }
        assert_eq!(diag.e_y_terminal, it.x[m][idx::EY]);
        assert_eq!(diag.eta_terminal, it.u[m - 1][idx::ETA]);
        s += 0.4;
    }
}
