//! Full cascade runs: truth simulation on a half-step grid, the Riccati
//! observer and the pose observer advanced in lockstep, per-step health
//! diagnostics, and CSV persistence of every trace.

use super::config::ScenarioConfig;
use super::HarnessError;
use crate::analysis::{gramian_sweep, pe_check, GramianWindow, PeReport, SystemTrace};
use crate::dynamics::{simulate_truth, synthesize_imu, RigidBodyState};
use crate::geometry::attitude_distance;
use crate::ltv_observer::{
    build_system, observer_step_sampled, riccati_step_sampled, EigTracker, ExtendedState,
    RiccatiConfig, RiccatiState,
};
use crate::pose_observer::{
    error_energy, innovations, pose_error, pose_step_staged, reconstruct_landmarks, AnchorSet,
    PoseEstimate,
};
use crate::sensors::{observe, LandmarkMap};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

/// Scalar diagnostics recorded at every step of a scenario run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub t: f64,
    /// Extended-state estimation error norm.
    pub xtilde_norm: f64,
    /// Body-frame velocity error norm.
    pub vtilde_norm: f64,
    /// Largest body-frame landmark position error over all landmarks.
    pub max_landmark_error: f64,
    /// Gravity consistency: norm of (attitude estimate * gravity estimate -
    /// true gravity).
    pub gravity_error: f64,
    /// Riccati Lyapunov value `xtilde' P^{-1} xtilde`.
    pub lyapunov: f64,
    /// Extreme eigenvalue estimates of `P` (warm-started iterations).
    pub p_min_eig: f64,
    pub p_max_eig: f64,
    /// Asymmetry the last Riccati step produced before resymmetrization.
    pub p_asymmetry: f64,
    /// Normalized attitude error distance in [0, 1].
    pub attitude_distance: f64,
    /// Norm of the attitude-decoupled position error.
    pub ptilde_norm: f64,
    /// Plain position tracking error |phat - p|.
    pub position_error: f64,
    pub sigma_r_norm: f64,
    pub sigma_p_norm: f64,
    /// Pose error energy: squared attitude distance plus squared ptilde.
    pub energy: f64,
    /// Largest inertial reconstruction error over the unknown landmarks.
    pub max_unknown_reconstruction_error: f64,
}

/// Everything a scenario run produces, kept in memory so re-runs of the pose
/// stage and acceptance checks can reuse the traces without re-simulating.
#[derive(Debug, Clone)]
pub struct ScenarioArtifacts {
    pub config: ScenarioConfig,
    pub map: LandmarkMap,
    pub anchors: AnchorSet,
    /// Sample times on the `dt` grid.
    pub times: Vec<f64>,
    /// Truth states on the `dt` grid.
    pub truth: Vec<RigidBodyState>,
    /// Gyro samples on the half-step grid (2 per step plus the endpoint).
    pub omega_half: Vec<Vector3<f64>>,
    /// Extended-state estimates per step.
    pub xhat: Vec<ExtendedState>,
    /// Pose estimates per step.
    pub pose: Vec<PoseEstimate>,
    pub rows: Vec<StepRecord>,
    /// Riccati matrix at the final time.
    pub final_p: DMatrix<f64>,
}

impl ScenarioArtifacts {
    pub fn terminal(&self) -> Option<&StepRecord> {
        self.rows.last()
    }

    /// `(t, |xtilde|)` pairs for envelope fitting.
    pub fn xtilde_trace(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.t, r.xtilde_norm)).collect()
    }
}

/// Runs the truth simulation and both observers for the configured horizon.
///
/// Per step: the extended observer consumes the start-of-step gain and
/// innovation, the Riccati matrix advances next, and the pose observer steps
/// last, consuming the freshly updated landmark and velocity estimates
/// (explicit one-directional cascade); all integrator stages read truth
/// samples from the half-step grid.
pub fn run_scenario(config: &ScenarioConfig) -> Result<ScenarioArtifacts, HarnessError> {
    config.validate()?;
    let spec = config.trajectory_spec();
    let map = config.landmark_map()?;
    let rig = config.rig()?;
    let gains = config.pose_gains()?;
    let anchors = AnchorSet::build(map.known_positions(), config.anchor_weights())?;
    let n = map.len();
    let m_known = map.known_count();
    let steps = config.steps();
    let dt = config.run.dt;
    let horizon = steps as f64 * dt;

    let truth_half = simulate_truth(&spec, Matrix3::identity(), horizon, 0.5 * dt)?;
    let omega_half: Vec<Vector3<f64>> = truth_half
        .iter()
        .map(|s| spec.angular_velocity(s.t))
        .collect();

    let rcfg = RiccatiConfig::uniform(n, config.riccati.q, config.riccati.v, config.riccati.p0)?;
    let mut xhat_state = if config.initial.xhat_fill == 0.0 {
        ExtendedState::zeros(n)
    } else {
        ExtendedState::from_vector(
            DVector::from_element(3 * n + 6, config.initial.xhat_fill),
            n,
        )?
    };
    let mut pose = PoseEstimate {
        rotation: config.initial_attitude(),
        position: config.initial_position(),
    };

    let mut sample_start = observe(&rig, &map, &truth_half[0], None)?;
    let mut m_start = build_system(&omega_half[0], &sample_start);
    let mut rs = RiccatiState::new(&rcfg, &m_start)?;
    let mut tracker = EigTracker::new(3 * n + 6);

    let mut times = Vec::with_capacity(steps + 1);
    let mut truth = Vec::with_capacity(steps + 1);
    let mut xhat = Vec::with_capacity(steps + 1);
    let mut poses = Vec::with_capacity(steps + 1);
    let mut rows = Vec::with_capacity(steps + 1);

    for k in 0..=steps {
        let tstate = &truth_half[2 * k];
        let bp_hat: Vec<Vector3<f64>> = (0..m_known).map(|i| xhat_state.landmark(i)).collect();
        let (sigma_r, sigma_p) = innovations(&anchors, &pose, &bp_hat)?;

        // Per-step diagnostics; the Cholesky factor both witnesses positive
        // definiteness and serves the Lyapunov value and eigenvalue tracker.
        let x_true = ExtendedState::from_truth(tstate, &map, &spec.gravity);
        let xtilde = x_true.vector() - xhat_state.vector();
        let chol = rs.cholesky()?;
        let lyapunov = xtilde.dot(&chol.solve(&xtilde));
        let (p_min_eig, p_max_eig) = tracker.update(rs.p(), &chol, 2);
        let vtilde_norm = (x_true.velocity() - xhat_state.velocity()).norm();
        let max_landmark_error = (0..n)
            .map(|i| (x_true.landmark(i) - xhat_state.landmark(i)).norm())
            .fold(0.0, f64::max);
        let gravity_error = (pose.rotation * xhat_state.gravity() - spec.gravity).norm();
        let err = pose_error(tstate, &pose, &anchors);
        let reconstructed = reconstruct_landmarks(&pose, &xhat_state.landmarks());
        let max_unknown_reconstruction_error = map.positions()[m_known..]
            .iter()
            .zip(&reconstructed[m_known..])
            .map(|(p, r)| (p - r).norm())
            .fold(0.0, f64::max);
        rows.push(StepRecord {
            t: tstate.t,
            xtilde_norm: xtilde.norm(),
            vtilde_norm,
            max_landmark_error,
            gravity_error,
            lyapunov,
            p_min_eig,
            p_max_eig,
            p_asymmetry: rs.last_asymmetry(),
            attitude_distance: attitude_distance(&err.rotation),
            ptilde_norm: err.position.norm(),
            position_error: (tstate.position - pose.position).norm(),
            sigma_r_norm: sigma_r.norm(),
            sigma_p_norm: sigma_p.norm(),
            energy: error_energy(&err),
            max_unknown_reconstruction_error,
        });
        times.push(tstate.t);
        truth.push(tstate.clone());
        xhat.push(xhat_state.clone());
        poses.push(pose.clone());

        if k == steps {
            break;
        }

        let s_mid = observe(&rig, &map, &truth_half[2 * k + 1], None)?;
        let s_end = observe(&rig, &map, &truth_half[2 * k + 2], None)?;
        let m_mid = build_system(&omega_half[2 * k + 1], &s_mid);
        let m_end = build_system(&omega_half[2 * k + 2], &s_end);
        let output = sample_start.stacked_modified();
        let a0 = synthesize_imu(&spec, &truth_half[2 * k]).acceleration;
        let a1 = synthesize_imu(&spec, &truth_half[2 * k + 1]).acceleration;
        let a2 = synthesize_imu(&spec, &truth_half[2 * k + 2]).acceleration;

        let v_start = xhat_state.velocity();
        xhat_state = observer_step_sampled(
            &xhat_state,
            &rs,
            &rcfg,
            &m_start,
            &m_mid,
            &m_end,
            &output,
            (&a0, &a1, &a2),
            dt,
        )?;
        rs = riccati_step_sampled(rs, &m_start, &m_mid, &m_end, &rcfg, dt)?;

        // The pose stage closes the step on stage-consistent extended
        // estimates — pre-step values at the start stage, the freshly
        // updated ones at the end stage; nothing feeds back from the pose
        // into the linear stage.
        let bp_end: Vec<Vector3<f64>> = (0..m_known).map(|i| xhat_state.landmark(i)).collect();
        let bp_mid: Vec<Vector3<f64>> = bp_hat
            .iter()
            .zip(&bp_end)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let v_end = xhat_state.velocity();
        let v_mid = 0.5 * (v_start + v_end);
        pose = pose_step_staged(
            &pose,
            (
                &omega_half[2 * k],
                &omega_half[2 * k + 1],
                &omega_half[2 * k + 2],
            ),
            (&v_start, &v_mid, &v_end),
            (&bp_hat, &bp_mid, &bp_end),
            &gains,
            &anchors,
            dt,
        )?;

        sample_start = s_end;
        m_start = m_end;
    }

    let final_p = rs.p().clone();
    Ok(ScenarioArtifacts {
        config: config.clone(),
        map,
        anchors,
        times,
        truth,
        omega_half,
        xhat,
        pose: poses,
        rows,
        final_p,
    })
}

/// Pose trace of a re-run of the pose stage alone from a different initial
/// estimate, replaying the stored extended-state and gyro traces.
#[derive(Debug, Clone)]
pub struct PoseRow {
    pub t: f64,
    pub attitude_distance: f64,
    pub ptilde_norm: f64,
    pub position_error: f64,
    pub energy: f64,
}

/// Re-runs only the pose observer against the recorded traces of a completed
/// scenario; the extended-state stage of the cascade does not depend on the
/// pose, so its stored trace stays valid for any initial pose estimate.
pub fn run_pose_only(
    art: &ScenarioArtifacts,
    initial: &PoseEstimate,
) -> Result<Vec<PoseRow>, HarnessError> {
    let gains = art.config.pose_gains()?;
    let dt = art.config.run.dt;
    let steps = art.times.len().saturating_sub(1);
    let m_known = art.anchors.len();
    let mut pose = initial.clone();
    let mut rows = Vec::with_capacity(steps + 1);
    for k in 0..=steps {
        let tstate = &art.truth[k];
        let err = pose_error(tstate, &pose, &art.anchors);
        rows.push(PoseRow {
            t: tstate.t,
            attitude_distance: attitude_distance(&err.rotation),
            ptilde_norm: err.position.norm(),
            position_error: (tstate.position - pose.position).norm(),
            energy: error_energy(&err),
        });
        if k == steps {
            break;
        }
        let bp_start: Vec<Vector3<f64>> = (0..m_known).map(|i| art.xhat[k].landmark(i)).collect();
        let bp_end: Vec<Vector3<f64>> = (0..m_known).map(|i| art.xhat[k + 1].landmark(i)).collect();
        let bp_mid: Vec<Vector3<f64>> = bp_start
            .iter()
            .zip(&bp_end)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        let v_start = art.xhat[k].velocity();
        let v_end = art.xhat[k + 1].velocity();
        let v_mid = 0.5 * (v_start + v_end);
        pose = pose_step_staged(
            &pose,
            (
                &art.omega_half[2 * k],
                &art.omega_half[2 * k + 1],
                &art.omega_half[2 * k + 2],
            ),
            (&v_start, &v_mid, &v_end),
            (&bp_start, &bp_mid, &bp_end),
            &gains,
            &art.anchors,
            dt,
        )?;
    }
    Ok(rows)
}

/// Integrates only the Riccati stage for `horizon` seconds at step `dt`,
/// returning the final matrix and the largest pre-resymmetrization
/// asymmetry seen. Used for step-size self-convergence studies.
pub fn run_riccati_only(
    config: &ScenarioConfig,
    horizon: f64,
    dt: f64,
) -> Result<(DMatrix<f64>, f64), HarnessError> {
    config.validate()?;
    let spec = config.trajectory_spec();
    let map = config.landmark_map()?;
    let rig = config.rig()?;
    let n = map.len();
    let steps = (horizon / dt).round() as usize;
    let truth_half = simulate_truth(&spec, Matrix3::identity(), steps as f64 * dt, 0.5 * dt)?;
    let rcfg = RiccatiConfig::uniform(n, config.riccati.q, config.riccati.v, config.riccati.p0)?;
    let omega_at = |j: usize| spec.angular_velocity(truth_half[j].t);
    let sample0 = observe(&rig, &map, &truth_half[0], None)?;
    let mut m_start = build_system(&omega_at(0), &sample0);
    let mut rs = RiccatiState::new(&rcfg, &m_start)?;
    let mut max_asym: f64 = 0.0;
    for k in 0..steps {
        let s_mid = observe(&rig, &map, &truth_half[2 * k + 1], None)?;
        let s_end = observe(&rig, &map, &truth_half[2 * k + 2], None)?;
        let m_mid = build_system(&omega_at(2 * k + 1), &s_mid);
        let m_end = build_system(&omega_at(2 * k + 2), &s_end);
        rs = riccati_step_sampled(rs, &m_start, &m_mid, &m_end, &rcfg, dt)?;
        max_asym = max_asym.max(rs.last_asymmetry());
        m_start = m_end;
    }
    Ok((rs.p().clone(), max_asym))
}

/// Excitation and observability reports for the configured trajectory.
#[derive(Debug, Clone)]
pub struct ObservabilityReports {
    pub pe: PeReport,
    pub gramian: Vec<GramianWindow>,
}

pub fn check_observability(config: &ScenarioConfig) -> Result<ObservabilityReports, HarnessError> {
    config.validate()?;
    let spec = config.trajectory_spec();
    let map = config.landmark_map()?;
    let rig = config.rig()?;
    let dt = config.run.dt;
    let steps = config.steps();
    let trace = SystemTrace::from_trajectory(
        &spec,
        &rig,
        &map,
        Matrix3::identity(),
        steps as f64 * dt,
        dt,
    )?;
    let stride = ((config.observability.start_stride / dt).round() as usize).max(1);
    let pe = pe_check(
        &trace.zprimes,
        dt,
        config.observability.window,
        config.observability.threshold,
        stride,
    )?;
    let gramian = gramian_sweep(
        &trace,
        config.observability.window,
        stride,
        config.observability.quad_stride,
    )?;
    Ok(ObservabilityReports { pe, gramian })
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `truth.csv`, `ltv.csv`, `pose.csv`, and `landmarks.csv` into
/// `dir`. A zero-horizon run produces headers only. All values carry 17
/// significant digits so traces can serve as replay oracles.
pub fn write_outputs(art: &ScenarioArtifacts, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let emit = art.config.run.horizon > 0.0;
    let n = art.map.len();

    let mut w = BufWriter::new(File::create(dir.join("truth.csv"))?);
    writeln!(w, "t,r11,r12,r13,r21,r22,r23,r31,r32,r33,px,py,pz,vx,vy,vz")?;
    if emit {
        for s in &art.truth {
            let r = &s.rotation;
            let mut cols = vec![fmt(s.t)];
            for i in 0..3 {
                for j in 0..3 {
                    cols.push(fmt(r[(i, j)]));
                }
            }
            cols.extend(s.position.iter().map(|x| fmt(*x)));
            cols.extend(s.velocity.iter().map(|x| fmt(*x)));
            writeln!(w, "{}", cols.join(","))?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("ltv.csv"))?);
    let mut header = vec!["t".to_string()];
    for i in 0..n {
        for axis in ["x", "y", "z"] {
            header.push(format!("lm{i}_{axis}"));
        }
    }
    for name in [
        "vel_x",
        "vel_y",
        "vel_z",
        "grav_x",
        "grav_y",
        "grav_z",
        "xtilde_norm",
        "vtilde_norm",
        "max_landmark_error",
        "gravity_error",
        "lyapunov",
        "p_min_eig",
        "p_max_eig",
        "p_asymmetry",
    ] {
        header.push(name.to_string());
    }
    writeln!(w, "{}", header.join(","))?;
    if emit {
        for (x, row) in art.xhat.iter().zip(&art.rows) {
            let mut cols = vec![fmt(row.t)];
            cols.extend(x.vector().iter().map(|v| fmt(*v)));
            for v in [
                row.xtilde_norm,
                row.vtilde_norm,
                row.max_landmark_error,
                row.gravity_error,
                row.lyapunov,
                row.p_min_eig,
                row.p_max_eig,
                row.p_asymmetry,
            ] {
                cols.push(fmt(v));
            }
            writeln!(w, "{}", cols.join(","))?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("pose.csv"))?);
    writeln!(
        w,
        "t,rhat11,rhat12,rhat13,rhat21,rhat22,rhat23,rhat31,rhat32,rhat33,phat_x,phat_y,phat_z,\
         attitude_distance,ptilde_norm,position_error,sigma_r_norm,sigma_p_norm,energy,\
         max_unknown_reconstruction_error"
    )?;
    if emit {
        for (pose, row) in art.pose.iter().zip(&art.rows) {
            let mut cols = vec![fmt(row.t)];
            for i in 0..3 {
                for j in 0..3 {
                    cols.push(fmt(pose.rotation[(i, j)]));
                }
            }
            cols.extend(pose.position.iter().map(|x| fmt(*x)));
            for v in [
                row.attitude_distance,
                row.ptilde_norm,
                row.position_error,
                row.sigma_r_norm,
                row.sigma_p_norm,
                row.energy,
                row.max_unknown_reconstruction_error,
            ] {
                cols.push(fmt(v));
            }
            writeln!(w, "{}", cols.join(","))?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("landmarks.csv"))?);
    writeln!(
        w,
        "id,known,true_x,true_y,true_z,body_estimate_x,body_estimate_y,body_estimate_z,\
         reconstructed_x,reconstructed_y,reconstructed_z,error"
    )?;
    if emit {
        if let (Some(x), Some(pose)) = (art.xhat.last(), art.pose.last()) {
            let reconstructed = reconstruct_landmarks(pose, &x.landmarks());
            for (i, truth) in art.map.positions().iter().enumerate() {
                let body = x.landmark(i);
                let rec = reconstructed[i];
                let known = if i < art.map.known_count() { 1 } else { 0 };
                let mut cols = vec![i.to_string(), known.to_string()];
                cols.extend(truth.iter().map(|v| fmt(*v)));
                cols.extend(body.iter().map(|v| fmt(*v)));
                cols.extend(rec.iter().map(|v| fmt(*v)));
                cols.push(fmt((truth - rec).norm()));
                writeln!(w, "{}", cols.join(","))?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `pe.csv` (one row per window and landmark) and `gramian.csv` (one
/// row per window) into `dir`.
pub fn write_observability(reports: &ObservabilityReports, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("pe.csv"))?);
    writeln!(w, "start,landmark,min_eig,pass")?;
    for (start, row) in reports.pe.starts.iter().zip(&reports.pe.min_eigs) {
        for (i, eig) in row.iter().enumerate() {
            let pass = if *eig > reports.pe.threshold { 1 } else { 0 };
            writeln!(w, "{},{},{},{}", fmt(*start), i, fmt(*eig), pass)?;
        }
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("gramian.csv"))?);
    writeln!(w, "start,min_eig,rel_diff")?;
    for g in &reports.gramian {
        writeln!(w, "{},{},{}", fmt(g.start), fmt(g.min_eig), fmt(g.rel_diff))?;
    }
    w.flush()?;
    Ok(())
}
