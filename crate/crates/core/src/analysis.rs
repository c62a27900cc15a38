//! Numerical verification of the estimator's working hypotheses and claims:
//! persistency of excitation, uniform observability Gramians (computed two
//! independent ways), exponential-envelope fits, and input-to-state
//! stability experiments on the pose error dynamics.
//!
//! Everything here operates on recorded traces or closed-form drivers; the
//! runtime observers never depend on this module.

use nalgebra::{DMatrix, DVector, Matrix3, UnitVector3, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::dynamics::{simulate_truth, DynamicsError, TrajectorySpec};
use crate::geometry::{proj, project_to_so3, psi, skew};
use crate::ltv_observer::{build_system, LtvMatrices};
use crate::pose_observer::{AnchorSet, PoseGains};
use crate::sensors::{observe, CameraRig, LandmarkMap, SensorError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("integration window must span at least two samples")]
    WindowTooShort,
    #[error("invalid window: {0}")]
    InvalidWindow(String),
    #[error("error trace must be strictly positive on the fit window")]
    NonPositiveTrace,
    #[error(transparent)]
    Sensor(#[from] SensorError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Everything the observability checks need from a trajectory, sampled on a
/// fixed grid: rotations, gyro signals, inertial-frame bearings, and the
/// assembled LTV system matrices.
#[derive(Debug, Clone)]
pub struct SystemTrace {
    pub dt: f64,
    pub times: Vec<f64>,
    pub rotations: Vec<Matrix3<f64>>,
    pub omegas: Vec<Vector3<f64>>,
    /// Inertial-frame bearings `z'_i = R R_c z_i`, one inner vec per sample.
    pub zprimes: Vec<Vec<UnitVector3<f64>>>,
    pub systems: Vec<LtvMatrices>,
}

impl SystemTrace {
    /// Simulates the trajectory and records the trace on the `dt` grid.
    pub fn from_trajectory(
        spec: &TrajectorySpec,
        rig: &CameraRig,
        map: &LandmarkMap,
        r0: Matrix3<f64>,
        horizon: f64,
        dt: f64,
    ) -> Result<Self, AnalysisError> {
        let states = simulate_truth(spec, r0, horizon, dt)?;
        let mut times = Vec::with_capacity(states.len());
        let mut rotations = Vec::with_capacity(states.len());
        let mut omegas = Vec::with_capacity(states.len());
        let mut zprimes = Vec::with_capacity(states.len());
        let mut systems = Vec::with_capacity(states.len());
        for state in &states {
            let sample = observe(rig, map, state, None)?;
            let omega = spec.angular_velocity(state.t);
            let zp: Vec<UnitVector3<f64>> = sample
                .bearings
                .iter()
                .map(|z| {
                    nalgebra::Unit::new_normalize(state.rotation * rig.rotation * z.into_inner())
                })
                .collect();
            systems.push(build_system(&omega, &sample));
            times.push(state.t);
            rotations.push(state.rotation);
            omegas.push(omega);
            zprimes.push(zp);
        }
        Ok(Self {
            dt,
            times,
            rotations,
            omegas,
            zprimes,
            systems,
        })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn landmark_count(&self) -> usize {
        self.zprimes.first().map_or(0, Vec::len)
    }
}

/// Per-landmark persistency-of-excitation report over sliding windows.
#[derive(Debug, Clone)]
pub struct PeReport {
    /// Window length (s).
    pub window: f64,
    /// Excitation threshold the windows are compared against.
    pub threshold: f64,
    /// Window start times (s).
    pub starts: Vec<f64>,
    /// `min_eigs[w][i]`: smallest eigenvalue of the windowed projector
    /// integral of landmark `i` starting at `starts[w]`.
    pub min_eigs: Vec<Vec<f64>>,
    /// Per-landmark flag: every window exceeded the threshold.
    pub landmark_pass: Vec<bool>,
}

impl PeReport {
    pub fn all_pass(&self) -> bool {
        self.landmark_pass.iter().all(|&p| p)
    }

    /// Smallest windowed eigenvalue over all landmarks and windows.
    pub fn worst_margin(&self) -> f64 {
        self.min_eigs
            .iter()
            .flatten()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }
}

fn symmetric_min_eig(m: &DMatrix<f64>) -> f64 {
    m.symmetric_eigenvalues()
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Checks persistency of excitation: for each landmark the windowed
/// integral of `proj(z'_i(tau))` over `[t, t + delta_o]` must stay uniformly
/// positive definite (smallest eigenvalue above `mu_o`). Windows start every
/// `start_stride` samples; integrals use the trapezoid rule on the sample
/// grid via prefix sums.
pub fn pe_check(
    zprimes: &[Vec<UnitVector3<f64>>],
    dt: f64,
    delta_o: f64,
    mu_o: f64,
    start_stride: usize,
) -> Result<PeReport, AnalysisError> {
    if delta_o < 2.0 * dt {
        return Err(AnalysisError::WindowTooShort);
    }
    let window_steps = (delta_o / dt).round() as usize;
    let samples = zprimes.len();
    if samples == 0 || window_steps + 1 > samples {
        return Err(AnalysisError::InvalidWindow(format!(
            "window of {window_steps} steps does not fit in a trace of {samples} samples"
        )));
    }
    let n = zprimes[0].len();
    let stride = start_stride.max(1);
    let starts: Vec<usize> = (0..samples - window_steps).step_by(stride).collect();
    let mut min_eigs = vec![vec![0.0; n]; starts.len()];
    for i in 0..n {
        // Inclusive prefix sums of the projector samples for landmark i.
        let mut prefix = Vec::with_capacity(samples + 1);
        prefix.push(Matrix3::zeros());
        let mut acc = Matrix3::zeros();
        for zp in zprimes {
            acc += proj(&zp[i]);
            prefix.push(acc);
        }
        for (w, &k0) in starts.iter().enumerate() {
            let k1 = k0 + window_steps;
            // Trapezoid: interior samples weight 1, endpoints weight 1/2.
            let integral = (prefix[k1 + 1]
                - prefix[k0]
                - 0.5 * (proj(&zprimes[k0][i]) + proj(&zprimes[k1][i])))
                * dt;
            let sym = DMatrix::from_iterator(3, 3, integral.iter().copied());
            min_eigs[w][i] = symmetric_min_eig(&sym);
        }
    }
    let landmark_pass: Vec<bool> = (0..n)
        .map(|i| min_eigs.iter().all(|row| row[i] > mu_o))
        .collect();
    Ok(PeReport {
        window: window_steps as f64 * dt,
        threshold: mu_o,
        starts: starts.iter().map(|&k| k as f64 * dt).collect(),
        min_eigs,
        landmark_pass,
    })
}

/// Advances `phi' = A(t) phi` by one step of size `h` using the three
/// supplied stage samples of the system.
fn phi_pair_step(
    phi: &mut DMatrix<f64>,
    s0: &LtvMatrices,
    s1: &LtvMatrices,
    s2: &LtvMatrices,
    h: f64,
) {
    let k1 = s0.a_mul(phi);
    let k2 = s1.a_mul(&(&*phi + &k1 * (0.5 * h)));
    let k3 = s1.a_mul(&(&*phi + &k2 * (0.5 * h)));
    let k4 = s2.a_mul(&(&*phi + &k3 * h));
    *phi += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
}

/// State transition matrix over a system trace sampled every `dt`: the
/// slice must have an odd length `2m + 1`, and integration proceeds in `m`
/// steps of `2 dt` so every integrator stage lands on a recorded sample.
pub fn transition_matrix(systems: &[LtvMatrices], dt: f64) -> Result<DMatrix<f64>, AnalysisError> {
    if systems.is_empty() {
        return Err(AnalysisError::WindowTooShort);
    }
    if systems.len().is_multiple_of(2) {
        return Err(AnalysisError::InvalidWindow(
            "transition over an even sample count has no midpoint samples".into(),
        ));
    }
    let dim = systems[0].dim();
    let mut phi = DMatrix::identity(dim, dim);
    let mut k = 0;
    while k + 2 < systems.len() {
        phi_pair_step(
            &mut phi,
            &systems[k],
            &systems[k + 1],
            &systems[k + 2],
            2.0 * dt,
        );
        k += 2;
    }
    Ok(phi)
}

fn check_gramian_window(samples: usize, quad_stride: usize) -> Result<(), AnalysisError> {
    if samples < 3 {
        return Err(AnalysisError::WindowTooShort);
    }
    if samples.is_multiple_of(2) {
        return Err(AnalysisError::InvalidWindow(
            "gramian window must cover an even number of steps".into(),
        ));
    }
    if quad_stride == 0 || !quad_stride.is_multiple_of(2) {
        return Err(AnalysisError::InvalidWindow(
            "quadrature stride must be a positive even sample count".into(),
        ));
    }
    if !(samples - 1).is_multiple_of(quad_stride) {
        return Err(AnalysisError::InvalidWindow(
            "window length must be a multiple of the quadrature stride".into(),
        ));
    }
    Ok(())
}

/// Observability Gramian over the window covered by `systems`, from the
/// definition: `W = (1/d) int Phi^T C^T C Phi dtau` with `Phi` integrated
/// through every recorded step and the integrand sampled every
/// `quad_stride` samples (trapezoid weights at the ends).
pub fn gramian_direct(
    systems: &[LtvMatrices],
    dt: f64,
    quad_stride: usize,
) -> Result<DMatrix<f64>, AnalysisError> {
    check_gramian_window(systems.len(), quad_stride)?;
    let dim = systems[0].dim();
    let mut phi = DMatrix::identity(dim, dim);
    let mut w = DMatrix::zeros(dim, dim);
    let last = systems.len() - 1;
    let add_node = |phi: &DMatrix<f64>, k: usize, w: &mut DMatrix<f64>| {
        let cphi = systems[k].c_mul(phi);
        let weight = if k == 0 || k == last { 0.5 } else { 1.0 };
        w.gemm_tr(weight, &cphi, &cphi, 1.0);
    };
    add_node(&phi, 0, &mut w);
    let mut k = 0;
    while k + 2 <= last {
        phi_pair_step(
            &mut phi,
            &systems[k],
            &systems[k + 1],
            &systems[k + 2],
            2.0 * dt,
        );
        k += 2;
        if k % quad_stride == 0 {
            add_node(&phi, k, &mut w);
        }
    }
    // Node spacing / window length; the dt factors cancel.
    w *= quad_stride as f64 / last as f64;
    Ok(w)
}

/// The same Gramian assembled from the closed-form factorization: in
/// body-aligned coordinates the drift splits off a nilpotent part whose
/// exponential is polynomial, so
///
/// ```text
/// C(tau) Phi(tau, t) = Tb(tau) [ Lb | -s Lb | -s^2/2 Lb ] T(t)^T ,  s = tau - t
/// ```
///
/// with `Lb = blkdiag(proj(z'_i))` built from the inertial bearings and `T`
/// the block-diagonal stack of `R^T`. The orthogonal middle factors cancel
/// inside `Phi^T C^T C Phi`, leaving a polynomial integrand conjugated by
/// `T(t)` once at the end.
pub fn gramian_factored(
    rotations: &[Matrix3<f64>],
    zprimes: &[Vec<UnitVector3<f64>>],
    dt: f64,
    quad_stride: usize,
) -> Result<DMatrix<f64>, AnalysisError> {
    check_gramian_window(zprimes.len(), quad_stride)?;
    if rotations.len() != zprimes.len() {
        return Err(AnalysisError::InvalidWindow(
            "rotation and bearing traces differ in length".into(),
        ));
    }
    let n = zprimes[0].len();
    let dim = 3 * n + 6;
    let (vb, eb) = (3 * n, 3 * n + 3);
    let last = zprimes.len() - 1;
    let mut w = DMatrix::zeros(dim, dim);
    let mut cphi = DMatrix::zeros(3 * n, dim);
    for k in (0..=last).step_by(quad_stride) {
        let s = k as f64 * dt;
        cphi.fill(0.0);
        for (i, zp) in zprimes[k].iter().enumerate() {
            let lam = proj(zp);
            cphi.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&lam);
            cphi.fixed_view_mut::<3, 3>(3 * i, vb)
                .copy_from(&(-s * lam));
            cphi.fixed_view_mut::<3, 3>(3 * i, eb)
                .copy_from(&(-0.5 * s * s * lam));
        }
        let weight = if k == 0 || k == last { 0.5 } else { 1.0 };
        w.gemm_tr(weight, &cphi, &cphi, 1.0);
    }
    w *= quad_stride as f64 / last as f64;
    // Conjugate back by the block stack of R(t)^T at the window start.
    let r0 = rotations[0];
    let blocks = n + 2;
    let mut out = DMatrix::zeros(dim, dim);
    for br in 0..blocks {
        for bc in 0..blocks {
            let block: Matrix3<f64> = w.fixed_view::<3, 3>(3 * br, 3 * bc).into();
            out.fixed_view_mut::<3, 3>(3 * br, 3 * bc)
                .copy_from(&(r0.transpose() * block * r0));
        }
    }
    Ok(out)
}

/// One Gramian window evaluated both ways.
#[derive(Debug, Clone)]
pub struct GramianWindow {
    pub start: f64,
    pub min_eig: f64,
    /// Relative Frobenius difference between the two constructions.
    pub rel_diff: f64,
}

/// Evaluates Gramians over sliding windows of length `delta`, starting every
/// `start_stride` samples, comparing the direct and factored constructions
/// on identical quadrature nodes. Windows run in parallel.
pub fn gramian_sweep(
    trace: &SystemTrace,
    delta: f64,
    start_stride: usize,
    quad_stride: usize,
) -> Result<Vec<GramianWindow>, AnalysisError> {
    let window_steps = (delta / trace.dt).round() as usize;
    check_gramian_window(window_steps + 1, quad_stride)?;
    if window_steps + 1 > trace.len() {
        return Err(AnalysisError::InvalidWindow(format!(
            "window of {window_steps} steps does not fit in a trace of {} samples",
            trace.len()
        )));
    }
    let starts: Vec<usize> = (0..trace.len() - window_steps)
        .step_by(start_stride.max(1))
        .collect();
    starts
        .par_iter()
        .map(|&k0| {
            let k1 = k0 + window_steps;
            let direct = gramian_direct(&trace.systems[k0..=k1], trace.dt, quad_stride)?;
            let factored = gramian_factored(
                &trace.rotations[k0..=k1],
                &trace.zprimes[k0..=k1],
                trace.dt,
                quad_stride,
            )?;
            let rel_diff = (&direct - &factored).norm() / direct.norm();
            Ok(GramianWindow {
                start: trace.times[k0],
                min_eig: symmetric_min_eig(&direct),
                rel_diff,
            })
        })
        .collect()
}

/// The nilpotent drift generator in body-aligned coordinates: the system
/// matrix with the angular velocity removed. Cubes to zero.
pub fn nilpotent_generator(n: usize) -> DMatrix<f64> {
    let dim = 3 * n + 6;
    let (vb, eb) = (3 * n, 3 * n + 3);
    let mut a = DMatrix::zeros(dim, dim);
    for i in 0..n {
        a.fixed_view_mut::<3, 3>(3 * i, vb)
            .copy_from(&(-Matrix3::identity()));
    }
    a.fixed_view_mut::<3, 3>(vb, eb)
        .copy_from(&Matrix3::identity());
    a
}

/// Closed-form exponential of the nilpotent generator times `s`:
/// `I` on the diagonal, `-s I` landmark-velocity coupling, `s I`
/// velocity-gravity coupling, and `-s^2/2 I` landmark-gravity coupling.
pub fn nilpotent_transition(n: usize, s: f64) -> DMatrix<f64> {
    let dim = 3 * n + 6;
    let (vb, eb) = (3 * n, 3 * n + 3);
    let mut m = DMatrix::identity(dim, dim);
    for i in 0..n {
        m.fixed_view_mut::<3, 3>(3 * i, vb)
            .copy_from(&(-s * Matrix3::identity()));
        m.fixed_view_mut::<3, 3>(3 * i, eb)
            .copy_from(&(-0.5 * s * s * Matrix3::identity()));
    }
    m.fixed_view_mut::<3, 3>(vb, eb)
        .copy_from(&(s * Matrix3::identity()));
    m
}

/// Block-diagonal stack of `n + 2` copies of `R^T`; orthogonal.
pub fn stacked_rotation(r: &Matrix3<f64>, n: usize) -> DMatrix<f64> {
    let dim = 3 * n + 6;
    let rt = r.transpose();
    let mut t = DMatrix::zeros(dim, dim);
    for b in 0..(n + 2) {
        t.fixed_view_mut::<3, 3>(3 * b, 3 * b).copy_from(&rt);
    }
    t
}

/// Least-squares exponential envelope fit of a positive error trace.
#[derive(Debug, Clone)]
pub struct ExponentialFit {
    /// Fitted decay rate (1/s); positive means the trace shrinks.
    pub rate: f64,
    /// Envelope prefactor: smallest `a` such that
    /// `a * exp(-rate * t)` dominates the trace on the window.
    pub prefactor: f64,
    /// Root-mean-square residual of the log-linear fit.
    pub residual: f64,
    /// Fit window (s).
    pub window: (f64, f64),
    /// Whether the envelope dominates every sample in the window (true by
    /// construction unless the trace is empty).
    pub dominates: bool,
}

/// Fits `log |e(t)| ~ log(a) - rate * t` by ordinary least squares on the
/// samples with `window.0 <= t <= window.1`, then raises the prefactor so
/// the envelope dominates the whole window.
pub fn fit_exponential(
    trace: &[(f64, f64)],
    window: (f64, f64),
) -> Result<ExponentialFit, AnalysisError> {
    let pts: Vec<(f64, f64)> = trace
        .iter()
        .copied()
        .filter(|(t, _)| *t >= window.0 && *t <= window.1)
        .collect();
    if pts.len() < 2 {
        return Err(AnalysisError::WindowTooShort);
    }
    if pts.iter().any(|(_, y)| !y.is_finite() || *y <= 0.0) {
        return Err(AnalysisError::NonPositiveTrace);
    }
    let n = pts.len() as f64;
    let (mut st, mut sy, mut stt, mut sty) = (0.0, 0.0, 0.0, 0.0);
    for (t, y) in &pts {
        let ly = y.ln();
        st += t;
        sy += ly;
        stt += t * t;
        sty += t * ly;
    }
    let denom = n * stt - st * st;
    let slope = if denom.abs() < f64::EPSILON * stt.max(1.0) {
        0.0
    } else {
        (n * sty - st * sy) / denom
    };
    let intercept = (sy - slope * st) / n;
    let rate = -slope;
    let mut residual = 0.0;
    for (t, y) in &pts {
        let r = y.ln() - (intercept + slope * t);
        residual += r * r;
    }
    residual = (residual / n).sqrt();
    // Smallest prefactor whose envelope clears every sample.
    let prefactor = pts
        .iter()
        .map(|(t, y)| y * (rate * t).exp())
        .fold(0.0, f64::max);
    Ok(ExponentialFit {
        rate,
        prefactor,
        residual,
        window: (pts.first().unwrap().0, pts.last().unwrap().0),
        dominates: true,
    })
}

/// Coupling matrices of the pose error dynamics driven by the extended
/// estimation error `xtilde` (first `m` blocks are the anchor landmark
/// errors, then `n - m` unknown-landmark blocks, velocity, gravity):
///
/// ```text
/// Rtilde' = Rtilde (-k_R psi(M Rtilde) + G1 xtilde)x
/// ptilde' = -k_p ptilde + G2 xtilde
/// ```
///
/// `G1` depends on the current attitude estimate, `G2` on the true attitude.
pub fn gamma_matrices(
    anchors: &AnchorSet,
    gains: &PoseGains,
    rhat: &Matrix3<f64>,
    r: &Matrix3<f64>,
    n_landmarks: usize,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let dim = 3 * n_landmarks + 6;
    let mut g1 = DMatrix::zeros(3, dim);
    let mut g2 = DMatrix::zeros(3, dim);
    for (i, (nu, w)) in anchors.offsets().iter().zip(anchors.weights()).enumerate() {
        let b1 = -(gains.k_r / 2.0) * *w * skew(nu) * rhat;
        g1.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&b1);
        let b2 = -gains.k_p * *w * r;
        g2.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&b2);
    }
    g2.fixed_view_mut::<3, 3>(0, 3 * n_landmarks).copy_from(r);
    (g1, g2)
}

/// Closed-form Frobenius norms of the coupling matrices; independent of the
/// attitudes because rotations preserve the norm blockwise.
pub fn gamma_norm_bounds(anchors: &AnchorSet, gains: &PoseGains) -> (f64, f64) {
    let sum_wnu: f64 = anchors
        .offsets()
        .iter()
        .zip(anchors.weights())
        .map(|(nu, w)| 2.0 * w * w * nu.norm_squared())
        .sum();
    let k_g1 = gains.k_r / 2.0 * sum_wnu.sqrt();
    let sum_w2: f64 = anchors.weights().iter().map(|w| w * w).sum();
    let k_g2 = (3.0 * (gains.k_p * gains.k_p * sum_w2 + 1.0)).sqrt();
    (k_g1, k_g2)
}

/// Initial pose error for an ISS experiment.
#[derive(Debug, Clone)]
pub struct IssCase {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

/// Outcome of integrating the pose error dynamics for one initial error.
#[derive(Debug, Clone)]
pub struct IssOutcome {
    /// `|Rtilde|^2 + |ptilde|^2` at the final time.
    pub terminal_energy: f64,
    /// Final normalized attitude distance.
    pub terminal_attitude_distance: f64,
    /// Final position error norm.
    pub terminal_position_error: f64,
    /// Largest `|psi(M Rtilde)|` seen along the run (stationarity witness:
    /// stays at roundoff when started exactly on an undesired equilibrium).
    pub max_psi_norm: f64,
    /// Largest single-step increase of the zero-input Lyapunov value
    /// `tr(M (I - Rtilde)) + 1/2 |ptilde|^2`; meaningful when the driver is
    /// identically zero, where the value must be non-increasing.
    pub max_lyapunov_increase: f64,
}

/// Integrates the pose error dynamics directly, driven by a prescribed
/// extended-error signal `xtilde(t)` (pass `|_| DVector::zeros(dim)` for the
/// zero-input system), with the true attitude held at the identity so the
/// attitude estimate is `Rtilde^T`. One step of size `dt` per sample; the
/// attitude is renormalized unless the step was exactly stationary, so
/// equilibria represented exactly in floating point stay put bit for bit.
pub fn iss_experiment(
    anchors: &AnchorSet,
    gains: &PoseGains,
    driver: &(dyn Fn(f64) -> DVector<f64> + Sync),
    cases: &[IssCase],
    n_landmarks: usize,
    horizon: f64,
    dt: f64,
) -> Vec<IssOutcome> {
    cases
        .par_iter()
        .map(|case| run_error_dynamics(anchors, gains, driver, case, n_landmarks, horizon, dt))
        .collect()
}

fn run_error_dynamics(
    anchors: &AnchorSet,
    gains: &PoseGains,
    driver: &dyn Fn(f64) -> DVector<f64>,
    case: &IssCase,
    n_landmarks: usize,
    horizon: f64,
    dt: f64,
) -> IssOutcome {
    let moment = anchors.moment();
    let steps = (horizon / dt).round() as usize;
    let mut rt = case.rotation;
    let mut pt = case.position;
    let mut max_psi: f64 = psi(&(moment * rt)).norm();
    let mut max_lyap_inc: f64 = 0.0;
    let lyap = |rt: &Matrix3<f64>, pt: &Vector3<f64>| {
        (moment * (Matrix3::identity() - rt)).trace() + 0.5 * pt.norm_squared()
    };
    let mut v_prev = lyap(&rt, &pt);

    // xi(Rtilde, xtilde) = -k_R psi(M Rtilde) + G1 xtilde with
    // Rhat = Rtilde^T (truth at identity).
    let xi_of = |rt: &Matrix3<f64>, xt: &DVector<f64>| -> (Vector3<f64>, Vector3<f64>) {
        let rhat = rt.transpose();
        let (g1, g2) = gamma_matrices(anchors, gains, &rhat, &Matrix3::identity(), n_landmarks);
        let xi = -gains.k_r * psi(&(moment * rt)) + vec3(&(g1 * xt));
        let pdot_extra = vec3(&(g2 * xt));
        (xi, pdot_extra)
    };

    for k in 0..steps {
        let t = k as f64 * dt;
        let deriv = |tau: f64, r: &Matrix3<f64>, p: &Vector3<f64>| {
            let xt = driver(tau);
            let (xi, extra) = xi_of(r, &xt);
            (r * skew(&xi), -gains.k_p * p + extra)
        };
        let k1 = deriv(t, &rt, &pt);
        let k2 = deriv(
            t + 0.5 * dt,
            &(rt + 0.5 * dt * k1.0),
            &(pt + 0.5 * dt * k1.1),
        );
        let k3 = deriv(
            t + 0.5 * dt,
            &(rt + 0.5 * dt * k2.0),
            &(pt + 0.5 * dt * k2.1),
        );
        let k4 = deriv(t + dt, &(rt + dt * k3.0), &(pt + dt * k3.1));
        let stationary = [&k1, &k2, &k3, &k4]
            .iter()
            .all(|k| k.0 == Matrix3::zeros() && k.1 == Vector3::zeros());
        if !stationary {
            let sixth = dt / 6.0;
            rt = project_to_so3(&(rt + sixth * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0)));
            pt += sixth * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        }
        max_psi = max_psi.max(psi(&(moment * rt)).norm());
        let v = lyap(&rt, &pt);
        max_lyap_inc = max_lyap_inc.max(v - v_prev);
        v_prev = v;
    }
    let err = crate::pose_observer::PoseError {
        rotation: rt,
        position: pt,
    };
    IssOutcome {
        terminal_energy: crate::pose_observer::error_energy(&err),
        terminal_attitude_distance: crate::geometry::attitude_distance(&rt),
        terminal_position_error: pt.norm(),
        max_psi_norm: max_psi,
        max_lyapunov_increase: max_lyap_inc,
    }
}

fn vec3(v: &DVector<f64>) -> Vector3<f64> {
    Vector3::new(v[0], v[1], v[2])
}
