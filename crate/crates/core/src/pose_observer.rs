//! Nonlinear pose observer on SO(3) x R^3.
//!
//! The observer consumes the gyro reading, the estimated body-frame
//! velocity, and the estimated body-frame positions of M landmarks whose
//! inertial positions are known, and integrates
//!
//! ```text
//! Rhat' = Rhat (w + k_R Rhat^T s_R)x
//! phat' = Rhat vhat + (k_R s_R)x (phat - p_o) + k_p s_p
//! ```
//!
//! where `p_o` is the weighted center of the known landmarks and the
//! innovations `s_R`, `s_p` are weighted sums of the per-landmark position
//! residuals. Attitude error is measured by `Rtilde = R Rhat^T` and position
//! error by `ptilde = p - Rtilde phat - (I - Rtilde) p_o`, the combination
//! that decouples in the error dynamics.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

use crate::dynamics::RigidBodyState;
use crate::geometry::{attitude_distance, project_to_so3, psi, skew};

/// Minimum separation required between eigenvalues of the attitude
/// stiffness matrix; below this the weight tuning keeps perturbing.
pub const EIG_GAP_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("anchor landmarks are aligned; at least 3 non-collinear are required")]
    DegenerateAnchors,
    #[error("need at least 3 anchors with positive weights, one per anchor")]
    InvalidWeights,
    #[error("weight tuning could not separate the attitude stiffness eigenvalues")]
    RepeatedEigenvalues,
}

#[derive(Debug, Error)]
pub enum PoseObserverError {
    #[error("gains must be strictly positive")]
    NonPositiveGains,
    #[error("state or input contains a non-finite value")]
    NonFinite,
    #[error("expected {expected} body-frame landmark estimates, got {got}")]
    WrongLandmarkCount { expected: usize, got: usize },
}

/// Observer gains: attitude gain `k_R` and position gain `k_p`.
#[derive(Debug, Clone, Copy)]
pub struct PoseGains {
    pub k_r: f64,
    pub k_p: f64,
}

impl PoseGains {
    pub fn new(k_r: f64, k_p: f64) -> Result<Self, PoseObserverError> {
        if !(k_r > 0.0 && k_p > 0.0 && k_r.is_finite() && k_p.is_finite()) {
            return Err(PoseObserverError::NonPositiveGains);
        }
        Ok(Self { k_r, k_p })
    }
}

impl Default for PoseGains {
    fn default() -> Self {
        Self {
            k_r: 40.0,
            k_p: 100.0,
        }
    }
}

/// Estimated pose.
#[derive(Debug, Clone)]
pub struct PoseEstimate {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

impl PoseEstimate {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::zeros(),
        }
    }
}

/// Pose error `(Rtilde, ptilde)`.
#[derive(Debug, Clone)]
pub struct PoseError {
    pub rotation: Matrix3<f64>,
    pub position: Vector3<f64>,
}

/// Second moment `sum_i w_i nu_i nu_i^T` of weighted points about their
/// weighted center, and the derived attitude stiffness
/// `1/2 (tr(M) I - M)`. Exposed separately from [`AnchorSet`] so the raw,
/// untuned spectra can be inspected.
pub fn anchor_moments(points: &[Vector3<f64>], weights: &[f64]) -> (Matrix3<f64>, Matrix3<f64>) {
    let center: Vector3<f64> = points
        .iter()
        .zip(weights)
        .map(|(p, w)| *w * p)
        .sum::<Vector3<f64>>();
    let mut moment = Matrix3::zeros();
    for (p, w) in points.iter().zip(weights) {
        let nu = p - center;
        moment += *w * nu * nu.transpose();
    }
    let stiffness = 0.5 * (moment.trace() * Matrix3::identity() - moment);
    (moment, stiffness)
}

/// The M known landmarks with their weights and derived geometry: weighted
/// center `p_o`, offsets `nu_i`, second moment, and attitude stiffness.
///
/// The stiffness matrix must be positive definite with three distinct
/// eigenvalues: its eigenvectors mark the isolated half-turn attitudes where
/// the attitude innovation vanishes, and repeated eigenvalues would smear
/// those into a continuum. Construction nudges the weights deterministically
/// until the spectrum separates.
#[derive(Debug, Clone)]
pub struct AnchorSet {
    anchors: Vec<Vector3<f64>>,
    weights: Vec<f64>,
    center: Vector3<f64>,
    offsets: Vec<Vector3<f64>>,
    moment: Matrix3<f64>,
    stiffness: Matrix3<f64>,
}

impl AnchorSet {
    /// Builds from anchors and optional weights (uniform if omitted).
    /// Weights are normalized to sum to one; if the stiffness spectrum is
    /// degenerate, `+5% / -5%` multiplicative nudges are applied to the
    /// first two weights (renormalizing each time), up to 100 attempts.
    pub fn build(anchors: &[Vector3<f64>], weights: Option<&[f64]>) -> Result<Self, AnchorError> {
        let m = anchors.len();
        if m < 3 {
            return Err(AnchorError::InvalidWeights);
        }
        let mut w: Vec<f64> = match weights {
            Some(w) => {
                if w.len() != m || w.iter().any(|&x| x <= 0.0 || !x.is_finite()) {
                    return Err(AnchorError::InvalidWeights);
                }
                w.to_vec()
            }
            None => vec![1.0 / m as f64; m],
        };
        normalize(&mut w);

        if !has_spread(anchors) {
            return Err(AnchorError::DegenerateAnchors);
        }

        for _ in 0..100 {
            let (moment, stiffness) = anchor_moments(anchors, &w);
            let mut eigs: Vec<f64> = stiffness.symmetric_eigenvalues().iter().copied().collect();
            eigs.sort_by(f64::total_cmp);
            let positive = eigs[0] > 0.0;
            let separated = eigs[1] - eigs[0] > EIG_GAP_TOL && eigs[2] - eigs[1] > EIG_GAP_TOL;
            if positive && separated {
                let center: Vector3<f64> = anchors
                    .iter()
                    .zip(&w)
                    .map(|(p, wi)| *wi * p)
                    .sum::<Vector3<f64>>();
                let offsets = anchors.iter().map(|p| p - center).collect();
                return Ok(Self {
                    anchors: anchors.to_vec(),
                    weights: w,
                    center,
                    offsets,
                    moment,
                    stiffness,
                });
            }
            w[0] *= 1.05;
            w[1] *= 0.95;
            normalize(&mut w);
        }
        Err(AnchorError::RepeatedEigenvalues)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn anchors(&self) -> &[Vector3<f64>] {
        &self.anchors
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Weighted center `p_o`.
    pub fn center(&self) -> Vector3<f64> {
        self.center
    }

    /// Offsets `nu_i = p_i - p_o`.
    pub fn offsets(&self) -> &[Vector3<f64>] {
        &self.offsets
    }

    /// Second moment of the anchors about the weighted center.
    pub fn moment(&self) -> Matrix3<f64> {
        self.moment
    }

    /// `1/2 (tr(M) I - M)`; for a small attitude error `exp(ux)` the
    /// attitude innovation linearizes to `stiffness * u`.
    pub fn stiffness(&self) -> Matrix3<f64> {
        self.stiffness
    }
}

fn normalize(w: &mut [f64]) {
    let s: f64 = w.iter().sum();
    for x in w.iter_mut() {
        *x /= s;
    }
}

fn has_spread(points: &[Vector3<f64>]) -> bool {
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            for k in (j + 1)..points.len() {
                if (points[j] - points[i])
                    .cross(&(points[k] - points[i]))
                    .norm()
                    > 1e-9
                {
                    return true;
                }
            }
        }
    }
    false
}

/// Innovations driving the pose observer: per-anchor residuals
/// `xi_i = p_i - phat - Rhat bp_hat_i`, combined as
/// `s_R = 1/2 sum w_i nu_i x xi_i` and `s_p = sum w_i xi_i`.
pub fn innovations(
    anchors: &AnchorSet,
    pose: &PoseEstimate,
    bp_hat: &[Vector3<f64>],
) -> Result<(Vector3<f64>, Vector3<f64>), PoseObserverError> {
    if bp_hat.len() != anchors.len() {
        return Err(PoseObserverError::WrongLandmarkCount {
            expected: anchors.len(),
            got: bp_hat.len(),
        });
    }
    Ok(innovations_core(
        anchors,
        &pose.rotation,
        &pose.position,
        bp_hat,
    ))
}

/// Innovation sums for a (possibly mid-integration, non-orthonormal)
/// attitude/position pair; length of `bp_hat` must already be checked.
fn innovations_core(
    anchors: &AnchorSet,
    rotation: &Matrix3<f64>,
    position: &Vector3<f64>,
    bp_hat: &[Vector3<f64>],
) -> (Vector3<f64>, Vector3<f64>) {
    let mut sigma_r = Vector3::zeros();
    let mut sigma_p = Vector3::zeros();
    for ((p_i, nu), (w, bp)) in anchors
        .anchors
        .iter()
        .zip(&anchors.offsets)
        .zip(anchors.weights.iter().zip(bp_hat))
    {
        let xi = p_i - position - rotation * bp;
        sigma_r += 0.5 * *w * nu.cross(&xi);
        sigma_p += *w * xi;
    }
    (sigma_r, sigma_p)
}

/// One step of the pose observer. The innovations and the velocity estimate
/// are held over the step (explicit cascade); the gyro reading is sampled at
/// the step start, midpoint, and end. The attitude is renormalized once at
/// the end of the step.
pub fn pose_step_sampled(
    pose: &PoseEstimate,
    omega: (&Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
    vhat: &Vector3<f64>,
    sigma: (&Vector3<f64>, &Vector3<f64>),
    gains: &PoseGains,
    anchors: &AnchorSet,
    dt: f64,
) -> Result<PoseEstimate, PoseObserverError> {
    if !(dt.is_finite() && dt > 0.0)
        || !pose
            .rotation
            .iter()
            .chain(pose.position.iter())
            .all(|x| x.is_finite())
    {
        return Err(PoseObserverError::NonFinite);
    }
    let (sigma_r, sigma_p) = (sigma.0, sigma.1);
    let p_o = anchors.center;
    let deriv =
        |w: &Vector3<f64>, r: &Matrix3<f64>, p: &Vector3<f64>| -> (Matrix3<f64>, Vector3<f64>) {
            let rdot = r * skew(&(w + gains.k_r * (r.transpose() * sigma_r)));
            let pdot = r * vhat + (gains.k_r * sigma_r).cross(&(p - p_o)) + gains.k_p * sigma_p;
            (rdot, pdot)
        };
    let (r, p) = (pose.rotation, pose.position);
    let k1 = deriv(omega.0, &r, &p);
    let k2 = deriv(omega.1, &(r + 0.5 * dt * k1.0), &(p + 0.5 * dt * k1.1));
    let k3 = deriv(omega.1, &(r + 0.5 * dt * k2.0), &(p + 0.5 * dt * k2.1));
    let k4 = deriv(omega.2, &(r + dt * k3.0), &(p + dt * k3.1));
    let sixth = dt / 6.0;
    let raw_r = r + sixth * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
    Ok(PoseEstimate {
        rotation: project_to_so3(&raw_r),
        position: p + sixth * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    })
}

/// One step with the gyro reading frozen over the step.
pub fn pose_step(
    pose: &PoseEstimate,
    omega: &Vector3<f64>,
    vhat: &Vector3<f64>,
    sigma: (&Vector3<f64>, &Vector3<f64>),
    gains: &PoseGains,
    anchors: &AnchorSet,
    dt: f64,
) -> Result<PoseEstimate, PoseObserverError> {
    pose_step_sampled(pose, (omega, omega, omega), vhat, sigma, gains, anchors, dt)
}

/// One step of the pose observer with the innovations re-evaluated at every
/// integrator stage from stage-consistent inputs.
///
/// `omega`, `vhat`, and `bp_hat` carry (start, midpoint, end) samples; each
/// RK4 stage recomputes the innovations from its own attitude/position
/// iterate and the matching landmark estimates. Freezing the innovations
/// over the step instead leaves an O(dt) bias in the attitude equilibrium —
/// the anchors' body-frame estimates move at the body's angular rate, so a
/// held innovation is evaluated against estimates the step has already moved
/// away from, which shows up as a persistent attitude offset of roughly the
/// anchor differential speed times dt.
#[allow(clippy::too_many_arguments, clippy::type_complexity)]
pub fn pose_step_staged(
    pose: &PoseEstimate,
    omega: (&Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
    vhat: (&Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
    bp_hat: (&[Vector3<f64>], &[Vector3<f64>], &[Vector3<f64>]),
    gains: &PoseGains,
    anchors: &AnchorSet,
    dt: f64,
) -> Result<PoseEstimate, PoseObserverError> {
    if !(dt.is_finite() && dt > 0.0)
        || !pose
            .rotation
            .iter()
            .chain(pose.position.iter())
            .all(|x| x.is_finite())
    {
        return Err(PoseObserverError::NonFinite);
    }
    for stage in [bp_hat.0, bp_hat.1, bp_hat.2] {
        if stage.len() != anchors.len() {
            return Err(PoseObserverError::WrongLandmarkCount {
                expected: anchors.len(),
                got: stage.len(),
            });
        }
    }
    let p_o = anchors.center;
    let deriv = |w: &Vector3<f64>,
                 vh: &Vector3<f64>,
                 bp: &[Vector3<f64>],
                 r: &Matrix3<f64>,
                 p: &Vector3<f64>|
     -> (Matrix3<f64>, Vector3<f64>) {
        let (sigma_r, sigma_p) = innovations_core(anchors, r, p, bp);
        let rdot = r * skew(&(w + gains.k_r * (r.transpose() * sigma_r)));
        let pdot = r * vh + (gains.k_r * sigma_r).cross(&(p - p_o)) + gains.k_p * sigma_p;
        (rdot, pdot)
    };
    let (r, p) = (pose.rotation, pose.position);
    let k1 = deriv(omega.0, vhat.0, bp_hat.0, &r, &p);
    let k2 = deriv(
        omega.1,
        vhat.1,
        bp_hat.1,
        &(r + 0.5 * dt * k1.0),
        &(p + 0.5 * dt * k1.1),
    );
    let k3 = deriv(
        omega.1,
        vhat.1,
        bp_hat.1,
        &(r + 0.5 * dt * k2.0),
        &(p + 0.5 * dt * k2.1),
    );
    let k4 = deriv(
        omega.2,
        vhat.2,
        bp_hat.2,
        &(r + dt * k3.0),
        &(p + dt * k3.1),
    );
    let sixth = dt / 6.0;
    let raw_r = r + sixth * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
    Ok(PoseEstimate {
        rotation: project_to_so3(&raw_r),
        position: p + sixth * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
    })
}

/// Attitude and position error between truth and estimate:
/// `Rtilde = R Rhat^T`, `ptilde = p - Rtilde phat - (I - Rtilde) p_o`.
pub fn pose_error(truth: &RigidBodyState, pose: &PoseEstimate, anchors: &AnchorSet) -> PoseError {
    let rtilde = truth.rotation * pose.rotation.transpose();
    let ptilde =
        truth.position - rtilde * pose.position - (Matrix3::identity() - rtilde) * anchors.center;
    PoseError {
        rotation: rtilde,
        position: ptilde,
    }
}

/// Inertial landmark positions implied by a pose and body-frame estimates:
/// `p_i = Rhat bp_i + phat`.
pub fn reconstruct_landmarks(pose: &PoseEstimate, bp_hat: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    bp_hat
        .iter()
        .map(|bp| pose.rotation * bp + pose.position)
        .collect()
}

/// Scalar error energy `W = |Rtilde|^2 + |ptilde|^2` using the normalized
/// attitude distance; the quantity whose ultimate bound the cascade
/// guarantees.
pub fn error_energy(err: &PoseError) -> f64 {
    let d = attitude_distance(&err.rotation);
    d * d + err.position.norm_squared()
}

/// Attitude innovation predicted by the error decomposition:
/// `s_R = psi(M Rtilde) + 1/2 sum w_i nu_i x (Rhat bptilde_i)`.
/// Exists to cross-check [`innovations`]; the two agree to roundoff.
pub fn attitude_innovation_from_errors(
    anchors: &AnchorSet,
    err: &PoseError,
    rhat: &Matrix3<f64>,
    bp_tilde: &[Vector3<f64>],
) -> Vector3<f64> {
    let mut s = psi(&(anchors.moment * err.rotation));
    for ((nu, w), bpt) in anchors.offsets.iter().zip(&anchors.weights).zip(bp_tilde) {
        s += 0.5 * *w * nu.cross(&(rhat * bpt));
    }
    s
}
