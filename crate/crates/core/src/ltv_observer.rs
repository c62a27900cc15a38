//! Riccati observer for the extended linear time-varying system.
//!
//! Stacking the body-frame landmark positions, the body-frame velocity, and
//! the body-frame gravity vector into `x = [x_L; v; eta]` (dimension
//! `3N + 6`) turns the bearing-only estimation problem into the LTV system
//!
//! ```text
//! x' = A(t) x + B a ,   y = C(t) x
//!
//!      [ -A_w  -G   0  ]        [ 0  ]
//! A  = [  0   -wx   I3 ] ,  B = [ I3 ] ,  C = [ L_z  0  0 ]
//!      [  0    0  -wx  ]        [ 0  ]
//! ```
//!
//! with `A_w = blkdiag([w]x, ..., [w]x)`, `G = [I3; ...; I3]`, and `L_z` the
//! block diagonal of the bearing projectors. The observer integrates
//! `xhat' = A xhat + B a + K (y - C xhat)` with the gain `K = P C^T Q` from
//! the continuous Riccati equation `P' = AP + PA^T - P C^T Q C P + V`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix3, Vector3};
use thiserror::Error;

use crate::dynamics::{ImuSample, RigidBodyState};
use crate::geometry::skew;
use crate::sensors::{BearingSample, LandmarkMap};

#[derive(Debug, Error)]
pub enum ObserverError {
    #[error("P lost positive definiteness at step {step}")]
    LostPositivity { step: u64 },
    #[error("invalid Riccati weights: {0}")]
    InvalidWeights(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("P is singular")]
    SingularP,
    #[error("state or input contains a non-finite value")]
    NonFinite,
}

/// Extended estimator state `[x_L; v; eta]` for `n` landmarks.
#[derive(Debug, Clone)]
pub struct ExtendedState {
    x: DVector<f64>,
    n: usize,
}

impl ExtendedState {
    pub fn zeros(n: usize) -> Self {
        Self {
            x: DVector::zeros(3 * n + 6),
            n,
        }
    }

    pub fn from_vector(x: DVector<f64>, n: usize) -> Result<Self, ObserverError> {
        if x.len() != 3 * n + 6 {
            return Err(ObserverError::DimensionMismatch(format!(
                "state length {} != 3*{n}+6",
                x.len()
            )));
        }
        Ok(Self { x, n })
    }

    /// The true extended state for a rigid body observing a landmark map:
    /// body-frame landmarks `R^T (p_i - p)`, body velocity, and `R^T g`.
    pub fn from_truth(state: &RigidBodyState, map: &LandmarkMap, gravity: &Vector3<f64>) -> Self {
        let n = map.len();
        let mut x = DVector::zeros(3 * n + 6);
        for (i, p_i) in map.positions().iter().enumerate() {
            let bp = state.rotation.transpose() * (p_i - state.position);
            x.fixed_rows_mut::<3>(3 * i).copy_from(&bp);
        }
        x.fixed_rows_mut::<3>(3 * n).copy_from(&state.velocity);
        x.fixed_rows_mut::<3>(3 * n + 3)
            .copy_from(&state.body_gravity(gravity));
        Self { x, n }
    }

    pub fn landmark_count(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        3 * self.n + 6
    }

    /// Body-frame position estimate of landmark `i`.
    pub fn landmark(&self, i: usize) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3 * i).into()
    }

    pub fn landmarks(&self) -> Vec<Vector3<f64>> {
        (0..self.n).map(|i| self.landmark(i)).collect()
    }

    /// Body-frame velocity estimate.
    pub fn velocity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3 * self.n).into()
    }

    /// Body-frame gravity estimate.
    pub fn gravity(&self) -> Vector3<f64> {
        self.x.fixed_rows::<3>(3 * self.n + 3).into()
    }

    pub fn vector(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn is_finite(&self) -> bool {
        self.x.iter().all(|v| v.is_finite())
    }
}

/// System matrices of the extended LTV model, either in the block-structured
/// form (cheap applies, no materialization) or as explicit dense matrices.
#[derive(Debug, Clone)]
pub enum LtvMatrices {
    Structured {
        omega: Vector3<f64>,
        projectors: Vec<Matrix3<f64>>,
    },
    Dense {
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    },
}

/// Assembles the structured system matrices from the gyro reading and one
/// bearing sample (whose projectors define the output map).
pub fn build_system(omega: &Vector3<f64>, sample: &BearingSample) -> LtvMatrices {
    LtvMatrices::Structured {
        omega: *omega,
        projectors: sample.projectors.clone(),
    }
}

impl LtvMatrices {
    pub fn from_parts(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
    ) -> Result<Self, ObserverError> {
        if a.nrows() != a.ncols() {
            return Err(ObserverError::DimensionMismatch("A must be square".into()));
        }
        if b.nrows() != a.nrows() || c.ncols() != a.nrows() {
            return Err(ObserverError::DimensionMismatch(
                "B rows and C columns must match A".into(),
            ));
        }
        Ok(Self::Dense { a, b, c })
    }

    /// State dimension.
    pub fn dim(&self) -> usize {
        match self {
            Self::Structured { projectors, .. } => 3 * projectors.len() + 6,
            Self::Dense { a, .. } => a.nrows(),
        }
    }

    /// Output dimension.
    pub fn out_dim(&self) -> usize {
        match self {
            Self::Structured { projectors, .. } => 3 * projectors.len(),
            Self::Dense { c, .. } => c.nrows(),
        }
    }

    /// Materialized `A`.
    pub fn a(&self) -> DMatrix<f64> {
        match self {
            Self::Structured { omega, projectors } => {
                let n = projectors.len();
                let (vb, eb) = (3 * n, 3 * n + 3);
                let w = skew(omega);
                let mut a = DMatrix::zeros(3 * n + 6, 3 * n + 6);
                for i in 0..n {
                    a.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(&(-w));
                    a.fixed_view_mut::<3, 3>(3 * i, vb)
                        .copy_from(&(-Matrix3::identity()));
                }
                a.fixed_view_mut::<3, 3>(vb, vb).copy_from(&(-w));
                a.fixed_view_mut::<3, 3>(vb, eb)
                    .copy_from(&Matrix3::identity());
                a.fixed_view_mut::<3, 3>(eb, eb).copy_from(&(-w));
                a
            }
            Self::Dense { a, .. } => a.clone(),
        }
    }

    /// Materialized `B = [0; I3; 0]`.
    pub fn b(&self) -> DMatrix<f64> {
        match self {
            Self::Structured { projectors, .. } => {
                let n = projectors.len();
                let mut b = DMatrix::zeros(3 * n + 6, 3);
                b.fixed_view_mut::<3, 3>(3 * n, 0)
                    .copy_from(&Matrix3::identity());
                b
            }
            Self::Dense { b, .. } => b.clone(),
        }
    }

    /// Materialized `C = [L_z 0 0]`.
    pub fn c(&self) -> DMatrix<f64> {
        match self {
            Self::Structured { projectors, .. } => {
                let n = projectors.len();
                let mut c = DMatrix::zeros(3 * n, 3 * n + 6);
                for (i, pi) in projectors.iter().enumerate() {
                    c.fixed_view_mut::<3, 3>(3 * i, 3 * i).copy_from(pi);
                }
                c
            }
            Self::Dense { c, .. } => c.clone(),
        }
    }

    /// `A x` without materializing `A`.
    pub fn apply_a(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Structured { omega, projectors } => {
                let n = projectors.len();
                let (vb, eb) = (3 * n, 3 * n + 3);
                let v: Vector3<f64> = x.fixed_rows::<3>(vb).into();
                let eta: Vector3<f64> = x.fixed_rows::<3>(eb).into();
                let mut out = DVector::zeros(3 * n + 6);
                for i in 0..n {
                    let xi: Vector3<f64> = x.fixed_rows::<3>(3 * i).into();
                    out.fixed_rows_mut::<3>(3 * i)
                        .copy_from(&(-omega.cross(&xi) - v));
                }
                out.fixed_rows_mut::<3>(vb)
                    .copy_from(&(-omega.cross(&v) + eta));
                out.fixed_rows_mut::<3>(eb).copy_from(&(-omega.cross(&eta)));
                out
            }
            Self::Dense { a, .. } => a * x,
        }
    }

    /// `C x` without materializing `C`.
    pub fn apply_c(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Structured { projectors, .. } => {
                let n = projectors.len();
                let mut out = DVector::zeros(3 * n);
                for (i, pi) in projectors.iter().enumerate() {
                    let xi: Vector3<f64> = x.fixed_rows::<3>(3 * i).into();
                    out.fixed_rows_mut::<3>(3 * i).copy_from(&(pi * xi));
                }
                out
            }
            Self::Dense { c, .. } => c * x,
        }
    }

    /// `B u` embedded in the state space.
    pub fn apply_b(&self, u: &Vector3<f64>) -> DVector<f64> {
        match self {
            Self::Structured { projectors, .. } => {
                let n = projectors.len();
                let mut out = DVector::zeros(3 * n + 6);
                out.fixed_rows_mut::<3>(3 * n).copy_from(u);
                out
            }
            Self::Dense { b, .. } => b * u,
        }
    }

    /// `A P` exploiting the row-block structure; `P` is `dim x dim`.
    pub fn a_mul(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Structured { omega, projectors } => {
                let n = projectors.len();
                let (vb, eb) = (3 * n, 3 * n + 3);
                let w = skew(omega);
                let mut out = DMatrix::zeros(p.nrows(), p.ncols());
                for i in 0..n {
                    let mut rows = out.fixed_rows_mut::<3>(3 * i);
                    rows.gemm(-1.0, &w, &p.fixed_rows::<3>(3 * i), 0.0);
                    rows -= p.fixed_rows::<3>(vb);
                }
                let mut vrows = out.fixed_rows_mut::<3>(vb);
                vrows.gemm(-1.0, &w, &p.fixed_rows::<3>(vb), 0.0);
                vrows += p.fixed_rows::<3>(eb);
                out.fixed_rows_mut::<3>(eb)
                    .gemm(-1.0, &w, &p.fixed_rows::<3>(eb), 0.0);
                out
            }
            Self::Dense { a, .. } => a * p,
        }
    }

    /// `C P` exploiting the block-diagonal output map.
    pub fn c_mul(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Structured { projectors, .. } => {
                let n = projectors.len();
                let mut out = DMatrix::zeros(3 * n, p.ncols());
                for (i, pi) in projectors.iter().enumerate() {
                    out.fixed_rows_mut::<3>(3 * i)
                        .gemm(1.0, pi, &p.fixed_rows::<3>(3 * i), 0.0);
                }
                out
            }
            Self::Dense { c, .. } => c * p,
        }
    }
}

/// Scalar-multiple-of-identity weights are detected at construction and get
/// allocation-free fast paths in the Riccati right-hand side.
#[derive(Debug, Clone)]
enum Coeff {
    Scalar(f64),
    Dense(DMatrix<f64>),
}

impl Coeff {
    fn validate(m: DMatrix<f64>, name: &'static str) -> Result<Self, ObserverError> {
        if m.nrows() != m.ncols() {
            return Err(ObserverError::InvalidWeights(name));
        }
        let sym = (&m - m.transpose()).amax();
        if !sym.is_finite() || sym > 1e-12 * m.amax().max(1.0) {
            return Err(ObserverError::InvalidWeights(name));
        }
        if Cholesky::new(m.clone()).is_none() {
            return Err(ObserverError::InvalidWeights(name));
        }
        let d = m[(0, 0)];
        let scalar = m.row_iter().enumerate().all(|(i, row)| {
            row.iter()
                .enumerate()
                .all(|(j, &x)| if i == j { x == d } else { x == 0.0 })
        });
        Ok(if scalar {
            Self::Scalar(d)
        } else {
            Self::Dense(m)
        })
    }

    fn premul(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Self::Scalar(s) => m * *s,
            Self::Dense(d) => d * m,
        }
    }
}

/// Weights and initial condition for the continuous Riccati equation.
#[derive(Debug, Clone)]
pub struct RiccatiConfig {
    q: Coeff,
    v: Coeff,
    p0: DMatrix<f64>,
    out_dim: usize,
    dim: usize,
    n_check: usize,
}

impl RiccatiConfig {
    /// Dense weights, validated symmetric positive definite.
    pub fn new(q: DMatrix<f64>, v: DMatrix<f64>, p0: DMatrix<f64>) -> Result<Self, ObserverError> {
        let out_dim = q.nrows();
        let dim = v.nrows();
        if p0.nrows() != dim || p0.ncols() != dim {
            return Err(ObserverError::InvalidWeights("P0"));
        }
        let q = Coeff::validate(q, "Q")?;
        let v = Coeff::validate(v, "V")?;
        Coeff::validate(p0.clone(), "P0")?;
        Ok(Self {
            q,
            v,
            p0,
            out_dim,
            dim,
            n_check: 100,
        })
    }

    /// Scalar weights `Q = q I`, `V = v I`, `P0 = p0 I` for an `n`-landmark
    /// system (state dimension `3n + 6`, output dimension `3n`).
    pub fn uniform(n: usize, q: f64, v: f64, p0: f64) -> Result<Self, ObserverError> {
        if !(q > 0.0 && v > 0.0 && p0 > 0.0) {
            return Err(ObserverError::InvalidWeights("scalar weights must be > 0"));
        }
        let dim = 3 * n + 6;
        Ok(Self {
            q: Coeff::Scalar(q),
            v: Coeff::Scalar(v),
            p0: DMatrix::identity(dim, dim) * p0,
            out_dim: 3 * n,
            dim,
            n_check: 100,
        })
    }

    /// How often (in steps) the positive-definiteness of `P` is certified.
    pub fn with_check_interval(mut self, n_check: usize) -> Self {
        self.n_check = n_check.max(1);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn p0(&self) -> &DMatrix<f64> {
        &self.p0
    }

    fn add_v(&self, rhs: &mut DMatrix<f64>) {
        match &self.v {
            Coeff::Scalar(s) => {
                for i in 0..rhs.nrows() {
                    rhs[(i, i)] += s;
                }
            }
            Coeff::Dense(d) => *rhs += d,
        }
    }
}

/// Evolving Riccati solution and the gain derived from it.
#[derive(Debug, Clone)]
pub struct RiccatiState {
    p: DMatrix<f64>,
    k: DMatrix<f64>,
    steps: u64,
    last_asymmetry: f64,
}

impl RiccatiState {
    /// Starts from `P0` with the gain evaluated against the initial system.
    pub fn new(cfg: &RiccatiConfig, m: &LtvMatrices) -> Result<Self, ObserverError> {
        if m.dim() != cfg.dim || m.out_dim() != cfg.out_dim {
            return Err(ObserverError::DimensionMismatch(format!(
                "system is {}x{}, config expects {}x{}",
                m.dim(),
                m.out_dim(),
                cfg.dim,
                cfg.out_dim
            )));
        }
        let p = cfg.p0.clone();
        let k = gain(&p, m, cfg);
        Ok(Self {
            p,
            k,
            steps: 0,
            last_asymmetry: 0.0,
        })
    }

    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Gain `K = P C^T Q` as of the last step boundary.
    pub fn gain(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Largest absolute entry of `P - P^T` produced by the most recent step
    /// before resymmetrization.
    pub fn last_asymmetry(&self) -> f64 {
        self.last_asymmetry
    }

    /// Cholesky factor of `P`; doubles as a positive-definiteness witness.
    pub fn cholesky(&self) -> Result<Cholesky<f64, Dyn>, ObserverError> {
        Cholesky::new(self.p.clone()).ok_or(ObserverError::SingularP)
    }
}

/// `K = P C^T Q`, computed as `(Q C P)^T` using the symmetry of `P` and `Q`.
fn gain(p: &DMatrix<f64>, m: &LtvMatrices, cfg: &RiccatiConfig) -> DMatrix<f64> {
    cfg.q.premul(&m.c_mul(p)).transpose()
}

/// `AP + PA^T - P C^T Q C P + V` for the current weights. The result is
/// assembled one triangle at a time and mirrored, so with scalar weights the
/// returned slope is symmetric to the bit.
fn cre_rhs(p: &DMatrix<f64>, m: &LtvMatrices, cfg: &RiccatiConfig) -> DMatrix<f64> {
    let mut rhs = m.a_mul(p);
    let cp = m.c_mul(p);
    let n = rhs.nrows();
    // rhs <- rhs + rhs^T in place; each unordered pair is visited once.
    for i in 0..n {
        rhs[(i, i)] *= 2.0;
        for j in 0..i {
            let s = rhs[(i, j)] + rhs[(j, i)];
            rhs[(i, j)] = s;
            rhs[(j, i)] = s;
        }
    }
    cfg.add_v(&mut rhs);
    match &cfg.q {
        Coeff::Scalar(q) => {
            // Symmetric rank-k downdate on the lower triangle, mirrored:
            // one column dot per pair instead of a full dense product.
            for i in 0..n {
                let ci = cp.column(i);
                for j in 0..=i {
                    let d = q * ci.dot(&cp.column(j));
                    rhs[(i, j)] -= d;
                    if i != j {
                        rhs[(j, i)] -= d;
                    }
                }
            }
        }
        Coeff::Dense(qm) => {
            let qcp = qm * &cp;
            rhs.gemm_tr(-1.0, &cp, &qcp, 1.0);
        }
    }
    rhs
}

/// One Riccati step with the system matrices sampled at the step start,
/// midpoint, and end, matching the integrator's stage times.
pub fn riccati_step_sampled(
    rs: RiccatiState,
    start: &LtvMatrices,
    mid: &LtvMatrices,
    end: &LtvMatrices,
    cfg: &RiccatiConfig,
    dt: f64,
) -> Result<RiccatiState, ObserverError> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(ObserverError::NonFinite);
    }
    let p = rs.p;
    let k1 = cre_rhs(&p, start, cfg);
    let k2 = cre_rhs(&(&p + &k1 * (0.5 * dt)), mid, cfg);
    let k3 = cre_rhs(&(&p + &k2 * (0.5 * dt)), mid, cfg);
    let k4 = cre_rhs(&(&p + &k3 * dt), end, cfg);
    let mut pn = p;
    pn += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);

    // Record the asymmetry the step produced, then remove it; leaving it in
    // place lets roundoff skew compound over long runs.
    let mut asym: f64 = 0.0;
    for i in 0..pn.nrows() {
        for j in (i + 1)..pn.ncols() {
            let d = pn[(i, j)] - pn[(j, i)];
            asym = asym.max(d.abs());
            let avg = 0.5 * (pn[(i, j)] + pn[(j, i)]);
            pn[(i, j)] = avg;
            pn[(j, i)] = avg;
        }
    }

    let steps = rs.steps + 1;
    if steps.is_multiple_of(cfg.n_check as u64) {
        if pn.iter().any(|x| !x.is_finite()) {
            return Err(ObserverError::NonFinite);
        }
        if Cholesky::new(pn.clone()).is_none() {
            return Err(ObserverError::LostPositivity { step: steps });
        }
    }
    let k = gain(&pn, end, cfg);
    Ok(RiccatiState {
        p: pn,
        k,
        steps,
        last_asymmetry: asym,
    })
}

/// One Riccati step with the system matrices frozen over the step.
pub fn riccati_step(
    rs: RiccatiState,
    m: &LtvMatrices,
    cfg: &RiccatiConfig,
    dt: f64,
) -> Result<RiccatiState, ObserverError> {
    riccati_step_sampled(rs, m, m, m, cfg, dt)
}

/// One observer step with stage-sampled system matrices and accelerometer
/// readings. The gain and innovation are evaluated once at the step start
/// (`K = P C^T Q` from the supplied Riccati state) and held over the step;
/// call this with the Riccati state *before* advancing it.
#[allow(clippy::too_many_arguments)]
pub fn observer_step_sampled(
    xhat: &ExtendedState,
    rs: &RiccatiState,
    cfg: &RiccatiConfig,
    start: &LtvMatrices,
    mid: &LtvMatrices,
    end: &LtvMatrices,
    output: &DVector<f64>,
    accel: (&Vector3<f64>, &Vector3<f64>, &Vector3<f64>),
    dt: f64,
) -> Result<ExtendedState, ObserverError> {
    if !(dt.is_finite() && dt > 0.0) || !xhat.is_finite() {
        return Err(ObserverError::NonFinite);
    }
    if output.len() != cfg.out_dim {
        return Err(ObserverError::DimensionMismatch(format!(
            "output length {} != {}",
            output.len(),
            cfg.out_dim
        )));
    }
    let k_gain = gain(&rs.p, start, cfg);
    let innovation = k_gain * (output - start.apply_c(&xhat.x));

    let deriv = |m: &LtvMatrices, x: &DVector<f64>, a: &Vector3<f64>| -> DVector<f64> {
        let mut d = m.apply_a(x);
        {
            let mut rows = d.fixed_rows_mut::<3>(3 * xhat.n);
            rows += *a;
        }
        d += &innovation;
        d
    };
    let x = &xhat.x;
    let k1 = deriv(start, x, accel.0);
    let k2 = deriv(mid, &(x + &k1 * (0.5 * dt)), accel.1);
    let k3 = deriv(mid, &(x + &k2 * (0.5 * dt)), accel.1);
    let k4 = deriv(end, &(x + &k3 * dt), accel.2);
    let xn = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(ExtendedState { x: xn, n: xhat.n })
}

/// One observer step with the measurements frozen over the step.
pub fn observer_step(
    xhat: &ExtendedState,
    rs: &RiccatiState,
    cfg: &RiccatiConfig,
    imu: &ImuSample,
    bearings: &BearingSample,
    dt: f64,
) -> Result<ExtendedState, ObserverError> {
    let m = build_system(&imu.angular_velocity, bearings);
    let y = bearings.stacked_modified();
    let a = imu.acceleration;
    observer_step_sampled(xhat, rs, cfg, &m, &m, &m, &y, (&a, &a, &a), dt)
}

/// Stacked observer derivative `A xhat + B a + K (y - C xhat)`.
pub fn observer_derivative(
    m: &LtvMatrices,
    xhat: &ExtendedState,
    accel: &Vector3<f64>,
    k_gain: &DMatrix<f64>,
    output: &DVector<f64>,
) -> DVector<f64> {
    let mut d = m.apply_a(&xhat.x);
    {
        let mut rows = d.fixed_rows_mut::<3>(3 * xhat.n);
        rows += *accel;
    }
    d += k_gain * (output - m.apply_c(&xhat.x));
    d
}

/// The same derivative assembled componentwise from the 3x3 blocks:
///
/// ```text
/// xhat_i' = -w x xhat_i - vhat + sum_j K_ij (y_j - P_j xhat_j)
/// vhat'   = -w x vhat + etahat + a + sum_j K_vj (...)
/// etahat' = -w x etahat + sum_j K_ej (...)
/// ```
///
/// Exists to cross-check the stacked form; the two agree to machine
/// precision.
pub fn observer_derivative_blocks(
    omega: &Vector3<f64>,
    projectors: &[Matrix3<f64>],
    xhat: &ExtendedState,
    accel: &Vector3<f64>,
    k_gain: &DMatrix<f64>,
    output: &DVector<f64>,
) -> DVector<f64> {
    let n = projectors.len();
    let vhat = xhat.velocity();
    let etahat = xhat.gravity();
    // Innovation residuals per landmark.
    let resid: Vec<Vector3<f64>> = (0..n)
        .map(|j| {
            let yj: Vector3<f64> = output.fixed_rows::<3>(3 * j).into();
            yj - projectors[j] * xhat.landmark(j)
        })
        .collect();
    let correction = |row: usize| -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for (j, r) in resid.iter().enumerate() {
            let kb: Matrix3<f64> = k_gain.fixed_view::<3, 3>(3 * row, 3 * j).into();
            c += kb * r;
        }
        c
    };
    let mut d = DVector::zeros(3 * n + 6);
    for i in 0..n {
        let xi = xhat.landmark(i);
        d.fixed_rows_mut::<3>(3 * i)
            .copy_from(&(-omega.cross(&xi) - vhat + correction(i)));
    }
    d.fixed_rows_mut::<3>(3 * n)
        .copy_from(&(-omega.cross(&vhat) + etahat + accel + correction(n)));
    d.fixed_rows_mut::<3>(3 * n + 3)
        .copy_from(&(-omega.cross(&etahat) + correction(n + 1)));
    d
}

/// Lyapunov value `xtilde^T P^{-1} xtilde`, evaluated via the Cholesky
/// factorization of `P`.
pub fn lyapunov_value(xtilde: &DVector<f64>, rs: &RiccatiState) -> Result<f64, ObserverError> {
    let chol = rs.cholesky()?;
    Ok(xtilde.dot(&chol.solve(xtilde)))
}

/// Warm-started power/inverse iterations tracking the extreme eigenvalues of
/// the slowly varying `P(t)` along a run.
#[derive(Debug, Clone)]
pub struct EigTracker {
    vmax: DVector<f64>,
    vmin: DVector<f64>,
}

impl EigTracker {
    pub fn new(dim: usize) -> Self {
        let v = DVector::from_element(dim, 1.0 / (dim as f64).sqrt());
        Self {
            vmax: v.clone(),
            vmin: v,
        }
    }

    /// Returns `(min, max)` eigenvalue estimates of symmetric positive
    /// definite `p`, refining the cached eigenvector guesses.
    pub fn update(
        &mut self,
        p: &DMatrix<f64>,
        chol: &Cholesky<f64, Dyn>,
        iters: usize,
    ) -> (f64, f64) {
        for _ in 0..iters {
            self.vmax = p * &self.vmax;
            self.vmax /= self.vmax.norm();
            self.vmin = chol.solve(&self.vmin);
            self.vmin /= self.vmin.norm();
        }
        let emax = self.vmax.dot(&(p * &self.vmax));
        let emin = self.vmin.dot(&(p * &self.vmin));
        (emin, emax)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate_truth, synthesize_imu, TrajectorySpec};
    use crate::sensors::{observe, CameraRig, LandmarkMap};
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scenario_sample() -> (LtvMatrices, BearingSample, ExtendedState, Vector3<f64>) {
        let spec = TrajectorySpec::figure_eight();
        let rig = CameraRig::default();
        let map = LandmarkMap::ground_grid();
        let states = simulate_truth(&spec, nalgebra::Matrix3::identity(), 0.5, 1e-3).unwrap();
        let state = states.last().unwrap();
        let sample = observe(&rig, &map, state, None).unwrap();
        let omega = spec.angular_velocity(state.t);
        let x = ExtendedState::from_truth(state, &map, &spec.gravity);
        let m = build_system(&omega, &sample);
        (m, sample, x, omega)
    }

    #[test]
    fn structured_matches_dense() {
        let (m, _, x, _) = scenario_sample();
        let dense = LtvMatrices::from_parts(m.a(), m.b(), m.c()).unwrap();
        assert_relative_eq!(
            m.apply_a(x.vector()),
            dense.apply_a(x.vector()),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            m.apply_c(x.vector()),
            dense.apply_c(x.vector()),
            epsilon = 1e-12
        );
        let mut rng = StdRng::seed_from_u64(21);
        let dim = m.dim();
        let p = {
            let r = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            &r * r.transpose() + DMatrix::identity(dim, dim)
        };
        assert_relative_eq!(m.a_mul(&p), dense.a_mul(&p), epsilon = 1e-12);
        assert_relative_eq!(m.c_mul(&p), dense.c_mul(&p), epsilon = 1e-12);
        let u = Vector3::new(0.3, -0.7, 2.0);
        assert_relative_eq!(m.apply_b(&u), dense.apply_b(&u), epsilon = 1e-15);
    }

    #[test]
    fn system_structure_at_zero_omega() {
        let (m, sample, _, _) = scenario_sample();
        let m0 = build_system(&Vector3::zeros(), &sample);
        let a = m0.a();
        let n = sample.len();
        // Diagonal blocks vanish; only the -I velocity couplings and the
        // I3 gravity coupling survive.
        for i in 0..n {
            assert_eq!(
                a.fixed_view::<3, 3>(3 * i, 3 * i),
                nalgebra::Matrix3::zeros()
            );
            assert_eq!(
                a.fixed_view::<3, 3>(3 * i, 3 * n),
                -nalgebra::Matrix3::identity()
            );
        }
        assert_eq!(
            a.fixed_view::<3, 3>(3 * n, 3 * n + 3),
            nalgebra::Matrix3::identity()
        );
        // C rows touch only the landmark columns.
        let c = m.c();
        assert_eq!(c.view((0, 3 * n), (3 * n, 6)), DMatrix::zeros(3 * n, 6));
    }

    #[test]
    fn true_state_satisfies_the_ltv_model() {
        // Central finite differences of the true extended state along the
        // trajectory must match A x + B a.
        let spec = TrajectorySpec::figure_eight();
        let rig = CameraRig::default();
        let map = LandmarkMap::ground_grid();
        let h = 1e-5;
        let states = simulate_truth(&spec, nalgebra::Matrix3::identity(), 0.7, h).unwrap();
        for k in (1..states.len() - 1).step_by(9000) {
            let state = &states[k];
            let xm = ExtendedState::from_truth(&states[k - 1], &map, &spec.gravity);
            let xp = ExtendedState::from_truth(&states[k + 1], &map, &spec.gravity);
            let fd = (xp.vector() - xm.vector()) / (2.0 * h);
            let sample = observe(&rig, &map, state, None).unwrap();
            let m = build_system(&spec.angular_velocity(state.t), &sample);
            let x = ExtendedState::from_truth(state, &map, &spec.gravity);
            let imu = synthesize_imu(&spec, state);
            let model = m.apply_a(x.vector()) + m.apply_b(&imu.acceleration);
            let residual = (fd - model).amax();
            assert!(residual < 1e-8, "residual {residual}");
        }
    }

    #[test]
    fn output_map_reproduces_modified_outputs() {
        let (m, sample, x, _) = scenario_sample();
        let cx = m.apply_c(x.vector());
        let y = sample.stacked_modified();
        assert!((cx - y).amax() < 1e-12);
    }

    #[test]
    fn riccati_grows_linearly_without_dynamics() {
        // A = 0, C = 0, V = v I: P(t) = P0 + v t I.
        let d = 6;
        let m = LtvMatrices::from_parts(
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, 3),
            DMatrix::zeros(3, d),
        )
        .unwrap();
        let cfg = RiccatiConfig::new(
            DMatrix::identity(3, 3),
            DMatrix::identity(d, d) * 4.0,
            DMatrix::identity(d, d),
        )
        .unwrap();
        let mut rs = RiccatiState::new(&cfg, &m).unwrap();
        for _ in 0..100 {
            rs = riccati_step(rs, &m, &cfg, 1e-2).unwrap();
        }
        // P(1) = I + 4 * 1 * I.
        assert_relative_eq!(rs.p(), &(DMatrix::identity(d, d) * 5.0), epsilon = 1e-10);
    }

    #[test]
    fn riccati_reaches_the_scalar_fixed_point() {
        // A = 0, C = I, Q = q I, V = v I decouple into scalar equations
        // p' = v - q p^2 with fixed point sqrt(v/q).
        let d = 4;
        let (q, v) = (2.0, 8.0);
        let m = LtvMatrices::from_parts(
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, 3),
            DMatrix::identity(d, d),
        )
        .unwrap();
        let cfg = RiccatiConfig::new(
            DMatrix::identity(d, d) * q,
            DMatrix::identity(d, d) * v,
            DMatrix::identity(d, d),
        )
        .unwrap();
        let mut rs = RiccatiState::new(&cfg, &m).unwrap();
        for _ in 0..10_000 {
            rs = riccati_step(rs, &m, &cfg, 1e-3).unwrap();
        }
        // sqrt(v/q) = 2.
        assert_relative_eq!(rs.p(), &(DMatrix::identity(d, d) * 2.0), epsilon = 1e-8);
        // The gain settles at K = P C^T Q = 2 q I.
        assert_relative_eq!(rs.gain(), &(DMatrix::identity(d, d) * 4.0), epsilon = 1e-7);
    }

    #[test]
    fn riccati_detects_lost_positivity() {
        // V = 0 with a violent overshoot: one huge explicit step drives P
        // negative and the Cholesky check reports it.
        let d = 3;
        let m = LtvMatrices::from_parts(
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, 3),
            DMatrix::identity(d, d),
        )
        .unwrap();
        let cfg = RiccatiConfig::new(
            DMatrix::identity(d, d) * 1e6,
            DMatrix::identity(d, d) * 1e-12,
            DMatrix::identity(d, d),
        )
        .unwrap()
        .with_check_interval(1);
        let rs = RiccatiState::new(&cfg, &m).unwrap();
        let out = riccati_step(rs, &m, &cfg, 1.0);
        assert!(
            matches!(
                out,
                Err(ObserverError::LostPositivity { .. }) | Err(ObserverError::NonFinite)
            ),
            "expected a positivity failure"
        );
    }

    #[test]
    fn riccati_weights_are_validated() {
        assert!(RiccatiConfig::uniform(4, -1.0, 1.0, 1.0).is_err());
        let bad = DMatrix::from_fn(3, 3, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(RiccatiConfig::new(bad, DMatrix::identity(6, 6), DMatrix::identity(6, 6)).is_err());
        let asym = DMatrix::from_fn(3, 3, |i, j| {
            (i + 2 * j) as f64 + if i == j { 10.0 } else { 0.0 }
        });
        assert!(
            RiccatiConfig::new(asym, DMatrix::identity(6, 6), DMatrix::identity(6, 6)).is_err()
        );
    }

    #[test]
    fn zero_innovation_at_the_true_state() {
        let (m, sample, x, omega) = scenario_sample();
        let n = x.landmark_count();
        let cfg = RiccatiConfig::uniform(n, 1e-4, 1e6, 1.0).unwrap();
        let rs = RiccatiState::new(&cfg, &m).unwrap();
        let y = sample.stacked_modified();
        let resid = &y - m.apply_c(x.vector());
        assert!(resid.amax() < 1e-12);
        // With zero innovation the observer derivative is the open-loop
        // model derivative.
        let accel = Vector3::new(0.1, -0.2, 9.6);
        let d = observer_derivative(&m, &x, &accel, rs.gain(), &y);
        let open = m.apply_a(x.vector()) + m.apply_b(&accel);
        assert!((d - open).amax() < 1e-9);
        let _ = omega;
    }

    #[test]
    fn stacked_and_blockwise_derivatives_agree() {
        let (m, sample, _, omega) = scenario_sample();
        let n = sample.len();
        let cfg = RiccatiConfig::uniform(n, 1e-4, 1e6, 1.0).unwrap();
        let mut rng = StdRng::seed_from_u64(22);
        let dim = 3 * n + 6;
        for _ in 0..1000 {
            // Random SPD P gives a dense, unstructured gain.
            let r = DMatrix::from_fn(dim, dim, |_, _| rng.gen_range(-1.0..1.0));
            let p = &r * r.transpose() + DMatrix::identity(dim, dim) * 0.1;
            let k_gain = gain(&p, &m, &cfg);
            let xhat = ExtendedState::from_vector(
                DVector::from_fn(dim, |_, _| rng.gen_range(-5.0..5.0)),
                n,
            )
            .unwrap();
            let accel = Vector3::new(
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-10.0..10.0),
            );
            let y = sample.stacked_modified();
            let stacked = observer_derivative(&m, &xhat, &accel, &k_gain, &y);
            let blocks =
                observer_derivative_blocks(&omega, &sample.projectors, &xhat, &accel, &k_gain, &y);
            assert!((&stacked - &blocks).amax() < 1e-12 * stacked.amax().max(1.0));
        }
    }

    #[test]
    fn lyapunov_value_basics() {
        let d = 10;
        let cfg = RiccatiConfig::new(
            DMatrix::identity(4, 4),
            DMatrix::identity(d, d),
            DMatrix::identity(d, d),
        )
        .unwrap();
        let m = LtvMatrices::from_parts(
            DMatrix::zeros(d, d),
            DMatrix::zeros(d, 3),
            DMatrix::zeros(4, d),
        )
        .unwrap();
        let rs = RiccatiState::new(&cfg, &m).unwrap();
        let zero = DVector::zeros(d);
        assert_eq!(lyapunov_value(&zero, &rs).unwrap(), 0.0);
        let x = DVector::from_fn(d, |i, _| (i as f64) - 4.0);
        assert_relative_eq!(
            lyapunov_value(&x, &rs).unwrap(),
            x.norm_squared(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn eig_tracker_finds_extremes() {
        let d = 8;
        let p = DMatrix::from_fn(d, d, |i, j| if i == j { (i + 1) as f64 } else { 0.0 });
        let chol = Cholesky::new(p.clone()).unwrap();
        let mut tracker = EigTracker::new(d);
        let (emin, emax) = tracker.update(&p, &chol, 200);
        assert_relative_eq!(emin, 1.0, epsilon = 1e-9);
        assert_relative_eq!(emax, d as f64, epsilon = 1e-9);
    }

    #[test]
    fn sampled_step_beats_frozen_matrices() {
        // On a fast-rotating system the stage-sampled step tracks a fine
        // reference better than freezing the matrices across the step.
        let spec = TrajectorySpec::figure_eight();
        let rig = CameraRig::default();
        let map = LandmarkMap::ground_grid();
        let n = map.len();
        let cfg = RiccatiConfig::uniform(n, 1e-4, 1e6, 1.0).unwrap();
        // Simulate on a grid of dt/4 so both the fine reference (dt/2) and
        // the coarse runs (dt) have genuine midpoint samples.
        let grid_dt = 5e-5;
        let states = simulate_truth(&spec, nalgebra::Matrix3::identity(), 0.1, grid_dt).unwrap();
        let systems: Vec<LtvMatrices> = states
            .iter()
            .map(|s| {
                let sample = observe(&rig, &map, s, None).unwrap();
                build_system(&spec.angular_velocity(s.t), &sample)
            })
            .collect();
        // Stage-sampled reference at dt = 1e-4.
        let mut reference = RiccatiState::new(&cfg, &systems[0]).unwrap();
        let mut k = 0;
        while k + 2 < systems.len() {
            reference = riccati_step_sampled(
                reference,
                &systems[k],
                &systems[k + 1],
                &systems[k + 2],
                &cfg,
                2.0 * grid_dt,
            )
            .unwrap();
            k += 2;
        }
        // Coarse dt = 2e-4 with true midpoint sampling vs frozen matrices.
        let coarse = 4.0 * grid_dt;
        let mut sampled = RiccatiState::new(&cfg, &systems[0]).unwrap();
        let mut frozen = RiccatiState::new(&cfg, &systems[0]).unwrap();
        let mut k = 0;
        while k + 4 < systems.len() {
            sampled = riccati_step_sampled(
                sampled,
                &systems[k],
                &systems[k + 2],
                &systems[k + 4],
                &cfg,
                coarse,
            )
            .unwrap();
            frozen = riccati_step(frozen, &systems[k], &cfg, coarse).unwrap();
            k += 4;
        }
        let scale = reference.p().norm();
        let err_sampled = (sampled.p() - reference.p()).norm() / scale;
        let err_frozen = (frozen.p() - reference.p()).norm() / scale;
        assert!(
            err_sampled < err_frozen / 10.0,
            "sampled {err_sampled}, frozen {err_frozen}"
        );
    }
}
