//! Monocular camera model: landmark projection, pixel synthesis, bearing
//! extraction, and the projector-transformed outputs feeding the estimator.
//!
//! A landmark with inertial position `p_i` seen from a body at pose `(R, p)`
//! through a camera mounted at `(R_c, p_c)` produces
//!
//! ```text
//! Bp_i = R^T (p_i - p)                  (body frame)
//! Cp_i = R_c^T (Bp_i - p_c)             (camera frame)
//! z_i  = Cp_i / |Cp_i|                  (bearing)
//! y_i  = proj(R_c z_i) p_c              (modified output)
//! ```
//!
//! The modified output is linear in the unknown `Bp_i`: since `Bp_i - p_c`
//! is collinear with `R_c z_i`, the projector annihilates it and
//! `proj(R_c z_i) Bp_i = y_i` holds exactly. That identity is what lets a
//! linear observer consume bearing-only measurements.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DVector, Matrix3, Unit, UnitVector3, Vector3};
use thiserror::Error;

use crate::dynamics::RigidBodyState;
use crate::geometry::{is_rotation, proj};

/// Depths at or below this (in metres) are treated as degenerate rather than
/// projected; the bearing map is singular at zero depth.
pub const DEPTH_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum SensorError {
    #[error("landmark lies within {DEPTH_FLOOR} m of the camera center")]
    DegenerateDepth,
    #[error("point is behind the image plane (depth {0:e} m)")]
    BehindCamera(f64),
    #[error("intrinsic matrix must be upper-triangular with positive diagonal")]
    InvalidIntrinsics,
    #[error("intrinsic matrix is not invertible")]
    SingularIntrinsics,
    #[error("camera rotation is not orthonormal")]
    InvalidRotation,
}

/// Rigidly mounted monocular camera: rotation and lever arm of the optical
/// frame in the body frame, plus pinhole intrinsics.
#[derive(Debug, Clone)]
pub struct CameraRig {
    /// Camera-to-body rotation `R_c`.
    pub rotation: Matrix3<f64>,
    /// Camera center in the body frame, `p_c` (m).
    pub position: Vector3<f64>,
    /// Pinhole intrinsic matrix `K` (px); upper-triangular, positive diagonal.
    pub intrinsics: Matrix3<f64>,
}

impl CameraRig {
    pub fn new(
        rotation: Matrix3<f64>,
        position: Vector3<f64>,
        intrinsics: Matrix3<f64>,
    ) -> Result<Self, SensorError> {
        if !is_rotation(&rotation, 1e-9) {
            return Err(SensorError::InvalidRotation);
        }
        let upper = intrinsics.m21 == 0.0 && intrinsics.m31 == 0.0 && intrinsics.m32 == 0.0;
        let positive = intrinsics.m11 > 0.0 && intrinsics.m22 > 0.0 && intrinsics.m33 > 0.0;
        if !(upper && positive && intrinsics.iter().all(|x| x.is_finite())) {
            return Err(SensorError::InvalidIntrinsics);
        }
        Ok(Self {
            rotation,
            position,
            intrinsics,
        })
    }
}

impl Default for CameraRig {
    /// Axis-aligned camera with a small lever arm and a VGA-scale pinhole.
    fn default() -> Self {
        Self {
            rotation: Matrix3::identity(),
            position: Vector3::new(0.02, 0.06, 0.01),
            intrinsics: Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0),
        }
    }
}

#[derive(Debug, Error)]
pub enum MapError {
    #[error("a landmark map needs at least 3 landmarks, got {0}")]
    TooFew(usize),
    #[error("known-landmark count {known} must satisfy 3 <= known <= {total}")]
    KnownCount { known: usize, total: usize },
    #[error("line {line}: known landmarks must precede unknown ones")]
    KnownNotPrefix { line: usize },
    #[error("the known landmarks are aligned; at least 3 must be non-collinear")]
    AlignedKnown,
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Inertial landmark positions, ordered with the `known` landmarks (those
/// with surveyed inertial coordinates) first.
#[derive(Debug, Clone)]
pub struct LandmarkMap {
    positions: Vec<Vector3<f64>>,
    known: usize,
}

impl LandmarkMap {
    /// Validates the map: at least 3 landmarks, `3 <= known <= N`, and the
    /// known prefix containing 3 non-collinear points.
    pub fn new(positions: Vec<Vector3<f64>>, known: usize) -> Result<Self, MapError> {
        if positions.len() < 3 {
            return Err(MapError::TooFew(positions.len()));
        }
        if known < 3 || known > positions.len() {
            return Err(MapError::KnownCount {
                known,
                total: positions.len(),
            });
        }
        if !has_non_collinear_triple(&positions[..known]) {
            return Err(MapError::AlignedKnown);
        }
        Ok(Self { positions, known })
    }

    /// 16 ground-plane landmarks on a 4x4 grid spanning `[-1, 1]^2` at
    /// `z = 0`, with the four corners first and marked as known.
    ///
    /// The grid sits under the reference trajectory's footprint so every
    /// sight line sweeps a wide angle as the body passes overhead; a wider
    /// grid starves the far corners of parallax and slows depth convergence
    /// far below what the default run length can absorb.
    pub fn ground_grid() -> Self {
        let coords: [f64; 4] = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        let mut positions = vec![
            Vector3::new(-1.0, -1.0, 0.0),
            Vector3::new(1.0, -1.0, 0.0),
            Vector3::new(-1.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ];
        for &y in &coords {
            for &x in &coords {
                if x.abs() == 1.0 && y.abs() == 1.0 {
                    continue;
                }
                positions.push(Vector3::new(x, y, 0.0));
            }
        }
        Self::new(positions, 4).expect("static grid is a valid map")
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn known_count(&self) -> usize {
        self.known
    }

    pub fn positions(&self) -> &[Vector3<f64>] {
        &self.positions
    }

    pub fn known_positions(&self) -> &[Vector3<f64>] {
        &self.positions[..self.known]
    }

    /// Parses the plain-text table format: one `x y z known_flag` line per
    /// landmark, `#` comments and blank lines ignored.
    pub fn from_text(text: &str) -> Result<Self, MapError> {
        let mut positions = Vec::new();
        let mut known = 0usize;
        let mut seen_unknown = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(MapError::Parse {
                    line,
                    message: format!("expected `x y z known_flag`, got {} fields", fields.len()),
                });
            }
            let mut nums = [0.0f64; 3];
            for (k, f) in fields[..3].iter().enumerate() {
                nums[k] = f.parse().map_err(|e| MapError::Parse {
                    line,
                    message: format!("bad coordinate {f:?}: {e}"),
                })?;
            }
            let flag: u8 = fields[3].parse().map_err(|e| MapError::Parse {
                line,
                message: format!("bad known flag {:?}: {e}", fields[3]),
            })?;
            match flag {
                1 => {
                    if seen_unknown {
                        return Err(MapError::KnownNotPrefix { line });
                    }
                    known += 1;
                }
                0 => seen_unknown = true,
                other => {
                    return Err(MapError::Parse {
                        line,
                        message: format!("known flag must be 0 or 1, got {other}"),
                    })
                }
            }
            positions.push(Vector3::new(nums[0], nums[1], nums[2]));
        }
        Self::new(positions, known)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MapError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# x y z known_flag\n");
        for (i, p) in self.positions.iter().enumerate() {
            let flag = u8::from(i < self.known);
            writeln!(out, "{:.16e} {:.16e} {:.16e} {flag}", p.x, p.y, p.z).unwrap();
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MapError> {
        Ok(std::fs::write(path, self.to_text())?)
    }
}

fn has_non_collinear_triple(points: &[Vector3<f64>]) -> bool {
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            for k in (j + 1)..points.len() {
                let area = (points[j] - points[i])
                    .cross(&(points[k] - points[i]))
                    .norm();
                if area > 1e-9 {
                    return true;
                }
            }
        }
    }
    false
}

/// One synchronized set of bearings with their projectors and modified
/// outputs, ordered like the landmark map.
#[derive(Debug, Clone)]
pub struct BearingSample {
    pub t: f64,
    /// Camera-frame unit bearings `z_i`.
    pub bearings: Vec<UnitVector3<f64>>,
    /// Projectors `proj(R_c z_i)`; zeroed for landmarks culled by the
    /// optional field-of-view limit (they then contribute no correction).
    pub projectors: Vec<Matrix3<f64>>,
    /// Modified outputs `y_i = proj(R_c z_i) p_c`.
    pub modified: Vec<Vector3<f64>>,
}

impl BearingSample {
    pub fn len(&self) -> usize {
        self.bearings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bearings.is_empty()
    }

    /// The `3N` vector stacking every modified output.
    pub fn stacked_modified(&self) -> DVector<f64> {
        let mut y = DVector::zeros(3 * self.modified.len());
        for (i, m) in self.modified.iter().enumerate() {
            y.fixed_rows_mut::<3>(3 * i).copy_from(m);
        }
        y
    }
}

/// Landmark position in the body frame: `Bp_i = R^T (p_i - p)`.
pub fn body_landmark(
    rotation: &Matrix3<f64>,
    position: &Vector3<f64>,
    p_i: &Vector3<f64>,
) -> Vector3<f64> {
    rotation.transpose() * (p_i - position)
}

/// Landmark position in the camera frame: `Cp_i = R_c^T (Bp_i - p_c)`.
pub fn camera_landmark(rig: &CameraRig, bp: &Vector3<f64>) -> Vector3<f64> {
    rig.rotation.transpose() * (bp - rig.position)
}

/// Unit bearing toward a body-frame landmark position.
pub fn bearing(rig: &CameraRig, bp: &Vector3<f64>) -> Result<UnitVector3<f64>, SensorError> {
    let rel = bp - rig.position;
    if rel.norm() <= DEPTH_FLOOR {
        return Err(SensorError::DegenerateDepth);
    }
    Ok(Unit::new_normalize(rig.rotation.transpose() * rel))
}

/// Pinhole projection of a camera-frame point to pixel coordinates:
/// `[u, v, 1]^T = K Cp / Cp_z`.
pub fn pixel_from_point(rig: &CameraRig, cp: &Vector3<f64>) -> Result<(f64, f64), SensorError> {
    if cp.z <= DEPTH_FLOOR {
        return Err(SensorError::BehindCamera(cp.z));
    }
    let h = rig.intrinsics * (cp / cp.z);
    Ok((h.x, h.y))
}

/// Unit bearing recovered from a pixel: `z = K^{-1}[u, v, 1]^T` normalized.
pub fn bearing_from_pixel(
    rig: &CameraRig,
    u: f64,
    v: f64,
) -> Result<UnitVector3<f64>, SensorError> {
    let kinv = rig
        .intrinsics
        .try_inverse()
        .ok_or(SensorError::SingularIntrinsics)?;
    Ok(Unit::new_normalize(kinv * Vector3::new(u, v, 1.0)))
}

/// Projector `proj(R_c z)` and modified output `y = proj(R_c z) p_c` for one
/// bearing. For the true body-frame landmark behind `z`, `proj(R_c z) Bp = y`.
pub fn modified_output(rig: &CameraRig, z: &UnitVector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let pi = proj(&Unit::new_normalize(rig.rotation * z.into_inner()));
    (pi, pi * rig.position)
}

/// Synthesizes the full bearing set a camera at the given truth state would
/// measure. `fov_half_angle` (radians, about the optical axis) optionally
/// culls landmarks outside the cone: their bearings are still reported but
/// their projectors and modified outputs are zeroed, so downstream
/// corrections ignore them. Culling is off by default.
pub fn observe(
    rig: &CameraRig,
    map: &LandmarkMap,
    state: &RigidBodyState,
    fov_half_angle: Option<f64>,
) -> Result<BearingSample, SensorError> {
    let n = map.len();
    let mut bearings = Vec::with_capacity(n);
    let mut projectors = Vec::with_capacity(n);
    let mut modified = Vec::with_capacity(n);
    for p_i in map.positions() {
        let bp = body_landmark(&state.rotation, &state.position, p_i);
        let z = bearing(rig, &bp)?;
        let visible = match fov_half_angle {
            Some(half) => z.z >= half.cos(),
            None => true,
        };
        if visible {
            let (pi, y) = modified_output(rig, &z);
            projectors.push(pi);
            modified.push(y);
        } else {
            projectors.push(Matrix3::zeros());
            modified.push(Vector3::zeros());
        }
        bearings.push(z);
    }
    Ok(BearingSample {
        t: state.t,
        bearings,
        projectors,
        modified,
    })
}
