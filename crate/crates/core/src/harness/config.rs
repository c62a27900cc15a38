//! Scenario configuration: a flat, human-readable TOML file with one section
//! per concern. Defaults reproduce the reference scenario (16-landmark
//! ground grid, figure-eight trajectory, high-gain observers). All angles
//! are expressed in units of pi radians so `0.9` means `0.9 * pi`.

use super::HarnessError;
use crate::dynamics::TrajectorySpec;
use crate::geometry::exp_so3;
use crate::pose_observer::PoseGains;
use crate::sensors::{CameraRig, LandmarkMap};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub run: RunSection,
    pub trajectory: TrajectorySection,
    pub landmarks: LandmarkSection,
    pub camera: CameraSection,
    pub gains: GainSection,
    pub riccati: RiccatiSection,
    pub initial: InitialSection,
    pub observability: ObservabilitySection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Simulation horizon (s).
    pub horizon: f64,
    /// Integrator step (s); the truth is simulated on a half-step grid so
    /// integrator stages see exact samples.
    pub dt: f64,
    /// Random seed for any randomized extensions; the reference scenario is
    /// fully deterministic.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            dt: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrajectorySection {
    /// `figure-eight` (reference scenario) or `straight-line`.
    pub kind: String,
    /// Straight-line start point (m).
    pub start: [f64; 3],
    /// Straight-line velocity (m/s).
    pub velocity: [f64; 3],
}

impl Default for TrajectorySection {
    fn default() -> Self {
        Self {
            kind: "figure-eight".into(),
            start: [0.0, 0.0, 6.0],
            velocity: [0.0, 0.0, -0.25],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LandmarkSection {
    /// `grid` for the built-in ground grid, `file` to load `path`.
    pub source: String,
    pub path: String,
}

impl Default for LandmarkSection {
    fn default() -> Self {
        Self {
            source: "grid".into(),
            path: String::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CameraSection {
    /// Camera position in the body frame (m).
    pub position: [f64; 3],
    /// Body-to-camera rotation vector, magnitude in units of pi radians.
    pub rotation: [f64; 3],
    /// Focal lengths (px).
    pub focal: [f64; 2],
    /// Principal point (px).
    pub center: [f64; 2],
}

impl Default for CameraSection {
    fn default() -> Self {
        Self {
            position: [0.02, 0.06, 0.01],
            rotation: [0.0, 0.0, 0.0],
            focal: [500.0, 500.0],
            center: [320.0, 240.0],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GainSection {
    pub k_r: f64,
    pub k_p: f64,
    /// Anchor weights; empty means uniform. The anchor builder may nudge
    /// non-degenerate weights slightly to separate moment eigenvalues.
    pub rho: Vec<f64>,
}

impl Default for GainSection {
    fn default() -> Self {
        Self {
            k_r: 40.0,
            k_p: 100.0,
            rho: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RiccatiSection {
    /// Output weight scalar (`Q = q I`).
    pub q: f64,
    /// Stabilizing additive scalar (`V = v I`).
    pub v: f64,
    /// Initial covariance-like scalar (`P(0) = p0 I`).
    pub p0: f64,
}

impl Default for RiccatiSection {
    fn default() -> Self {
        Self {
            q: 1e-4,
            v: 1e6,
            p0: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct InitialSection {
    /// Initial attitude-estimate error angle, in units of pi.
    pub attitude_angle: f64,
    /// Axis of the initial attitude error (normalized before use).
    pub attitude_axis: [f64; 3],
    /// Initial position estimate (m).
    pub position: [f64; 3],
    /// Fill value for every component of the initial extended state.
    pub xhat_fill: f64,
}

impl Default for InitialSection {
    fn default() -> Self {
        Self {
            attitude_angle: 0.9,
            attitude_axis: [1.0, 1.0, 1.0],
            position: [0.0, 0.0, 0.0],
            xhat_fill: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ObservabilitySection {
    /// Excitation / Gramian window length (s).
    pub window: f64,
    /// Excitation threshold on windowed projector integrals.
    pub threshold: f64,
    /// Spacing between window starts (s).
    pub start_stride: f64,
    /// Samples between Gramian quadrature nodes (even).
    pub quad_stride: usize,
}

impl Default for ObservabilitySection {
    fn default() -> Self {
        Self {
            window: 2.0,
            threshold: 1e-3,
            start_stride: 0.1,
            quad_stride: 10,
        }
    }
}

fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let config: ScenarioConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.run.dt.is_finite() && self.run.dt > 0.0) {
            return bad(format!("run.dt must be positive, got {}", self.run.dt));
        }
        if !(self.run.horizon.is_finite() && self.run.horizon >= 0.0) {
            return bad(format!(
                "run.horizon must be non-negative, got {}",
                self.run.horizon
            ));
        }
        if !(self.gains.k_r > 0.0 && self.gains.k_p > 0.0) {
            return bad(format!(
                "gains must be positive, got k_r = {}, k_p = {}",
                self.gains.k_r, self.gains.k_p
            ));
        }
        if !(self.riccati.q > 0.0 && self.riccati.v > 0.0 && self.riccati.p0 > 0.0) {
            return bad(format!(
                "riccati weights must be positive, got q = {}, v = {}, p0 = {}",
                self.riccati.q, self.riccati.v, self.riccati.p0
            ));
        }
        match self.trajectory.kind.as_str() {
            "figure-eight" | "straight-line" => {}
            other => return bad(format!("trajectory.kind `{other}` is not recognized")),
        }
        match self.landmarks.source.as_str() {
            "grid" => {}
            "file" if !self.landmarks.path.is_empty() => {}
            "file" => return bad("landmarks.source = \"file\" needs landmarks.path".into()),
            other => return bad(format!("landmarks.source `{other}` is not recognized")),
        }
        if vec3(&self.initial.attitude_axis).norm() < 1e-12 {
            return bad("initial.attitude_axis must be nonzero".into());
        }
        if self.observability.window < 2.0 * self.run.dt {
            return bad("observability.window must span at least two steps".into());
        }
        if self.observability.quad_stride == 0 || !self.observability.quad_stride.is_multiple_of(2)
        {
            return bad("observability.quad_stride must be a positive even number".into());
        }
        if self.gains.rho.iter().any(|w| *w <= 0.0) {
            return bad("gains.rho entries must be positive".into());
        }
        Ok(())
    }

    /// Number of integrator steps covered by the horizon.
    pub fn steps(&self) -> usize {
        (self.run.horizon / self.run.dt).round() as usize
    }

    pub fn trajectory_spec(&self) -> TrajectorySpec {
        match self.trajectory.kind.as_str() {
            "straight-line" => TrajectorySpec::straight_line(
                vec3(&self.trajectory.start),
                vec3(&self.trajectory.velocity),
            ),
            _ => TrajectorySpec::figure_eight(),
        }
    }

    pub fn landmark_map(&self) -> Result<LandmarkMap, HarnessError> {
        match self.landmarks.source.as_str() {
            "file" => Ok(LandmarkMap::load(Path::new(&self.landmarks.path))?),
            _ => Ok(LandmarkMap::ground_grid()),
        }
    }

    pub fn rig(&self) -> Result<CameraRig, HarnessError> {
        let rotation = exp_so3(&(PI * vec3(&self.camera.rotation)));
        let [fx, fy] = self.camera.focal;
        let [cx, cy] = self.camera.center;
        let intrinsics = Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0);
        Ok(CameraRig::new(
            rotation,
            vec3(&self.camera.position),
            intrinsics,
        )?)
    }

    pub fn pose_gains(&self) -> Result<PoseGains, HarnessError> {
        Ok(PoseGains::new(self.gains.k_r, self.gains.k_p)?)
    }

    /// Anchor weights: `None` requests uniform weighting.
    pub fn anchor_weights(&self) -> Option<&[f64]> {
        if self.gains.rho.is_empty() {
            None
        } else {
            Some(&self.gains.rho)
        }
    }

    /// Initial attitude estimate `exp(angle * pi * axis)`.
    pub fn initial_attitude(&self) -> Matrix3<f64> {
        let axis = vec3(&self.initial.attitude_axis).normalize();
        exp_so3(&(self.initial.attitude_angle * PI * axis))
    }

    pub fn initial_position(&self) -> Vector3<f64> {
        vec3(&self.initial.position)
    }
}
