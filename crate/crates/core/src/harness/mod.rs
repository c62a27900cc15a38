//! Scenario orchestration: configuration files, full cascade runs, trace
//! persistence, observability reports, and parameter sweeps behind the
//! `mononav` command-line interface.

pub mod config;
pub mod run;
pub mod sweep;

pub use config::{ConfigError, ScenarioConfig};
pub use run::{
    check_observability, run_pose_only, run_riccati_only, run_scenario, write_observability,
    write_outputs, ObservabilityReports, PoseRow, ScenarioArtifacts, StepRecord,
};
pub use sweep::{run_sweep, write_sweep_csv, SweepAxis, SweepRow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error(transparent)]
    Sensors(#[from] crate::sensors::SensorError),
    #[error(transparent)]
    Map(#[from] crate::sensors::MapError),
    #[error(transparent)]
    Observer(#[from] crate::ltv_observer::ObserverError),
    #[error(transparent)]
    Pose(#[from] crate::pose_observer::PoseObserverError),
    #[error(transparent)]
    Anchors(#[from] crate::pose_observer::AnchorError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(
        "unknown sweep axis `{0}`; expected one of k_r, k_p, dt, init-angle, q-scale, v-scale"
    )]
    UnknownAxis(String),
}

impl HarnessError {
    /// Stable machine-readable tag for CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Dynamics(_) => "dynamics",
            HarnessError::Sensors(_) => "sensors",
            HarnessError::Map(_) => "landmark-map",
            HarnessError::Observer(_) => "ltv-observer",
            HarnessError::Pose(_) => "pose-observer",
            HarnessError::Anchors(_) => "anchors",
            HarnessError::Analysis(_) => "analysis",
            HarnessError::Io(_) => "io",
            HarnessError::UnknownAxis(_) => "sweep-axis",
        }
    }
}
