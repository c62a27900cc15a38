//! Parameter sweeps: one full scenario run per value of a single axis, fanned
//! out across workers, with results merged in value order.

use super::config::ScenarioConfig;
use super::run::run_scenario;
use super::HarnessError;
use crate::analysis::fit_exponential;
use crate::pose_observer::AnchorSet;
use nalgebra::Vector3;
use rayon::prelude::*;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

/// The parameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    /// Attitude gain `k_r`.
    GainRotation,
    /// Position gain `k_p`.
    GainPosition,
    /// Integrator step.
    TimeStep,
    /// Initial attitude-error angle, in units of pi.
    InitialAngle,
    /// Multiplier on the Riccati output weight `q`.
    OutputWeightScale,
    /// Multiplier on the Riccati stabilizer `v`.
    StabilizerScale,
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::GainRotation => "k_r",
            SweepAxis::GainPosition => "k_p",
            SweepAxis::TimeStep => "dt",
            SweepAxis::InitialAngle => "init-angle",
            SweepAxis::OutputWeightScale => "q-scale",
            SweepAxis::StabilizerScale => "v-scale",
        }
    }
}

impl FromStr for SweepAxis {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "k_r" | "k-r" => Ok(SweepAxis::GainRotation),
            "k_p" | "k-p" => Ok(SweepAxis::GainPosition),
            "dt" => Ok(SweepAxis::TimeStep),
            "init-angle" | "init_angle" => Ok(SweepAxis::InitialAngle),
            "q-scale" | "q_scale" => Ok(SweepAxis::OutputWeightScale),
            "v-scale" | "v_scale" => Ok(SweepAxis::StabilizerScale),
            other => Err(HarnessError::UnknownAxis(other.to_string())),
        }
    }
}

/// Summary of one sweep run.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub axis: String,
    pub label: String,
    pub value: f64,
    pub terminal_attitude_distance: f64,
    pub terminal_ptilde_norm: f64,
    pub terminal_xtilde_norm: f64,
    /// Fitted decay rate of the extended error norm (NaN when no fit is
    /// possible, e.g. zero horizon).
    pub decay_rate: f64,
}

fn apply_axis(base: &ScenarioConfig, axis: SweepAxis, value: f64) -> ScenarioConfig {
    let mut config = base.clone();
    match axis {
        SweepAxis::GainRotation => config.gains.k_r = value,
        SweepAxis::GainPosition => config.gains.k_p = value,
        SweepAxis::TimeStep => config.run.dt = value,
        SweepAxis::InitialAngle => config.initial.attitude_angle = value,
        SweepAxis::OutputWeightScale => config.riccati.q = base.riccati.q * value,
        SweepAxis::StabilizerScale => config.riccati.v = base.riccati.v * value,
    }
    config
}

fn summarize(
    axis: SweepAxis,
    label: String,
    value: f64,
    config: &ScenarioConfig,
) -> Result<SweepRow, HarnessError> {
    let art = run_scenario(config)?;
    let horizon = config.run.horizon;
    let rate = fit_exponential(
        &art.xtilde_trace(),
        ((0.05 * horizon).min(1.0), 0.75 * horizon),
    )
    .map(|fit| fit.rate)
    .unwrap_or(f64::NAN);
    let last = art.terminal();
    Ok(SweepRow {
        axis: axis.name().to_string(),
        label,
        value,
        terminal_attitude_distance: last.map_or(f64::NAN, |r| r.attitude_distance),
        terminal_ptilde_norm: last.map_or(f64::NAN, |r| r.ptilde_norm),
        terminal_xtilde_norm: last.map_or(f64::NAN, |r| r.xtilde_norm),
        decay_rate: rate,
    })
}

/// Runs one scenario per value (in parallel, results in value order). An
/// initial-angle sweep appends one extra labeled run initialized exactly
/// opposite an eigenvector of the anchor moment matrix — the measure-zero
/// configuration the attitude basin excludes.
pub fn run_sweep(
    base: &ScenarioConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<Vec<SweepRow>, HarnessError> {
    base.validate()?;
    let mut jobs: Vec<(String, f64, ScenarioConfig)> = values
        .iter()
        .map(|&v| (format!("{}={v}", axis.name()), v, apply_axis(base, axis, v)))
        .collect();
    if axis == SweepAxis::InitialAngle {
        let map = base.landmark_map()?;
        let anchors = AnchorSet::build(map.known_positions(), base.anchor_weights())?;
        let eig = nalgebra::SymmetricEigen::new(anchors.moment());
        let widx = eig.eigenvalues.imax();
        let v: Vector3<f64> = eig.eigenvectors.column(widx).into();
        let mut config = base.clone();
        config.initial.attitude_angle = 1.0;
        config.initial.attitude_axis = [v.x, v.y, v.z];
        jobs.push(("antipodal-moment-eigenvector".to_string(), 1.0, config));
    }
    jobs.par_iter()
        .map(|(label, value, config)| summarize(axis, label.clone(), *value, config))
        .collect()
}

/// Writes the sweep summary as `sweep.csv` in `dir`.
pub fn write_sweep_csv(rows: &[SweepRow], dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join("sweep.csv"))?);
    writeln!(
        w,
        "axis,label,value,terminal_attitude_distance,terminal_ptilde_norm,\
         terminal_xtilde_norm,decay_rate"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.axis,
            r.label,
            r.value,
            r.terminal_attitude_distance,
            r.terminal_ptilde_norm,
            r.terminal_xtilde_norm,
            r.decay_rate
        )?;
    }
    w.flush()?;
    Ok(())
}
