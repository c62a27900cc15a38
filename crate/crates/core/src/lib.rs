//! Cascaded state estimation from inertial measurements and monocular
//! landmark bearings.
//!
//! A rigid body carrying an IMU and a calibrated camera observes `N` fixed
//! landmarks, `M` of which have known positions. The crate implements and
//! numerically validates a two-stage observer:
//!
//! 1. [`ltv_observer`] — a deterministic Riccati observer on the extended
//!    state (body-frame landmark positions, body-frame velocity, body-frame
//!    gravity), driven by projector-modified bearing outputs. The system is
//!    linear time-varying, so convergence is exponential and global.
//! 2. [`pose_observer`] — a nonlinear observer on SO(3) x R^3 that anchors
//!    the estimated body-frame positions of the known landmarks to their
//!    inertial positions, recovering attitude and position (and, with them,
//!    the unknown landmarks).
//!
//! [`dynamics`] and [`sensors`] simulate the truth, [`analysis`] verifies
//! the observability and stability properties the scheme relies on, and
//! [`harness`] wires everything into reproducible scenario runs behind the
//! `mononav` command-line interface.

pub mod analysis;
pub mod dynamics;
pub mod geometry;
pub mod harness;
pub mod ltv_observer;
pub mod pose_observer;
pub mod sensors;

#[cfg(test)]
pub(crate) mod testutil;
