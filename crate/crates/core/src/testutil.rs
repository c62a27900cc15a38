//! Seeded random samplers shared by the unit tests.

use nalgebra::{Unit, UnitVector3, Vector3};
use rand::Rng;

use crate::geometry::exp_so3;

pub fn random_vector(rng: &mut impl Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
    )
}

pub fn random_unit(rng: &mut impl Rng) -> UnitVector3<f64> {
    loop {
        let v = random_vector(rng, 1.0);
        if v.norm() > 1e-3 {
            return Unit::new_normalize(v);
        }
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> nalgebra::Matrix3<f64> {
    let axis = random_unit(rng);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    exp_so3(&(angle * axis.into_inner()))
}
