//! Shared inputs for the kernel benchmarks.

use warpsynth::phantom::{self, DeformationSpec, PhantomSpec, PhantomSubject};
use warpsynth::transform::VelocityField;
use warpsynth::Geometry;

/// Noisy phantom and a deformed copy of it on a cube of side `n`.
pub fn phantom_pair(n: usize) -> (PhantomSubject, PhantomSubject) {
    let spec = PhantomSpec {
        dims: [n; 3],
        deformation: DeformationSpec {
            smoothness: 6.0,
            magnitude: n as f64 / 16.0,
        },
        ..PhantomSpec::default()
    };
    let fixed = phantom::generate(&spec).expect("default phantom");
    let moving = phantom::deform_subject(&fixed, &spec.deformation, 1).expect("deformation");
    (fixed, moving)
}

/// Smooth random velocity with the given peak displacement.
pub fn velocity(n: usize, magnitude: f64) -> VelocityField {
    let deformation = DeformationSpec {
        smoothness: 6.0,
        magnitude,
    };
    phantom::random_velocity(&Geometry::unit([n; 3]), &deformation, 7).expect("velocity")
}
