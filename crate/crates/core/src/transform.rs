//! Stationary velocity fields, their exponential by scaling and squaring,
//! composition of displacement fields and Jacobian determinants.
//!
//! All vectors are in voxel units of the grid they live on.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Geometry, VectorField, Volume};
use crate::par;
use crate::sampler::{sample_point, sample_vector};

pub const DEFAULT_EXP_STEPS: u32 = 6;

/// Velocity of a stationary flow, in voxels per unit time.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField(VectorField);

impl VelocityField {
    pub fn new(field: VectorField) -> Self {
        Self(field)
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self(VectorField::zeros(geometry))
    }

    pub fn field(&self) -> &VectorField {
        &self.0
    }

    pub fn into_field(self) -> VectorField {
        self.0
    }

    pub fn negated(&self) -> VelocityField {
        Self(self.0.scaled(-1.0))
    }
}

impl Deref for VelocityField {
    type Target = VectorField;
    fn deref(&self) -> &VectorField {
        &self.0
    }
}

/// How a displacement field was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Direct,
    Exponential { steps: u32 },
}

/// Maps voxel `x` to `x + u(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    field: VectorField,
    provenance: Provenance,
}

impl DisplacementField {
    pub fn direct(field: VectorField) -> Self {
        Self {
            field,
            provenance: Provenance::Direct,
        }
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self::direct(VectorField::zeros(geometry))
    }

    pub fn field(&self) -> &VectorField {
        &self.field
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

impl Deref for DisplacementField {
    type Target = VectorField;
    fn deref(&self) -> &VectorField {
        &self.field
    }
}

/// Smallest number of squarings that brings `max_norm / 2^steps` under half a
/// voxel.
pub fn required_steps(max_norm: f64) -> u32 {
    let mut steps = 1;
    while max_norm / f64::powi(2.0, steps as i32) >= 0.5 {
        steps += 1;
    }
    steps
}

/// Scaling and squaring: `v / 2^steps` composed with itself `steps` times.
pub fn exponentiate(v: &VelocityField, steps: u32) -> Result<DisplacementField> {
    if steps < 1 {
        return Err(Error::invalid("exponentiation needs at least one step"));
    }
    let max = v.max_norm();
    let needed = required_steps(max);
    if steps < needed {
        return Err(Error::Precondition {
            message: format!(
                "velocity max norm {max:.4} voxels is too large for {steps} squaring steps"
            ),
            required_steps: needed,
        });
    }
    let mut u = DisplacementField::direct(v.field().scaled(f64::powi(0.5, steps as i32)));
    for _ in 0..steps {
        u = compose(&u, &u)?;
    }
    u.provenance = Provenance::Exponential { steps };
    Ok(u)
}

/// Like [`exponentiate`], raising `steps` when the stability guard requires
/// it. Returns the step count used.
pub fn exponentiate_auto(v: &VelocityField, steps: u32) -> Result<(DisplacementField, u32)> {
    let steps = steps.max(required_steps(v.max_norm()));
    Ok((exponentiate(v, steps)?, steps))
}

/// `result(x) = inner(x) + outer(x + inner(x))`, i.e. apply `inner` then
/// `outer`.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> Result<DisplacementField> {
    outer
        .geometry()
        .check_same_dims(inner.geometry(), "compose")?;
    let dims = outer.dims();
    let o = outer.vectors();
    let n = inner.vectors();
    let vectors = par::map(n.len(), |i| {
        let s = sample_vector(o, dims, sample_point(dims, i, n[i]));
        [n[i][0] + s[0], n[i][1] + s[1], n[i][2] + s[2]]
    });
    Ok(DisplacementField::direct(VectorField::new(
        *inner.geometry(),
        vectors,
    )?))
}

/// Determinant of the Jacobian of `x + u(x)` in voxel coordinates. Central
/// differences inside, one-sided differences on the boundary.
pub fn jacobian_determinant(u: &DisplacementField) -> Result<Volume> {
    let g = *u.geometry();
    if g.dims.iter().any(|&d| d < 3) {
        return Err(Error::invalid(format!(
            "jacobian needs at least 3 voxels per axis, got {:?}",
            g.dims
        )));
    }
    let vec = u.vectors();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let det = par::map(g.len(), |i| {
        let c = g.coords(i);
        let mut j = [[0.0; 3]; 3];
        for a in 0..3 {
            let s = strides[a];
            let (lo, hi, h) = if c[a] == 0 {
                (i, i + s, 1.0)
            } else if c[a] + 1 == g.dims[a] {
                (i - s, i, 1.0)
            } else {
                (i - s, i + s, 2.0)
            };
            for (comp, row) in j.iter_mut().enumerate() {
                row[a] = (vec[hi][comp] - vec[lo][comp]) / h;
            }
        }
        for (k, row) in j.iter_mut().enumerate() {
            row[k] += 1.0;
        }
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    });
    Volume::new(g, det)
}

/// Minimum of a Jacobian map over interior voxels.
pub fn min_interior(jac: &Volume) -> f64 {
    let g = jac.geometry();
    jac.data()
        .iter()
        .enumerate()
        .filter(|(i, _)| g.is_interior(*i))
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min)
}

/// Trilinear upsampling of a velocity between two levels of a block-mean
/// pyramid built with factors `coarse_factor` and `fine_factor`. Vectors are
/// rescaled so that magnitudes stay correct in fine voxel units.
pub fn upsample_velocity(
    v: &VelocityField,
    fine: Geometry,
    coarse_factor: usize,
    fine_factor: usize,
) -> Result<VelocityField> {
    if fine_factor == 0 || coarse_factor < fine_factor {
        return Err(Error::invalid(format!(
            "cannot upsample from factor {coarse_factor} to {fine_factor}"
        )));
    }
    let cf = coarse_factor as f64;
    let ff = fine_factor as f64;
    let r = cf / ff;
    let coarse = v.dims();
    let src = v.vectors();
    let vectors = par::map(fine.len(), |i| {
        let c = fine.coords(i);
        // block centres expressed in finest-grid coordinates
        let p = c.map(|x| (x as f64 * ff + 0.5 * (ff - 1.0) - 0.5 * (cf - 1.0)) / cf);
        let s = sample_vector(src, coarse, p);
        [s[0] * r, s[1] * r, s[2] * r]
    });
    Ok(VelocityField::new(VectorField::new(fine, vectors)?))
}
