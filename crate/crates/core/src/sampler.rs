//! Trilinear warping of volumes and label maps, with the analytic derivative
//! of the warped intensity with respect to the displacement.
//!
//! Sample coordinates outside the grid are clamped to the boundary. The
//! derivative along a clamped axis is zero.

use crate::error::{Error, Result};
use crate::grid::{Geometry, LabelMap, Volume};
use crate::par;
use crate::transform::DisplacementField;

/// Per-voxel derivative of the warped intensity with respect to that voxel's
/// displacement, in intensity per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpGradient(pub Vec<[f64; 3]>);

impl WarpGradient {
    pub fn as_slice(&self) -> &[[f64; 3]] {
        &self.0
    }
}

/// Trilinearly warped one-hot encodings of a label map, with per-label warp
/// gradients.
#[derive(Debug, Clone)]
pub struct SoftLabels {
    pub labels: Vec<u32>,
    pub masks: Vec<Vec<f64>>,
    pub gradients: Vec<WarpGradient>,
}

impl SoftLabels {
    pub fn mask_of(&self, label: u32) -> Option<(&[f64], &WarpGradient)> {
        self.labels
            .iter()
            .position(|&l| l == label)
            .map(|k| (self.masks[k].as_slice(), &self.gradients[k]))
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AxisSample {
    pub i0: usize,
    pub i1: usize,
    pub f: f64,
    pub active: bool,
}

#[inline]
pub(crate) fn axis_sample(p: f64, n: usize) -> AxisSample {
    if n == 1 {
        return AxisSample {
            i0: 0,
            i1: 0,
            f: 0.0,
            active: false,
        };
    }
    let max = (n - 1) as f64;
    let (q, active) = if p < 0.0 {
        (0.0, false)
    } else if p > max {
        (max, false)
    } else {
        (p, true)
    };
    let i0 = (q.floor() as usize).min(n - 2);
    AxisSample {
        i0,
        i1: i0 + 1,
        f: q - i0 as f64,
        active,
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a * (1.0 - t) + b * t
}

#[inline]
fn corners(data: &[f64], dims: [usize; 3], ax: &[AxisSample; 3]) -> [f64; 8] {
    let sx = 1;
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let (x0, x1) = (ax[0].i0 * sx, ax[0].i1 * sx);
    let (y0, y1) = (ax[1].i0 * sy, ax[1].i1 * sy);
    let (z0, z1) = (ax[2].i0 * sz, ax[2].i1 * sz);
    [
        data[x0 + y0 + z0],
        data[x1 + y0 + z0],
        data[x0 + y1 + z0],
        data[x1 + y1 + z0],
        data[x0 + y0 + z1],
        data[x1 + y0 + z1],
        data[x0 + y1 + z1],
        data[x1 + y1 + z1],
    ]
}

#[inline]
fn interp(c: &[f64; 8], fx: f64, fy: f64, fz: f64) -> f64 {
    let c00 = lerp(c[0], c[1], fx);
    let c10 = lerp(c[2], c[3], fx);
    let c01 = lerp(c[4], c[5], fx);
    let c11 = lerp(c[6], c[7], fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

#[inline]
fn interp_grad(c: &[f64; 8], ax: &[AxisSample; 3]) -> [f64; 3] {
    let (fx, fy, fz) = (ax[0].f, ax[1].f, ax[2].f);
    let gx = if ax[0].active {
        lerp(
            lerp(c[1] - c[0], c[3] - c[2], fy),
            lerp(c[5] - c[4], c[7] - c[6], fy),
            fz,
        )
    } else {
        0.0
    };
    let gy = if ax[1].active {
        lerp(
            lerp(c[2] - c[0], c[3] - c[1], fx),
            lerp(c[6] - c[4], c[7] - c[5], fx),
            fz,
        )
    } else {
        0.0
    };
    let gz = if ax[2].active {
        lerp(
            lerp(c[4] - c[0], c[5] - c[1], fx),
            lerp(c[6] - c[2], c[7] - c[3], fx),
            fy,
        )
    } else {
        0.0
    };
    [gx, gy, gz]
}

#[inline]
fn axes(dims: [usize; 3], p: [f64; 3]) -> [AxisSample; 3] {
    [
        axis_sample(p[0], dims[0]),
        axis_sample(p[1], dims[1]),
        axis_sample(p[2], dims[2]),
    ]
}

/// Trilinear sample of a scalar grid at a voxel coordinate.
#[inline]
pub(crate) fn sample(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> f64 {
    let ax = axes(dims, p);
    interp(&corners(data, dims, &ax), ax[0].f, ax[1].f, ax[2].f)
}

#[inline]
pub(crate) fn sample_with_grad(data: &[f64], dims: [usize; 3], p: [f64; 3]) -> (f64, [f64; 3]) {
    let ax = axes(dims, p);
    let c = corners(data, dims, &ax);
    let mut g = interp_grad(&c, &ax);
    // On an interior knot the interpolant has a kink; use the mean of the
    // one-sided derivatives so both step directions are treated alike.
    for a in 0..3 {
        if ax[a].active && ax[a].f == 0.0 && ax[a].i0 > 0 {
            let mut left = ax;
            left[a] = AxisSample {
                i0: ax[a].i0 - 1,
                i1: ax[a].i0,
                f: 1.0,
                active: true,
            };
            let gl = interp_grad(&corners(data, dims, &left), &left);
            g[a] = 0.5 * (g[a] + gl[a]);
        }
    }
    (interp(&c, ax[0].f, ax[1].f, ax[2].f), g)
}

/// Trilinear sample of a vector grid.
#[inline]
pub(crate) fn sample_vector(data: &[[f64; 3]], dims: [usize; 3], p: [f64; 3]) -> [f64; 3] {
    let ax = axes(dims, p);
    let sy = dims[0];
    let sz = dims[0] * dims[1];
    let idx = [
        ax[0].i0 + ax[1].i0 * sy + ax[2].i0 * sz,
        ax[0].i1 + ax[1].i0 * sy + ax[2].i0 * sz,
        ax[0].i0 + ax[1].i1 * sy + ax[2].i0 * sz,
        ax[0].i1 + ax[1].i1 * sy + ax[2].i0 * sz,
        ax[0].i0 + ax[1].i0 * sy + ax[2].i1 * sz,
        ax[0].i1 + ax[1].i0 * sy + ax[2].i1 * sz,
        ax[0].i0 + ax[1].i1 * sy + ax[2].i1 * sz,
        ax[0].i1 + ax[1].i1 * sy + ax[2].i1 * sz,
    ];
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let c = idx.map(|i| data[i][k]);
        *o = interp(&c, ax[0].f, ax[1].f, ax[2].f);
    }
    out
}

#[inline]
pub(crate) fn sample_point(dims: [usize; 3], i: usize, u: [f64; 3]) -> [f64; 3] {
    let nx = dims[0];
    let ny = dims[1];
    [
        (i % nx) as f64 + u[0],
        ((i / nx) % ny) as f64 + u[1],
        (i / (nx * ny)) as f64 + u[2],
    ]
}

/// Resamples `moving` at `x + u(x)` for every voxel `x`.
pub fn warp(moving: &Volume, u: &DisplacementField) -> Result<Volume> {
    moving
        .geometry()
        .check_same_dims(u.geometry(), "warp displacement")?;
    let dims = moving.dims();
    let src = moving.data();
    let vectors = u.vectors();
    let data = par::map(src.len(), |i| {
        sample(src, dims, sample_point(dims, i, vectors[i]))
    });
    finish_warp(moving, u, data)
}

fn finish_warp(moving: &Volume, u: &DisplacementField, data: Vec<f64>) -> Result<Volume> {
    let out = Volume::new(*moving.geometry(), data)?;
    match moving.mask() {
        Some(mask) => {
            let m: Vec<f64> = mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let dims = moving.dims();
            let vectors = u.vectors();
            let warped = par::map(m.len(), |i| {
                sample(&m, dims, sample_point(dims, i, vectors[i])) >= 0.5
            });
            out.with_mask(warped)
        }
        None => Ok(out),
    }
}

/// Nearest-neighbour warp of a label map.
pub fn warp_labels(moving: &LabelMap, u: &DisplacementField) -> Result<LabelMap> {
    moving
        .geometry()
        .check_same_dims(u.geometry(), "warp_labels displacement")?;
    let dims = moving.dims();
    let src = moving.labels();
    let vectors = u.vectors();
    let labels = par::map(src.len(), |i| {
        let p = sample_point(dims, i, vectors[i]);
        let mut idx = [0usize; 3];
        for a in 0..3 {
            idx[a] = p[a].round().clamp(0.0, (dims[a] - 1) as f64) as usize;
        }
        src[idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])]
    });
    LabelMap::new(*moving.geometry(), labels)
}

/// Warps and returns the derivative of every warped voxel with respect to
/// its own displacement. The volume is bit-identical to [`warp`].
pub fn warp_with_gradient(
    moving: &Volume,
    u: &DisplacementField,
) -> Result<(Volume, WarpGradient)> {
    moving
        .geometry()
        .check_same_dims(u.geometry(), "warp displacement")?;
    let dims = moving.dims();
    let src = moving.data();
    let vectors = u.vectors();
    let pairs = par::map(src.len(), |i| {
        sample_with_grad(src, dims, sample_point(dims, i, vectors[i]))
    });
    let (data, grad): (Vec<f64>, Vec<[f64; 3]>) = pairs.into_iter().unzip();
    Ok((finish_warp(moving, u, data)?, WarpGradient(grad)))
}

/// Warps the one-hot encoding of each label in `labels` trilinearly.
pub fn warp_one_hot(
    moving: &LabelMap,
    labels: &[u32],
    u: &DisplacementField,
) -> Result<SoftLabels> {
    let channels = one_hot_channels(moving, labels);
    warp_label_channels(&channels, labels, moving.geometry(), u)
}

/// One-hot encodings of `labels`, one channel per label.
pub fn one_hot_channels(moving: &LabelMap, labels: &[u32]) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&label| {
            moving
                .labels()
                .iter()
                .map(|&l| if l == label { 1.0 } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Warps precomputed per-label channels (see [`one_hot_channels`]) living on
/// `geometry`.
pub fn warp_label_channels(
    channels: &[Vec<f64>],
    labels: &[u32],
    geometry: &Geometry,
    u: &DisplacementField,
) -> Result<SoftLabels> {
    geometry.check_same_dims(u.geometry(), "warp_one_hot displacement")?;
    if channels.len() != labels.len() || channels.iter().any(|c| c.len() != geometry.len()) {
        return Err(Error::invalid(
            "label channels do not match labels/geometry",
        ));
    }
    let dims = geometry.dims;
    let vectors = u.vectors();
    let mut masks = Vec::with_capacity(labels.len());
    let mut gradients = Vec::with_capacity(labels.len());
    for onehot in channels {
        let pairs = par::map(onehot.len(), |i| {
            sample_with_grad(onehot, dims, sample_point(dims, i, vectors[i]))
        });
        let (m, g): (Vec<f64>, Vec<[f64; 3]>) = pairs.into_iter().unzip();
        masks.push(m);
        gradients.push(WarpGradient(g));
    }
    Ok(SoftLabels {
        labels: labels.to_vec(),
        masks,
        gradients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Geometry, VectorField};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_shift(g: Geometry, s: [f64; 3]) -> DisplacementField {
        DisplacementField::direct(VectorField::new(g, vec![s; g.len()]).unwrap())
    }

    fn ramp_x(dims: [usize; 3]) -> Volume {
        Volume::from_fn(Geometry::unit(dims), |[x, _, _]| x as f64).unwrap()
    }

    fn random_volume(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Volume {
        let g = Geometry::unit(dims);
        Volume::new(
            g,
            (0..g.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_displacement_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = random_volume(&mut rng, [5, 6, 7]);
        let u = DisplacementField::zeros(*v.geometry());
        assert_eq!(warp(&v, &u).unwrap(), v);
        let l = LabelMap::new(*v.geometry(), (0..210).map(|i| i % 4).collect()).unwrap();
        assert_eq!(warp_labels(&l, &u).unwrap(), l);
    }

    #[test]
    fn integer_shift_clamps_at_edge() {
        let v = ramp_x([6, 3, 3]);
        let w = warp(&v, &constant_shift(*v.geometry(), [1.0, 0.0, 0.0])).unwrap();
        for i in 0..w.data().len() {
            let x = v.geometry().coords(i)[0] as f64;
            assert_eq!(w.data()[i], (x + 1.0).min(5.0));
        }
    }

    #[test]
    fn half_voxel_shift_interpolates() {
        let v = ramp_x([6, 3, 3]);
        let w = warp(&v, &constant_shift(*v.geometry(), [0.5, 0.0, 0.0])).unwrap();
        for i in 0..w.data().len() {
            let x = v.geometry().coords(i)[0];
            if x < 5 {
                assert!((w.data()[i] - (x as f64 + 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn label_shift_and_rounding() {
        let g = Geometry::unit([5, 2, 1]);
        let l = LabelMap::new(g, (0..10).map(|i| (i % 5) as u32).collect()).unwrap();
        let shifted = warp_labels(&l, &constant_shift(g, [2.0, 0.0, 0.0])).unwrap();
        for i in 0..10 {
            let x = g.coords(i)[0] as u32;
            assert_eq!(shifted.labels()[i], (x + 2).min(4));
        }
        let nudged = warp_labels(&l, &constant_shift(g, [0.4, -0.4, 0.0])).unwrap();
        assert_eq!(nudged, l);
    }

    #[test]
    fn warped_label_set_is_subset() {
        let g = Geometry::unit([6, 6, 6]);
        let l = LabelMap::new(g, (0..216).map(|i| (i % 7) as u32 * 2).collect()).unwrap();
        let w = warp_labels(&l, &constant_shift(g, [1.7, -2.2, 0.3])).unwrap();
        assert!(w.label_set().iter().all(|x| l.label_set().contains(x)));
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let v = Volume::filled(Geometry::unit([4, 4, 4]), 2.0);
        let (_, g) =
            warp_with_gradient(&v, &constant_shift(*v.geometry(), [0.3, 0.2, 0.1])).unwrap();
        assert!(g.0.iter().all(|d| *d == [0.0; 3]));
    }

    #[test]
    fn gradient_of_ramp_is_unit_x() {
        let v = ramp_x([8, 8, 8]);
        let g = *v.geometry();
        let u = constant_shift(g, [0.37, -0.21, 0.44]);
        let (_, grad) = warp_with_gradient(&v, &u).unwrap();
        for i in 0..g.len() {
            if g.is_interior(i) {
                let d = grad.0[i];
                assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let v = random_volume(&mut rng, [8, 8, 8]);
        let g = *v.geometry();
        let vectors: Vec<[f64; 3]> = (0..g.len())
            .map(|_| std::array::from_fn(|_| rng.random_range(-0.8..0.8)))
            .collect();
        let u = DisplacementField::direct(VectorField::new(g, vectors.clone()).unwrap());
        let (_, grad) = warp_with_gradient(&v, &u).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for i in 0..g.len() {
            let p = sample_point(g.dims, i, vectors[i]);
            // stay away from cell faces and the clamp region
            let safe = (0..3).all(|a| {
                let f = p[a] - p[a].floor();
                p[a] > 0.0 && p[a] < 7.0 && f > 10.0 * h && f < 1.0 - 10.0 * h
            });
            if !safe {
                continue;
            }
            for a in 0..3 {
                let mut plus = p;
                let mut minus = p;
                plus[a] += h;
                minus[a] -= h;
                let fd =
                    (sample(v.data(), g.dims, plus) - sample(v.data(), g.dims, minus)) / (2.0 * h);
                let an = grad.0[i][a];
                let rel = (fd - an).abs() / an.abs().max(1e-8);
                assert!(rel < 1e-4, "voxel {i} axis {a}: fd {fd} analytic {an}");
            }
            checked += 1;
        }
        assert!(checked > 100);
    }

    proptest! {
        #[test]
        fn warp_is_linear_and_convex(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f = random_volume(&mut rng, [5, 4, 6]);
            let h = random_volume(&mut rng, [5, 4, 6]);
            let geom = *f.geometry();
            let vectors: Vec<[f64; 3]> = (0..geom.len())
                .map(|_| std::array::from_fn(|_| rng.random_range(-2.5..2.5)))
                .collect();
            let u = DisplacementField::direct(VectorField::new(geom, vectors).unwrap());
            let combo = Volume::new(
                geom,
                f.data().iter().zip(h.data()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let wf = warp(&f, &u).unwrap();
            let wh = warp(&h, &u).unwrap();
            let wc = warp(&combo, &u).unwrap();
            for i in 0..geom.len() {
                let expect = a * wf.data()[i] + b * wh.data()[i];
                prop_assert!((wc.data()[i] - expect).abs() < 1e-12);
            }
            let (lo, hi) = f.min_max();
            prop_assert!(wf.data().iter().all(|&x| x >= lo - 1e-15 && x <= hi + 1e-15));
            let (wg, _) = warp_with_gradient(&f, &u).unwrap();
            prop_assert!(wg.data().iter().zip(wf.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mask_follows_warp() {
        let g = Geometry::unit([6, 1, 1]);
        let v = Volume::filled(g, 1.0)
            .with_mask(vec![false, false, true, true, false, false])
            .unwrap();
        let w = warp(&v, &constant_shift(g, [1.0, 0.0, 0.0])).unwrap();
        assert_eq!(w.mask().unwrap(), &[false, true, true, false, false, false]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let v = ramp_x([4, 4, 4]);
        let u = DisplacementField::zeros(Geometry::unit([4, 4, 5]));
        assert!(warp(&v, &u).is_err());
        assert!(warp_with_gradient(&v, &u).is_err());
    }
}
