//! Volumetric data model and multi-resolution pyramids.
//!
//! Every grid stores its samples in a flat array with x varying fastest, then
//! y, then z.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid size, voxel spacing (mm) and position of voxel (0, 0, 0) (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!(
                "dims must be positive, got {dims:?}"
            )));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("origin must be finite"));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
        })
    }

    /// Isotropic 1 mm grid at the origin.
    pub fn unit(dims: [usize; 3]) -> Self {
        Self::new(dims, [1.0; 3], [0.0; 3]).expect("dims must be positive")
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    /// True for voxels with a neighbour on both sides along every axis of
    /// extent > 1.
    pub fn is_interior(&self, i: usize) -> bool {
        let c = self.coords(i);
        (0..3).all(|a| self.dims[a] == 1 || (c[a] > 0 && c[a] + 1 < self.dims[a]))
    }

    /// Fails with an invalid-argument error naming `what` unless the dims
    /// agree.
    pub fn check_same_dims(&self, other: &Geometry, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::invalid(format!(
                "{what}: dims mismatch {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    /// Geometry of a block-downsampled grid.
    fn downsampled(&self, factor: usize) -> Geometry {
        let f = factor as f64;
        let mut dims = [0; 3];
        let mut spacing = [0.0; 3];
        let mut origin = [0.0; 3];
        for a in 0..3 {
            dims[a] = self.dims[a].div_ceil(factor);
            spacing[a] = self.spacing[a] * f;
            origin[a] = self.origin[a] + 0.5 * (f - 1.0) * self.spacing[a];
        }
        Geometry {
            dims,
            spacing,
            origin,
        }
    }
}

/// Scalar image with an optional foreground mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    geometry: Geometry,
    data: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self {
            geometry,
            data,
            mask: None,
        })
    }

    pub fn filled(geometry: Geometry, value: f64) -> Self {
        Self::new(geometry, vec![value; geometry.len()]).expect("finite fill value")
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> f64) -> Result<Self> {
        let data = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Self::new(geometry, data)
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.data.len() {
            return Err(Error::invalid("mask dims do not match volume"));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn without_mask(mut self) -> Self {
        self.mask = None;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Applies `f` voxel-wise, keeping geometry and mask.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume> {
        let data = self.data.iter().map(|&v| f(v)).collect();
        let mut out = Volume::new(self.geometry, data)?;
        out.mask = self.mask.clone();
        Ok(out)
    }
}

/// Integer segmentation sharing a volume's geometry. Label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    geometry: Geometry,
    labels: Vec<u32>,
    label_set: Vec<u32>,
}

impl LabelMap {
    pub fn new(geometry: Geometry, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "label length {} does not match dims {:?}",
                labels.len(),
                geometry.dims
            )));
        }
        let label_set = labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        Ok(Self {
            geometry,
            labels,
            label_set,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Sorted distinct labels, background included when present.
    pub fn label_set(&self) -> &[u32] {
        &self.label_set
    }

    pub fn foreground_labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.label_set.iter().copied().filter(|&l| l != 0)
    }

    /// Boolean mask of voxels with a non-background label.
    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }
}

/// Dense 3-vector field on a grid, in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    geometry: Geometry,
    vectors: Vec<[f64; 3]>,
}

impl VectorField {
    pub fn new(geometry: Geometry, vectors: Vec<[f64; 3]>) -> Result<Self> {
        if vectors.len() != geometry.len() {
            return Err(Error::invalid(format!(
                "vector count {} does not match dims {:?}",
                vectors.len(),
                geometry.dims
            )));
        }
        if let Some(i) = vectors
            .iter()
            .position(|v| v.iter().any(|c| !c.is_finite()))
        {
            return Err(Error::invalid(format!("non-finite vector at voxel {i}")));
        }
        Ok(Self { geometry, vectors })
    }

    pub fn zeros(geometry: Geometry) -> Self {
        Self {
            geometry,
            vectors: vec![[0.0; 3]; geometry.len()],
        }
    }

    pub fn from_fn(geometry: Geometry, f: impl Fn([usize; 3]) -> [f64; 3]) -> Result<Self> {
        let vectors = (0..geometry.len()).map(|i| f(geometry.coords(i))).collect();
        Self::new(geometry, vectors)
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn vectors(&self) -> &[[f64; 3]] {
        &self.vectors
    }

    pub fn into_vectors(self) -> Vec<[f64; 3]> {
        self.vectors
    }

    pub fn max_norm(&self) -> f64 {
        self.vectors.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> VectorField {
        VectorField {
            geometry: self.geometry,
            vectors: self
                .vectors
                .iter()
                .map(|v| [v[0] * s, v[1] * s, v[2] * s])
                .collect(),
        }
    }
}

#[inline]
pub fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// One resolution level: an image with its optional segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub factor: usize,
}

/// Resolution levels ordered coarsest to finest.
#[derive(Debug, Clone, PartialEq)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn factors(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.factor).collect()
    }

    /// Copy with every level image Gaussian-smoothed; labels untouched.
    pub fn smoothed(&self, sigma: f64) -> Pyramid {
        if sigma <= 0.0 {
            return self.clone();
        }
        Pyramid {
            levels: self
                .levels
                .iter()
                .map(|l| PyramidLevel {
                    volume: smooth_volume(&l.volume, sigma),
                    labels: l.labels.clone(),
                    factor: l.factor,
                })
                .collect(),
        }
    }

    pub fn finest(&self) -> &PyramidLevel {
        self.levels.last().expect("pyramid is never empty")
    }
}

/// Singleton axes are ignored when bounding the factor, so thin volumes can
/// still be reduced along their other axes.
fn check_factor(dims: [usize; 3], factor: usize) -> Result<()> {
    let min_dim = dims.iter().copied().filter(|&d| d > 1).min().unwrap_or(1);
    if factor < 1 || factor > min_dim {
        return Err(Error::invalid(format!(
            "downsampling factor {factor} outside [1, {min_dim}]"
        )));
    }
    Ok(())
}

/// Visits the source voxels of every output block.
fn for_each_block(
    src: &Geometry,
    dst: &Geometry,
    factor: usize,
    mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>),
) {
    let [nx, ny, nz] = src.dims;
    for oz in 0..dst.dims[2] {
        for oy in 0..dst.dims[1] {
            for ox in 0..dst.dims[0] {
                let zs = oz * factor..((oz + 1) * factor).min(nz);
                let ys = oy * factor..((oy + 1) * factor).min(ny);
                let xs = ox * factor..((ox + 1) * factor).min(nx);
                let mut it = zs.flat_map(move |z| {
                    let ys = ys.clone();
                    let xs = xs.clone();
                    ys.flat_map(move |y| xs.clone().map(move |x| x + nx * (y + ny * z)))
                });
                f(dst.index(ox, oy, oz), &mut it);
            }
        }
    }
}

/// Block-mean downsampling. Edge blocks average the voxels they contain;
/// masks follow a majority vote with ties going to foreground.
pub fn downsample(v: &Volume, factor: usize) -> Result<Volume> {
    check_factor(v.dims(), factor)?;
    if factor == 1 {
        return Ok(v.clone());
    }
    let src = v.geometry;
    let dst = src.downsampled(factor);
    let mut data = vec![0.0; dst.len()];
    let mut mask = v.mask.as_ref().map(|_| vec![false; dst.len()]);
    for_each_block(&src, &dst, factor, |o, block| {
        let mut sum = 0.0;
        let mut count = 0usize;
        let mut fg = 0usize;
        for i in block {
            sum += v.data[i];
            count += 1;
            if let Some(m) = &v.mask {
                fg += m[i] as usize;
            }
        }
        data[o] = sum / count as f64;
        if let Some(m) = mask.as_mut() {
            m[o] = 2 * fg >= count;
        }
    });
    let out = Volume::new(dst, data)?;
    match mask {
        Some(m) => out.with_mask(m),
        None => Ok(out),
    }
}

/// Modal-label downsampling; ties go to the smallest label.
pub fn downsample_labels(l: &LabelMap, factor: usize) -> Result<LabelMap> {
    check_factor(l.dims(), factor)?;
    if factor == 1 {
        return Ok(l.clone());
    }
    let src = l.geometry;
    let dst = src.downsampled(factor);
    let mut labels = vec![0u32; dst.len()];
    let mut counts: Vec<(u32, usize)> = Vec::new();
    for_each_block(&src, &dst, factor, |o, block| {
        counts.clear();
        for i in block {
            let lab = l.labels[i];
            match counts.iter_mut().find(|(k, _)| *k == lab) {
                Some((_, c)) => *c += 1,
                None => counts.push((lab, 1)),
            }
        }
        let mut best = counts[0];
        for &(lab, c) in &counts[1..] {
            if c > best.1 || (c == best.1 && lab < best.0) {
                best = (lab, c);
            }
        }
        labels[o] = best.0;
    });
    LabelMap::new(dst, labels)
}

/// Builds a pyramid from a schedule of factors listed coarse to fine.
pub fn build_pyramid(v: &Volume, labels: Option<&LabelMap>, schedule: &[usize]) -> Result<Pyramid> {
    validate_schedule(schedule)?;
    if let Some(l) = labels {
        v.geometry.check_same_dims(&l.geometry, "pyramid labels")?;
    }
    let levels = schedule
        .iter()
        .map(|&factor| {
            Ok(PyramidLevel {
                volume: downsample(v, factor)?,
                labels: labels.map(|l| downsample_labels(l, factor)).transpose()?,
                factor,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Pyramid { levels })
}

pub fn validate_schedule(schedule: &[usize]) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::invalid("pyramid schedule is empty"));
    }
    if schedule.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::invalid(format!(
            "pyramid factors must be non-increasing toward fine levels: {schedule:?}"
        )));
    }
    if *schedule.last().unwrap() != 1 {
        return Err(Error::invalid("finest pyramid factor must be 1"));
    }
    if schedule.contains(&0) {
        return Err(Error::invalid("pyramid factors must be >= 1"));
    }
    Ok(())
}

/// Normalized 1D Gaussian kernel truncated at `radius`.
pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Gaussian-smoothed copy of a volume (edge-replicated), keeping its mask.
pub fn smooth_volume(v: &Volume, sigma: f64) -> Volume {
    let mut data = v.data.clone();
    gaussian_smooth(&mut data, v.dims(), 1, sigma);
    Volume {
        geometry: v.geometry,
        data,
        mask: v.mask.clone(),
    }
}

/// Separable Gaussian smoothing with edge-replicated boundaries, applied to
/// `channels` interleaved values per voxel.
pub(crate) fn gaussian_smooth(data: &mut [f64], dims: [usize; 3], channels: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = dims[axis];
        if n == 1 {
            continue;
        }
        let stride = strides[axis];
        let total = dims[0] * dims[1] * dims[2];
        for v in 0..total {
            let pos = (v / stride) % n;
            for c in 0..channels {
                let mut acc = 0.0;
                for (k, w) in kernel.iter().enumerate() {
                    let off = k as isize - radius as isize;
                    let p = (pos as isize + off).clamp(0, n as isize - 1) as usize;
                    let src = v - pos * stride + p * stride;
                    acc += w * data[src * channels + c];
                }
                tmp[v * channels + c] = acc;
            }
        }
        data.copy_from_slice(&tmp);
    }
}
