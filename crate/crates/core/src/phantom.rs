//! Ellipsoid-based multi-contrast head phantoms with known deformations.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_smooth, Geometry, LabelMap, VectorField, Volume};
use crate::par;
use crate::sampler::{warp, warp_labels};
use crate::synthesis::{ir_signal, IrSignalParams, CSFN_TI_MS, WMN_TI_MS};
use crate::transform::{exponentiate_auto, DisplacementField, VelocityField, DEFAULT_EXP_STEPS};

pub const BACKGROUND: u32 = 0;
pub const CSF: u32 = 1;
pub const GRAY: u32 = 2;
pub const WHITE: u32 = 3;
pub const THALAMUS: u32 = 4;

const STREAM_ANATOMY: u64 = 1;
const STREAM_NOISE: u64 = 2;
const STREAM_VELOCITY: u64 = 3;
const MAX_PLACEMENT_TRIES: usize = 1000;

/// Name under which the contrast acquired at `ti` ms is stored.
pub fn contrast_name(ti: f64) -> String {
    if ti.fract() == 0.0 && ti.abs() < 1e15 {
        format!("ti{}", ti as i64)
    } else {
        format!("ti{ti}")
    }
}

/// Name of the CSF-nulled contrast, the registration channel.
pub fn primary_contrast() -> String {
    contrast_name(CSFN_TI_MS)
}

/// Name of the white-matter-nulled contrast, the synthesis target.
pub fn secondary_contrast() -> String {
    contrast_name(WMN_TI_MS)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueParams {
    pub m0: f64,
    /// T1 in ms.
    pub t1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tissues {
    pub csf: TissueParams,
    pub gray: TissueParams,
    pub white: TissueParams,
    pub thalamus: TissueParams,
}

impl Default for Tissues {
    fn default() -> Self {
        Self {
            csf: TissueParams {
                m0: 0.6,
                t1: 4000.0,
            },
            gray: TissueParams {
                m0: 0.9,
                t1: 1200.0,
            },
            white: TissueParams { m0: 1.0, t1: 800.0 },
            thalamus: TissueParams {
                m0: 0.95,
                t1: 1000.0,
            },
        }
    }
}

impl Tissues {
    /// Tissue parameters keyed by label.
    pub fn by_label(&self) -> [(u32, TissueParams); 4] {
        [
            (CSF, self.csf),
            (GRAY, self.gray),
            (WHITE, self.white),
            (THALAMUS, self.thalamus),
        ]
    }
}

/// Extra ellipsoids embedded in white matter. Radii are fractions of the
/// smallest grid extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureSpec {
    pub count: usize,
    pub radius_min: f64,
    pub radius_max: f64,
}

impl Default for StructureSpec {
    fn default() -> Self {
        Self {
            count: 40,
            radius_min: 0.025,
            radius_max: 0.05,
        }
    }
}

/// Random smooth deformation: Gaussian width of the smoothing (voxels) and the
/// maximum displacement (voxels).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeformationSpec {
    pub smoothness: f64,
    pub magnitude: f64,
}

impl Default for DeformationSpec {
    fn default() -> Self {
        Self {
            smoothness: 8.0,
            magnitude: 4.0,
        }
    }
}

impl DeformationSpec {
    fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if !(self.smoothness.is_finite() && self.smoothness > 0.0) {
            return Err(Error::invalid("deformation smoothness must be positive"));
        }
        let limit = *dims.iter().min().unwrap() as f64 / 8.0;
        if !(self.magnitude.is_finite() && self.magnitude >= 0.0 && self.magnitude <= limit) {
            return Err(Error::invalid(format!(
                "deformation magnitude must lie in [0, {limit}] for dims {dims:?}, got {}",
                self.magnitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    pub tissues: Tissues,
    pub structures: StructureSpec,
    pub deformation: DeformationSpec,
    /// Noise standard deviation as a fraction of each contrast's range.
    pub noise_sigma: f64,
    /// Inversion times (ms), one contrast each.
    pub inversion_times: Vec<f64>,
    /// Sub-samples per axis averaged into each voxel's intensity. 1 renders
    /// every voxel with its tissue's exact signal; larger values model
    /// partial-volume mixing at tissue boundaries.
    pub partial_volume: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [64; 3],
            seed: 0,
            tissues: Tissues::default(),
            structures: StructureSpec::default(),
            deformation: DeformationSpec::default(),
            noise_sigma: 0.02,
            inversion_times: vec![WMN_TI_MS, CSFN_TI_MS],
            partial_volume: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::invalid(format!(
                "phantom dims must be at least 16 per axis, got {:?}",
                self.dims
            )));
        }
        let mut t1s = Vec::new();
        for (label, t) in self.tissues.by_label() {
            if !(t.m0.is_finite() && t.m0 > 0.0 && t.t1.is_finite() && t.t1 > 0.0) {
                return Err(Error::invalid(format!(
                    "tissue {label}: m0 and t1 must be positive"
                )));
            }
            if t1s.contains(&t.t1) {
                return Err(Error::invalid("tissue t1 values must be distinct"));
            }
            t1s.push(t.t1);
        }
        let s = &self.structures;
        if !(s.radius_min > 0.0 && s.radius_min <= s.radius_max && s.radius_max < 0.5) {
            return Err(Error::invalid(
                "structure radii must satisfy 0 < radius_min <= radius_max < 0.5",
            ));
        }
        self.deformation.validate(self.dims)?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if !(1..=8).contains(&self.partial_volume) {
            return Err(Error::invalid("partial_volume must be between 1 and 8"));
        }
        if self.inversion_times.is_empty() {
            return Err(Error::invalid("at least one inversion time is required"));
        }
        let mut names: Vec<String> = self
            .inversion_times
            .iter()
            .map(|&t| contrast_name(t))
            .collect();
        names.sort();
        names.dedup();
        if names.len() != self.inversion_times.len() {
            return Err(Error::invalid("inversion times must be distinct"));
        }
        for &ti in &self.inversion_times {
            if !(ti.is_finite() && ti > 0.0) {
                return Err(Error::invalid("inversion times must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub tissue_map: LabelMap,
    pub contrasts: BTreeMap<String, Volume>,
    /// Displacement that produced this subject from its source anatomy:
    /// `subject(x) = source(x + u(x))`.
    pub true_displacement: Option<DisplacementField>,
    pub true_velocity: Option<VelocityField>,
    pub mask: Vec<bool>,
}

impl PhantomSubject {
    pub fn geometry(&self) -> &Geometry {
        self.tissue_map.geometry()
    }

    pub fn contrast(&self, name: &str) -> Result<&Volume> {
        self.contrasts
            .get(name)
            .ok_or_else(|| Error::invalid(format!("phantom has no contrast named {name:?}")))
    }

    /// Displacement mapping this subject back onto its source anatomy, i.e.
    /// the transform a registration of this subject (moving) to the source
    /// (fixed) should recover.
    pub fn inverse_truth(&self) -> Result<Option<DisplacementField>> {
        match &self.true_velocity {
            None => Ok(None),
            Some(v) => Ok(Some(exponentiate_auto(&v.negated(), DEFAULT_EXP_STEPS)?.0)),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [f64; 3]) -> bool {
        self.level(p) <= 1.0
    }

    fn level(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2))
            .sum()
    }

    /// Whether `inner` lies entirely within this ellipsoid (checked on a
    /// dense sampling of the inner surface).
    fn contains_all(&self, inner: &Ellipsoid) -> bool {
        const STEPS: usize = 16;
        (0..=STEPS).all(|i| {
            let theta = std::f64::consts::PI * i as f64 / STEPS as f64;
            (0..2 * STEPS).all(|j| {
                let phi = std::f64::consts::PI * j as f64 / STEPS as f64;
                let dir = [
                    theta.sin() * phi.cos(),
                    theta.sin() * phi.sin(),
                    theta.cos(),
                ];
                self.contains(std::array::from_fn(|a| {
                    inner.center[a] + inner.radii[a] * dir[a]
                }))
            })
        })
    }

    fn grown(&self, by: f64) -> Ellipsoid {
        Ellipsoid {
            center: self.center,
            radii: self.radii.map(|r| r + by),
        }
    }

    fn bounds(&self, dims: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let lo = (self.center[a] - self.radii[a]).floor().max(0.0) as usize;
            let hi = ((self.center[a] + self.radii[a]).ceil() as usize).min(dims[a] - 1);
            (lo, hi)
        })
    }
}

fn paint(labels: &mut [u32], geometry: &Geometry, e: &Ellipsoid, label: u32) {
    for_each_voxel(geometry, e, |i| labels[i] = label);
}

fn mark(occupied: &mut [bool], geometry: &Geometry, e: &Ellipsoid) {
    for_each_voxel(geometry, e, |i| occupied[i] = true);
}

fn overlaps(occupied: &[bool], geometry: &Geometry, e: &Ellipsoid) -> bool {
    let mut hit = false;
    for_each_voxel(geometry, e, |i| hit |= occupied[i]);
    hit
}

fn for_each_voxel(geometry: &Geometry, e: &Ellipsoid, mut f: impl FnMut(usize)) {
    let [(x0, x1), (y0, y1), (z0, z1)] = e.bounds(geometry.dims);
    for z in z0..=z1 {
        for y in y0..=y1 {
            for x in x0..=x1 {
                if e.contains([x as f64, y as f64, z as f64]) {
                    f(geometry.index(x, y, z));
                }
            }
        }
    }
}

fn anatomy(spec: &PhantomSpec) -> Result<Anatomy> {
    let geometry = Geometry::unit(spec.dims);
    let n = spec.dims.map(|d| d as f64);
    let c = n.map(|d| (d - 1.0) / 2.0);
    let at = |f: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| c[a] + f[a] * n[a]) };
    let size = |f: [f64; 3]| -> [f64; 3] { std::array::from_fn(|a| f[a] * n[a]) };
    let mut labels = vec![BACKGROUND; geometry.len()];
    let mut paints = Vec::new();
    let mut paint = |labels: &mut [u32], e: &Ellipsoid, label: u32| {
        paint(labels, &geometry, e, label);
        paints.push((*e, label));
    };

    let head = Ellipsoid {
        center: c,
        radii: size([0.38, 0.42, 0.36]),
    };
    let brain = Ellipsoid {
        center: c,
        radii: size([0.35, 0.39, 0.33]),
    };
    let white = Ellipsoid {
        center: c,
        radii: size([0.26, 0.30, 0.24]),
    };
    paint(&mut labels, &head, CSF);
    paint(&mut labels, &brain, GRAY);
    paint(&mut labels, &white, WHITE);
    let mut fixed_structures = Vec::new();
    for side in [-1.0, 1.0] {
        let thalamus = Ellipsoid {
            center: at([0.09 * side, -0.06, -0.04]),
            radii: size([0.07, 0.08, 0.07]),
        };
        paint(&mut labels, &thalamus, THALAMUS);
        let ventricle = Ellipsoid {
            center: at([0.08 * side, 0.08, 0.06]),
            radii: size([0.05, 0.12, 0.06]),
        };
        paint(&mut labels, &ventricle, CSF);
        fixed_structures.push(thalamus.grown(0.75));
        fixed_structures.push(ventricle.grown(0.75));
    }

    // Structures may straddle tissue boundaries (which breaks up the long
    // featureless surfaces) but never overlap each other or leave the head.
    let mut occupied = vec![false; geometry.len()];
    for e in &fixed_structures {
        mark(&mut occupied, &geometry, e);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(STREAM_ANATOMY);
    let smallest = n.iter().copied().fold(f64::INFINITY, f64::min);
    let kinds = [GRAY, WHITE, THALAMUS, CSF];
    for k in 0..spec.structures.count {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let radii: [f64; 3] = std::array::from_fn(|_| {
                smallest * rng.random_range(spec.structures.radius_min..=spec.structures.radius_max)
            });
            let center: [f64; 3] =
                std::array::from_fn(|a| c[a] + brain.radii[a] * rng.random_range(-1.0..=1.0));
            let e = Ellipsoid { center, radii };
            let grown = e.grown(0.75);
            if head.grown(-1.0).contains_all(&grown) && !overlaps(&occupied, &geometry, &grown) {
                let [x, y, z] = center.map(|v| v.round() as usize);
                let host = labels[geometry.index(x, y, z)];
                let label = (0..kinds.len())
                    .map(|j| kinds[(k + j) % kinds.len()])
                    .find(|&l| l != host)
                    .expect("several tissue kinds");
                paint(&mut labels, &e, label);
                mark(&mut occupied, &geometry, &grown);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure(format!(
                "could not place structure {} of {} after {MAX_PLACEMENT_TRIES} attempts",
                k + 1,
                spec.structures.count
            )));
        }
    }
    Ok(Anatomy {
        tissue_map: LabelMap::new(geometry, labels)?,
        paints,
    })
}

/// The rendered label map plus the ordered ellipsoid paints that produced it,
/// so labels can be re-evaluated at sub-voxel positions.
struct Anatomy {
    tissue_map: LabelMap,
    paints: Vec<(Ellipsoid, u32)>,
}

impl Anatomy {
    fn label_at(&self, p: [f64; 3]) -> u32 {
        self.paints
            .iter()
            .rev()
            .find(|(e, _)| e.contains(p))
            .map_or(BACKGROUND, |&(_, l)| l)
    }

    /// Per-voxel tissue fractions: `None` for voxels whose whole 26-neighbourhood
    /// shares their label (pure), otherwise the label counts over an s³ grid.
    fn mixtures(&self, s: usize) -> Vec<Option<[u32; 5]>> {
        let g = self.tissue_map.geometry();
        let labels = self.tissue_map.labels();
        par::map(g.len(), |i| {
            if s == 1 {
                return None;
            }
            let c = g.coords(i);
            let mut boundary = false;
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let q = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if q.iter()
                            .zip(g.dims)
                            .all(|(&a, d)| a >= 0 && (a as usize) < d)
                            && labels[g.index(q[0] as usize, q[1] as usize, q[2] as usize)]
                                != labels[i]
                        {
                            boundary = true;
                        }
                    }
                }
            }
            if !boundary {
                return None;
            }
            let mut counts = [0u32; 5];
            let offset = |k: usize| (k as f64 + 0.5) / s as f64 - 0.5;
            for kz in 0..s {
                for ky in 0..s {
                    for kx in 0..s {
                        let p = [
                            c[0] as f64 + offset(kx),
                            c[1] as f64 + offset(ky),
                            c[2] as f64 + offset(kz),
                        ];
                        counts[self.label_at(p) as usize] += 1;
                    }
                }
            }
            Some(counts)
        })
    }
}

fn noiseless_contrast(
    tissue_map: &LabelMap,
    mixtures: &[Option<[u32; 5]>],
    tissues: &Tissues,
    ti: f64,
) -> Result<Volume> {
    let mut table = [0.0; 5];
    for (label, t) in tissues.by_label() {
        table[label as usize] = ir_signal(&IrSignalParams::new(t.m0, t.t1, ti)?)?;
    }
    let data = tissue_map
        .labels()
        .iter()
        .zip(mixtures)
        .map(|(&l, mix)| match mix {
            None => table[l as usize],
            Some(counts) => {
                let total: u32 = counts.iter().sum();
                counts
                    .iter()
                    .zip(table)
                    .map(|(&n, v)| n as f64 * v)
                    .sum::<f64>()
                    / total as f64
            }
        })
        .collect();
    Volume::new(*tissue_map.geometry(), data)
}

/// Builds the undeformed subject described by `spec`.
pub fn generate(spec: &PhantomSpec) -> Result<PhantomSubject> {
    spec.validate()?;
    let anatomy = anatomy(spec)?;
    let mixtures = anatomy.mixtures(spec.partial_volume);
    let tissue_map = anatomy.tissue_map;
    let mask = tissue_map.foreground();
    let mut contrasts = BTreeMap::new();
    for &ti in &spec.inversion_times {
        let v = noiseless_contrast(&tissue_map, &mixtures, &spec.tissues, ti)?
            .with_mask(mask.clone())?;
        contrasts.insert(contrast_name(ti), v);
    }
    let subject = PhantomSubject {
        tissue_map,
        contrasts,
        true_displacement: None,
        true_velocity: None,
        mask,
    };
    add_noise(&subject, spec.noise_sigma, spec.seed)
}

/// Adds seeded Gaussian noise with standard deviation `sigma` times each
/// contrast's intensity range. Contrasts draw from independent streams.
pub fn add_noise(subject: &PhantomSubject, sigma: f64, seed: u64) -> Result<PhantomSubject> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid("noise sigma must be non-negative"));
    }
    let mut out = subject.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    for (k, v) in out.contrasts.values_mut().enumerate() {
        let (lo, hi) = v.min_max();
        let s = sigma * (hi - lo);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(STREAM_NOISE + 16 * k as u64);
        let data: Vec<f64> = v
            .data()
            .iter()
            .map(|&x| {
                let z: f64 = StandardNormal.sample(&mut rng);
                x + s * z
            })
            .collect();
        let mask = v.mask().map(<[bool]>::to_vec);
        let mut noisy = Volume::new(*v.geometry(), data)?;
        if let Some(m) = mask {
            noisy = noisy.with_mask(m)?;
        }
        *v = noisy;
    }
    Ok(out)
}

/// Seeded smooth velocity field whose exponential has maximum displacement
/// `deformation.magnitude`, tapered to zero towards the grid border.
pub fn random_velocity(
    geometry: &Geometry,
    deformation: &DeformationSpec,
    seed: u64,
) -> Result<VelocityField> {
    deformation.validate(geometry.dims)?;
    if deformation.magnitude == 0.0 {
        return Ok(VelocityField::zeros(*geometry));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_VELOCITY);
    let mut flat: Vec<f64> = (0..3 * geometry.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    gaussian_smooth(&mut flat, geometry.dims, 3, deformation.smoothness);

    let dims = geometry.dims;
    let taper = |i: usize| -> f64 {
        let c = geometry.coords(i);
        (0..3)
            .map(|a| {
                let margin = (dims[a] as f64 / 8.0).max(1.0);
                let edge = (c[a].min(dims[a] - 1 - c[a])) as f64 / margin;
                let t = edge.min(1.0);
                t * t * (3.0 - 2.0 * t)
            })
            .product()
    };
    let vectors: Vec<[f64; 3]> = (0..geometry.len())
        .map(|i| {
            let w = taper(i);
            [flat[3 * i] * w, flat[3 * i + 1] * w, flat[3 * i + 2] * w]
        })
        .collect();
    let mut field = VectorField::new(*geometry, vectors)?;
    let peak = field.max_norm();
    if peak == 0.0 {
        return Ok(VelocityField::zeros(*geometry));
    }
    field = field.scaled(deformation.magnitude / peak);
    // the exponential stretches the field slightly; rescale onto the target
    for _ in 0..3 {
        let v = VelocityField::new(field.clone());
        let (u, _) = exponentiate_auto(&v, DEFAULT_EXP_STEPS)?;
        field = field.scaled(deformation.magnitude / u.max_norm());
    }
    Ok(VelocityField::new(field))
}

/// Warps a subject by a seeded random diffeomorphism. Contrasts are resampled
/// trilinearly, labels by nearest neighbour, and the truth fields record the
/// transform relative to `subject`.
pub fn deform_subject(
    subject: &PhantomSubject,
    deformation: &DeformationSpec,
    seed: u64,
) -> Result<PhantomSubject> {
    let geometry = *subject.geometry();
    let velocity = random_velocity(&geometry, deformation, seed)?;
    if deformation.magnitude == 0.0 {
        let mut out = subject.clone();
        out.true_displacement = Some(DisplacementField::zeros(geometry));
        out.true_velocity = Some(velocity);
        return Ok(out);
    }
    let (u, _) = exponentiate_auto(&velocity, DEFAULT_EXP_STEPS)?;
    let tissue_map = warp_labels(&subject.tissue_map, &u)?;
    let mask = tissue_map.foreground();
    let contrasts = subject
        .contrasts
        .iter()
        .map(|(name, v)| {
            let w = warp(&v.clone().without_mask(), &u)?.with_mask(mask.clone())?;
            Ok((name.clone(), w))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    Ok(PhantomSubject {
        tissue_map,
        contrasts,
        true_displacement: Some(u),
        true_velocity: Some(velocity),
        mask,
    })
}

/// `n` deformed copies of one anatomy. Each member is deformed from the
/// noiseless source and then receives its own acquisition noise, so members
/// share anatomy but not noise, neither with each other nor with
/// `generate(spec)`.
pub fn generate_cohort(spec: &PhantomSpec, n: usize) -> Result<Vec<PhantomSubject>> {
    if n == 0 {
        return Err(Error::invalid("cohort size must be at least 1"));
    }
    let clean = PhantomSpec {
        noise_sigma: 0.0,
        ..spec.clone()
    };
    let base = generate(&clean)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed.wrapping_add(i as u64);
            let s = deform_subject(&base, &spec.deformation, seed)?;
            // offset so no member reuses the noise of `generate(spec)`
            add_noise(&s, spec.noise_sigma, seed.wrapping_add(1))
        })
        .collect()
}
