//! Foreground-masked image quality and overlap metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_kernel, norm, LabelMap, Volume};
use crate::par;
use crate::transform::DisplacementField;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimOptions {
    /// Window edge length in voxels (odd).
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Overrides the reference intensity range used for the stabilizers.
    pub dynamic_range: Option<f64>,
}

impl Default for SsimOptions {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: None,
        }
    }
}

impl SsimOptions {
    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.window.is_multiple_of(2) {
            return Err(Error::invalid("SSIM window must be odd"));
        }
        if !(self.sigma > 0.0 && self.k1 > 0.0 && self.k2 > 0.0) {
            return Err(Error::invalid("SSIM sigma and constants must be positive"));
        }
        if let Some(l) = self.dynamic_range {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::invalid("SSIM dynamic range must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// dB; `f64::INFINITY` when the masked error is zero.
    pub psnr: f64,
    pub ssim: f64,
    pub dice_per_label: BTreeMap<u32, f64>,
    pub mask_voxels: usize,
}

fn check_pair(reference: &Volume, test: &Volume, mask: &[bool]) -> Result<usize> {
    reference
        .geometry()
        .check_same_dims(test.geometry(), "metric")?;
    if mask.len() != reference.data().len() {
        return Err(Error::invalid("mask dims do not match volume"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::invalid("metric mask is empty"));
    }
    Ok(count)
}

fn masked_range(v: &Volume, mask: &[bool]) -> (f64, f64) {
    v.data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| {
            (lo.min(x), hi.max(x))
        })
}

/// Peak signal-to-noise ratio over `mask`, with the peak taken from the
/// reference inside the mask.
pub fn psnr(reference: &Volume, test: &Volume, mask: &[bool]) -> Result<f64> {
    let count = check_pair(reference, test, mask)?;
    let (_, peak) = masked_range(reference, mask);
    if peak <= 0.0 {
        return Err(Error::degenerate(
            "reference has no positive intensity inside the mask",
        ));
    }
    let (r, t) = (reference.data(), test.data());
    let sse = par::sum(
        r.len(),
        |i| if mask[i] { (r[i] - t[i]).powi(2) } else { 0.0 },
    );
    let mse = sse / count as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Local SSIM at every voxel whose full window fits inside the grid. Entries
/// for other voxels are `None`.
pub fn ssim_map(
    reference: &Volume,
    test: &Volume,
    dynamic_range: f64,
    options: &SsimOptions,
) -> Result<Vec<Option<f64>>> {
    options.validate()?;
    reference
        .geometry()
        .check_same_dims(test.geometry(), "ssim")?;
    let dims = reference.dims();
    let r = options.window / 2;
    let kernel = gaussian_kernel(options.sigma, r);
    let c1 = (options.k1 * dynamic_range).powi(2);
    let c2 = (options.k2 * dynamic_range).powi(2);
    let n = reference.data().len();
    let mut out = vec![None; n];
    if dims.iter().any(|&d| d < options.window) {
        return Ok(out);
    }

    // five local moments, filtered separably in valid mode
    let (x, y) = (reference.data(), test.data());
    let mut cur: Vec<[f64; 5]> = (0..n)
        .map(|i| [x[i], y[i], x[i] * x[i], y[i] * y[i], x[i] * y[i]])
        .collect();
    let mut cur_dims = dims;
    for axis in 0..3 {
        let mut next_dims = cur_dims;
        next_dims[axis] = cur_dims[axis] - 2 * r;
        let strides = [1, cur_dims[0], cur_dims[0] * cur_dims[1]];
        let total = next_dims[0] * next_dims[1] * next_dims[2];
        let src = &cur;
        let k = &kernel;
        cur = par::map(total, |o| {
            let c = [
                o % next_dims[0],
                (o / next_dims[0]) % next_dims[1],
                o / (next_dims[0] * next_dims[1]),
            ];
            let base = c[0] * strides[0] + c[1] * strides[1] + c[2] * strides[2];
            let mut acc = [0.0; 5];
            for (j, w) in k.iter().enumerate() {
                let s = src[base + j * strides[axis]];
                for m in 0..5 {
                    acc[m] += w * s[m];
                }
            }
            acc
        });
        cur_dims = next_dims;
    }

    for (o, m) in cur.iter().enumerate() {
        let cx = o % cur_dims[0] + r;
        let cy = (o / cur_dims[0]) % cur_dims[1] + r;
        let cz = o / (cur_dims[0] * cur_dims[1]) + r;
        let [mx, my, exx, eyy, exy] = *m;
        let sxx = exx - mx * mx;
        let syy = eyy - my * my;
        let sxy = exy - mx * my;
        let num = (2.0 * mx * my + c1) * (2.0 * sxy + c2);
        let den = (mx * mx + my * my + c1) * (sxx + syy + c2);
        out[reference.geometry().index(cx, cy, cz)] = Some(num / den);
    }
    Ok(out)
}

/// Mean local SSIM over the masked voxels that are valid window centres.
pub fn ssim(
    reference: &Volume,
    test: &Volume,
    mask: &[bool],
    options: &SsimOptions,
) -> Result<f64> {
    check_pair(reference, test, mask)?;
    let range = match options.dynamic_range {
        Some(l) => l,
        None => {
            let (lo, hi) = masked_range(reference, mask);
            hi - lo
        }
    };
    if !(range > 0.0) {
        return Err(Error::degenerate(
            "reference intensity range inside the mask is zero",
        ));
    }
    let map = ssim_map(reference, test, range, options)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (v, &m) in map.iter().zip(mask) {
        if let (Some(s), true) = (v, m) {
            sum += s;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid(format!(
            "mask contains no voxel whose {}^3 SSIM window fits inside the grid",
            options.window
        )));
    }
    Ok(sum / count as f64)
}

/// Per-label Dice overlap for every non-background label present in either map.
pub fn hard_dice(a: &LabelMap, b: &LabelMap) -> Result<BTreeMap<u32, f64>> {
    a.geometry().check_same_dims(b.geometry(), "dice")?;
    // label -> (|A|, |B|, |A and B|)
    let mut counts: BTreeMap<u32, [usize; 3]> = BTreeMap::new();
    for (&la, &lb) in a.labels().iter().zip(b.labels()) {
        if la != 0 {
            counts.entry(la).or_default()[0] += 1;
        }
        if lb != 0 {
            counts.entry(lb).or_default()[1] += 1;
        }
        if la != 0 && la == lb {
            counts.entry(la).or_default()[2] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|(l, [na, nb, both])| (l, 2.0 * both as f64 / (na + nb) as f64))
        .collect())
}

/// Mean Euclidean distance (voxels) between two displacement fields over
/// `mask`.
pub fn endpoint_error(a: &DisplacementField, b: &DisplacementField, mask: &[bool]) -> Result<f64> {
    a.geometry()
        .check_same_dims(b.geometry(), "endpoint error")?;
    if mask.len() != a.vectors().len() {
        return Err(Error::invalid(
            "mask length does not match the displacement grid",
        ));
    }
    let (sum, count) = a
        .vectors()
        .iter()
        .zip(b.vectors())
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), ((p, q), _)| {
            (s + norm([p[0] - q[0], p[1] - q[1], p[2] - q[2]]), c + 1)
        });
    if count == 0 {
        return Err(Error::degenerate("endpoint error over an empty mask"));
    }
    Ok(sum / count as f64)
}

/// Voxels brighter than 1% of the reference maximum, dilated by one voxel
/// (26-neighbourhood).
pub fn default_mask(reference: &Volume) -> Vec<bool> {
    let (_, hi) = reference.min_max();
    let threshold = 0.01 * hi;
    let seed: Vec<bool> = reference.data().iter().map(|&v| v > threshold).collect();
    dilate(&seed, reference.dims())
}

fn dilate(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let g = crate::grid::Geometry::unit(dims);
    par::map(mask.len(), |i| {
        let c = g.coords(i);
        let range = |a: usize| c[a].saturating_sub(1)..=(c[a] + 1).min(dims[a] - 1);
        for z in range(2) {
            for y in range(1) {
                for x in range(0) {
                    if mask[g.index(x, y, z)] {
                        return true;
                    }
                }
            }
        }
        false
    })
}

/// PSNR, SSIM and (optionally) Dice for one reference/test pair. The mask
/// defaults to the reference's own mask, then to [`default_mask`].
pub fn evaluate(
    reference: &Volume,
    test: &Volume,
    mask: Option<&[bool]>,
    labels: Option<(&LabelMap, &LabelMap)>,
    options: &SsimOptions,
) -> Result<MetricReport> {
    let fallback;
    let mask = match (mask, reference.mask()) {
        (Some(m), _) => m,
        (None, Some(m)) => m,
        (None, None) => {
            fallback = default_mask(reference);
            &fallback
        }
    };
    let mask_voxels = check_pair(reference, test, mask)?;
    let dice_per_label = match labels {
        Some((a, b)) => hard_dice(a, b)?,
        None => BTreeMap::new(),
    };
    Ok(MetricReport {
        psnr: psnr(reference, test, mask)?,
        ssim: ssim(reference, test, mask, options)?,
        dice_per_label,
        mask_voxels,
    })
}
