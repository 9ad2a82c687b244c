//! Contrast transfer, multi-atlas fusion and inversion-recovery contrasts.
//!
//! An atlas is registered once on its primary contrast; the resulting
//! displacement is then applied unchanged to any paired contrast.

mod ir;

pub use ir::{
    estimate_ir_params, estimate_ir_params_with, ir_signal, null_point, IrFit, IrSignalParams,
    SignHypothesis, CSFN_TI_MS, WMN_TI_MS,
};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Volume};
use crate::metrics::hard_dice;
use crate::par;
use crate::phantom::PhantomSubject;
use crate::registration::{register_batch, Mode, RegistrationConfig, RegistrationResult, Scan};
use crate::sampler::{warp, warp_labels};

/// A subject with paired contrasts on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AtlasSubject {
    pub id: String,
    pub primary_name: String,
    pub primary: Volume,
    pub secondary: BTreeMap<String, Volume>,
    pub labels: Option<LabelMap>,
}

impl AtlasSubject {
    pub fn new(
        id: impl Into<String>,
        primary_name: impl Into<String>,
        primary: Volume,
        secondary: BTreeMap<String, Volume>,
        labels: Option<LabelMap>,
    ) -> Result<Self> {
        let primary_name = primary_name.into();
        for (name, v) in &secondary {
            if *name == primary_name {
                return Err(Error::invalid(format!("contrast name {name:?} used twice")));
            }
            primary.geometry().check_same_dims(v.geometry(), name)?;
        }
        if let Some(l) = &labels {
            primary.geometry().check_same_dims(l.geometry(), "labels")?;
        }
        Ok(Self {
            id: id.into(),
            primary_name,
            primary,
            secondary,
            labels,
        })
    }

    /// Splits a phantom into the named primary contrast and the rest.
    pub fn from_phantom(
        id: impl Into<String>,
        subject: &PhantomSubject,
        primary: &str,
    ) -> Result<Self> {
        let mut secondary = subject.contrasts.clone();
        let primary_volume = secondary
            .remove(primary)
            .ok_or_else(|| Error::invalid(format!("phantom has no contrast named {primary:?}")))?;
        Self::new(
            id,
            primary,
            primary_volume,
            secondary,
            Some(subject.tissue_map.clone()),
        )
    }

    /// Looks up a contrast by name, the primary included.
    pub fn contrast(&self, name: &str) -> Result<&Volume> {
        if name == self.primary_name {
            return Ok(&self.primary);
        }
        self.secondary.get(name).ok_or_else(|| {
            Error::invalid(format!(
                "atlas {:?} has no contrast named {name:?}",
                self.id
            ))
        })
    }

    pub fn scan(&self) -> Scan<'_> {
        Scan::new(&self.primary, self.labels.as_ref())
    }
}

/// Applies an estimated transform to another contrast of the same atlas.
pub fn transfer(
    result: &RegistrationResult,
    atlas: &AtlasSubject,
    contrast: &str,
) -> Result<Volume> {
    let v = atlas.contrast(contrast)?;
    warp(v, &result.displacement)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMethod {
    Mean,
    Median,
    WeightedMean,
}

impl std::str::FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "median" => Ok(Self::Median),
            "weighted_mean" | "weighted-mean" => Ok(Self::WeightedMean),
            _ => Err(Error::invalid(format!(
                "unknown fusion method {s:?} (expected mean, median or weighted_mean)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub synthetic: Volume,
    pub method: FusionMethod,
    /// Per-atlas weights in `atlas_ids` order, summing to one.
    pub weights: Vec<f64>,
    pub atlas_ids: Vec<String>,
}

/// Voxel-wise fusion of co-registered volumes.
///
/// Sums run in ascending atlas-id order, so permuting the inputs permutes
/// `weights` but leaves the synthetic volume bit-identical.
pub fn fuse(
    volumes: &[Volume],
    atlas_ids: &[String],
    method: FusionMethod,
    weights: Option<&[f64]>,
) -> Result<FusionResult> {
    let n = volumes.len();
    if n == 0 {
        return Err(Error::invalid("fusion needs at least one volume"));
    }
    if atlas_ids.len() != n {
        return Err(Error::invalid(format!(
            "{} atlas ids for {n} volumes",
            atlas_ids.len()
        )));
    }
    for v in &volumes[1..] {
        volumes[0]
            .geometry()
            .check_same_dims(v.geometry(), "fusion")?;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| atlas_ids[a].cmp(&atlas_ids[b]).then(a.cmp(&b)));

    let uniform = vec![1.0 / n as f64; n];
    let (method_used, weights) = match method {
        FusionMethod::Mean | FusionMethod::Median => (method, uniform),
        FusionMethod::WeightedMean => {
            let w = weights.ok_or_else(|| Error::invalid("weighted_mean requires weights"))?;
            let w = normalize_weights(w, n)?;
            if w.iter().all(|&x| x == w[0]) {
                (FusionMethod::Mean, uniform)
            } else {
                (FusionMethod::WeightedMean, w)
            }
        }
    };

    let len = volumes[0].data().len();
    let data = par::map(len, |i| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in volumes {
            lo = lo.min(v.data()[i]);
            hi = hi.max(v.data()[i]);
        }
        let value = match method_used {
            FusionMethod::Mean => {
                let mut s = 0.0;
                for &k in &order {
                    s += volumes[k].data()[i];
                }
                s / n as f64
            }
            FusionMethod::WeightedMean => {
                let mut s = 0.0;
                for &k in &order {
                    s += weights[k] * volumes[k].data()[i];
                }
                s
            }
            FusionMethod::Median => {
                let mut vals: Vec<f64> = volumes.iter().map(|v| v.data()[i]).collect();
                vals.sort_by(f64::total_cmp);
                vals[(n - 1) / 2]
            }
        };
        // rounding must not leave the input range
        value.clamp(lo, hi)
    });
    Ok(FusionResult {
        synthetic: Volume::new(*volumes[0].geometry(), data)?,
        method,
        weights,
        atlas_ids: atlas_ids.to_vec(),
    })
}

fn normalize_weights(w: &[f64], n: usize) -> Result<Vec<f64>> {
    if w.len() != n {
        return Err(Error::invalid(format!(
            "{} weights for {n} volumes",
            w.len()
        )));
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::invalid(
            "fusion weights must be finite and non-negative",
        ));
    }
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("fusion weights sum to zero"));
    }
    Ok(w.iter().map(|x| x / total).collect())
}

/// Atlas weights proportional to the mean per-label Dice between each warped
/// segmentation and the fixed one. Falls back to uniform when every atlas
/// scores zero.
pub fn label_similarity_weights(warped: &[LabelMap], fixed: &LabelMap) -> Result<Vec<f64>> {
    if warped.is_empty() {
        return Err(Error::invalid("no label maps to compare"));
    }
    let scores = warped
        .iter()
        .map(|l| {
            let d = hard_dice(l, fixed)?;
            Ok(if d.is_empty() {
                0.0
            } else {
                d.values().sum::<f64>() / d.len() as f64
            })
        })
        .collect::<Result<Vec<f64>>>()?;
    let total: f64 = scores.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / warped.len() as f64; warped.len()]);
    }
    Ok(scores.iter().map(|s| s / total).collect())
}

/// One atlas after registration, with the requested contrasts warped.
#[derive(Debug, Clone)]
pub struct WarpedAtlas {
    pub atlas_id: String,
    pub registration: RegistrationResult,
    pub contrasts: BTreeMap<String, Volume>,
    pub labels: Option<LabelMap>,
}

/// Registers each atlas to `fixed` once and transfers every requested
/// contrast with that single transform.
pub fn warp_atlases(
    fixed: &AtlasSubject,
    atlases: &[AtlasSubject],
    contrasts: &[String],
    config: &RegistrationConfig,
) -> Result<Vec<WarpedAtlas>> {
    if atlases.is_empty() {
        return Err(Error::invalid("synthesis needs at least one atlas"));
    }
    if contrasts.is_empty() {
        return Err(Error::invalid("no contrast names requested"));
    }
    if config.mode == Mode::Supervised {
        return Err(Error::invalid(
            "synthesis registers without the target contrast; use unsupervised mode",
        ));
    }
    let mut ids: Vec<&str> = atlases.iter().map(|a| a.id.as_str()).collect();
    ids.sort_unstable();
    if ids.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::invalid("atlas ids must be unique"));
    }
    for a in atlases {
        fixed
            .primary
            .geometry()
            .check_same_dims(a.primary.geometry(), &a.id)?;
        for name in contrasts {
            a.contrast(name)?;
        }
    }
    let scans: Vec<Scan> = atlases.iter().map(AtlasSubject::scan).collect();
    let results = register_batch(&fixed.scan(), &scans, None, config)?;
    atlases
        .par_iter()
        .zip(results)
        .map(|(atlas, registration)| {
            let warped = contrasts
                .iter()
                .map(|name| Ok((name.clone(), transfer(&registration, atlas, name)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            let labels = match &atlas.labels {
                Some(l) => Some(warp_labels(l, &registration.displacement)?),
                None => None,
            };
            Ok(WarpedAtlas {
                atlas_id: atlas.id.clone(),
                registration,
                contrasts: warped,
                labels,
            })
        })
        .collect()
}

/// Fuses one contrast across already-warped atlases.
pub fn fuse_warped(
    warped: &[WarpedAtlas],
    contrast: &str,
    method: FusionMethod,
    fixed_labels: Option<&LabelMap>,
) -> Result<FusionResult> {
    let volumes = warped
        .iter()
        .map(|w| {
            w.contrasts.get(contrast).cloned().ok_or_else(|| {
                Error::invalid(format!("atlas {:?} has no warped {contrast:?}", w.atlas_id))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<String> = warped.iter().map(|w| w.atlas_id.clone()).collect();
    let weights = match method {
        FusionMethod::WeightedMean => {
            let fixed = fixed_labels
                .ok_or_else(|| Error::invalid("weighted_mean fusion needs fixed labels"))?;
            let maps = warped
                .iter()
                .map(|w| {
                    w.labels.clone().ok_or_else(|| {
                        Error::invalid(format!("atlas {:?} has no labels", w.atlas_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Some(label_similarity_weights(&maps, fixed)?)
        }
        _ => None,
    };
    fuse(&volumes, &ids, method, weights.as_deref())
}

/// Fused synthetic contrasts plus the registrations they share.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub fused: BTreeMap<String, FusionResult>,
    pub atlases: Vec<WarpedAtlas>,
}

/// Synthesizes each requested contrast for `fixed` from the atlases, with
/// one registration per atlas.
pub fn synthesize(
    fixed: &AtlasSubject,
    atlases: &[AtlasSubject],
    contrasts: &[String],
    method: FusionMethod,
    config: &RegistrationConfig,
) -> Result<Synthesis> {
    let warped = warp_atlases(fixed, atlases, contrasts, config)?;
    let mut fused = BTreeMap::new();
    for name in contrasts {
        let mut r = fuse_warped(&warped, name, method, fixed.labels.as_ref())?;
        if let Some(m) = fixed.primary.mask() {
            r.synthetic = r.synthetic.with_mask(m.to_vec())?;
        }
        fused.insert(name.clone(), r);
    }
    Ok(Synthesis {
        fused,
        atlases: warped,
    })
}
