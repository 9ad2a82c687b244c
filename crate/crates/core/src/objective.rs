//! Registration energy: MSE, NCC and soft Dice dissimilarities plus a
//! diffusion regularizer on the velocity, with analytic gradients.
//!
//! Dissimilarity gradients are taken with respect to the displacement by
//! chaining through the sampler's [`WarpGradient`]. The regularizer gradient
//! is taken with respect to the velocity and added to the same array.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, VectorField, Volume};
use crate::par;
use crate::sampler::{SoftLabels, WarpGradient};
use crate::transform::VelocityField;

pub const DEFAULT_DICE_SMOOTH: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Ncc,
    Dice,
    Regularizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    PrimaryContrast,
    SecondaryContrast,
    Labels,
    Velocity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub kind: LossKind,
    pub weight: f64,
    pub target: LossTarget,
}

impl LossTerm {
    pub fn new(kind: LossKind, weight: f64, target: LossTarget) -> Self {
        Self {
            kind,
            weight,
            target,
        }
    }

    fn is_dissimilarity(&self) -> bool {
        self.kind != LossKind::Regularizer
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub terms: Vec<LossTerm>,
    #[serde(default = "default_dice_smooth")]
    pub dice_smooth: f64,
}

fn default_dice_smooth() -> f64 {
    DEFAULT_DICE_SMOOTH
}

/// Weight of the Dice term in the default configurations. Phantom MSE values
/// sit around 1e-4 while Dice losses sit around 0.05, so this puts the two
/// terms on a comparable footing.
pub const DEFAULT_DICE_WEIGHT: f64 = 0.002;

/// Weight of the diffusion regularizer in the default configurations.
pub const DEFAULT_REGULARIZER_WEIGHT: f64 = 0.002;

impl LossConfig {
    /// MSE on the primary contrast plus Dice on the labels, with the
    /// diffusion regularizer.
    pub fn unsupervised() -> Self {
        Self {
            terms: vec![
                LossTerm::new(LossKind::Mse, 1.0, LossTarget::PrimaryContrast),
                LossTerm::new(LossKind::Dice, DEFAULT_DICE_WEIGHT, LossTarget::Labels),
                LossTerm::new(
                    LossKind::Regularizer,
                    DEFAULT_REGULARIZER_WEIGHT,
                    LossTarget::Velocity,
                ),
            ],
            dice_smooth: DEFAULT_DICE_SMOOTH,
        }
    }

    /// [`LossConfig::unsupervised`] plus MSE on the secondary contrast.
    pub fn supervised(secondary_weight: f64) -> Self {
        let mut cfg = Self::unsupervised();
        cfg.terms.insert(
            1,
            LossTerm::new(
                LossKind::Mse,
                secondary_weight,
                LossTarget::SecondaryContrast,
            ),
        );
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth.is_finite() && self.dice_smooth > 0.0) {
            return Err(Error::invalid("dice_smooth must be positive"));
        }
        for t in &self.terms {
            if !(t.weight.is_finite() && t.weight >= 0.0) {
                return Err(Error::invalid(format!(
                    "loss weight must be finite and non-negative, got {}",
                    t.weight
                )));
            }
            let ok = match t.kind {
                LossKind::Mse | LossKind::Ncc => matches!(
                    t.target,
                    LossTarget::PrimaryContrast | LossTarget::SecondaryContrast
                ),
                LossKind::Dice => t.target == LossTarget::Labels,
                LossKind::Regularizer => t.target == LossTarget::Velocity,
            };
            if !ok {
                return Err(Error::invalid(format!(
                    "{:?} cannot be applied to {:?}",
                    t.kind, t.target
                )));
            }
        }
        if !self
            .terms
            .iter()
            .any(|t| t.is_dissimilarity() && t.weight > 0.0)
        {
            return Err(Error::invalid(
                "loss needs at least one dissimilarity term with positive weight",
            ));
        }
        Ok(())
    }

    pub fn uses(&self, target: LossTarget) -> bool {
        self.terms.iter().any(|t| t.target == target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermValue {
    pub kind: LossKind,
    pub target: LossTarget,
    pub weight: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub terms: Vec<TermValue>,
    pub total: f64,
    pub gradient: Vec<[f64; 3]>,
}

impl LossReport {
    pub fn value_of(&self, kind: LossKind, target: LossTarget) -> Option<f64> {
        self.terms
            .iter()
            .find(|t| t.kind == kind && t.target == target)
            .map(|t| t.value)
    }
}

/// A warped intensity channel with its warp gradient and the fixed image it
/// is compared to.
#[derive(Debug, Clone, Copy)]
pub struct Channel<'a> {
    pub warped: &'a Volume,
    pub gradient: &'a WarpGradient,
    pub fixed: &'a Volume,
}

#[derive(Debug, Clone, Copy)]
pub struct LabelChannel<'a> {
    pub warped: &'a SoftLabels,
    pub fixed: &'a LabelMap,
}

/// Everything a loss term may refer to.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossState<'a> {
    pub velocity: Option<&'a VelocityField>,
    pub primary: Option<Channel<'a>>,
    pub secondary: Option<Channel<'a>>,
    pub labels: Option<LabelChannel<'a>>,
}

fn check_pair(a: &Volume, b: &Volume) -> Result<()> {
    a.geometry().check_same_dims(b.geometry(), "intensity pair")
}

fn masked_count(n: usize, mask: Option<&[bool]>) -> Result<usize> {
    let count = match mask {
        Some(m) => {
            if m.len() != n {
                return Err(Error::invalid("mask dims do not match volume"));
            }
            m.iter().filter(|&&b| b).count()
        }
        None => n,
    };
    if count == 0 {
        return Err(Error::invalid("mask is empty"));
    }
    Ok(count)
}

#[inline]
fn keep(mask: Option<&[bool]>, i: usize) -> bool {
    mask.is_none_or(|m| m[i])
}

/// Mean squared difference over the masked voxels.
pub fn mse(a: &Volume, b: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    check_pair(a, b)?;
    let count = masked_count(a.data().len(), mask)?;
    let (x, y) = (a.data(), b.data());
    let s = par::sum(x.len(), |i| {
        if keep(mask, i) {
            let d = x[i] - y[i];
            d * d
        } else {
            0.0
        }
    });
    Ok(s / count as f64)
}

struct NccStats {
    rho: f64,
    mean_a: f64,
    mean_b: f64,
    sd_a: f64,
    sd_b: f64,
    count: usize,
}

fn ncc_stats(a: &Volume, b: &Volume, mask: Option<&[bool]>) -> Result<NccStats> {
    check_pair(a, b)?;
    let count = masked_count(a.data().len(), mask)?;
    if count < 2 {
        return Err(Error::invalid("ncc needs at least two voxels"));
    }
    let (x, y) = (a.data(), b.data());
    let n = count as f64;
    let [sa, sb] = par::sum_n(x.len(), |i| {
        if keep(mask, i) {
            [x[i], y[i]]
        } else {
            [0.0; 2]
        }
    });
    let (mean_a, mean_b) = (sa / n, sb / n);
    let [vaa, vbb, vab] = par::sum_n(x.len(), |i| {
        if keep(mask, i) {
            let da = x[i] - mean_a;
            let db = y[i] - mean_b;
            [da * da, db * db, da * db]
        } else {
            [0.0; 3]
        }
    });
    let (va, vb, cov) = (vaa / n, vbb / n, vab / n);
    let flat = |v: f64, m: f64| v <= 1e-24 * m * m || v == 0.0;
    if flat(va, mean_a) || flat(vb, mean_b) {
        return Err(Error::degenerate(
            "ncc undefined: an input is constant over the mask",
        ));
    }
    let (sd_a, sd_b) = (va.sqrt(), vb.sqrt());
    Ok(NccStats {
        rho: cov / (sd_a * sd_b),
        mean_a,
        mean_b,
        sd_a,
        sd_b,
        count,
    })
}

/// `1 - pearson(a, b)` over the masked voxels, in [0, 2].
pub fn ncc(a: &Volume, b: &Volume, mask: Option<&[bool]>) -> Result<f64> {
    let s = ncc_stats(a, b, mask)?;
    Ok((1.0 - s.rho).clamp(0.0, 2.0))
}

fn labels_for_dice(warped: &SoftLabels, fixed: &LabelMap) -> Result<Vec<u32>> {
    let set: BTreeSet<u32> = warped
        .labels
        .iter()
        .copied()
        .chain(fixed.foreground_labels())
        .filter(|&l| l != 0)
        .collect();
    if set.is_empty() {
        return Err(Error::invalid(
            "dice needs at least one non-background label",
        ));
    }
    Ok(set.into_iter().collect())
}

struct DiceParts {
    label: u32,
    inter: f64,
    sum_p: f64,
    sum_q: f64,
}

fn dice_parts(warped: &SoftLabels, fixed: &LabelMap) -> Result<Vec<DiceParts>> {
    let n = fixed.labels().len();
    if warped.masks.iter().any(|m| m.len() != n) {
        return Err(Error::invalid("soft label masks do not match fixed labels"));
    }
    let q = fixed.labels();
    labels_for_dice(warped, fixed)?
        .into_iter()
        .map(|label| {
            let (inter, sum_p, sum_q) = match warped.mask_of(label) {
                Some((p, _)) => {
                    let [a, b, c] = par::sum_n(n, |i| {
                        let qi = (q[i] == label) as u8 as f64;
                        [p[i] * qi, p[i], qi]
                    });
                    (a, b, c)
                }
                None => (0.0, 0.0, q.iter().filter(|&&l| l == label).count() as f64),
            };
            Ok(DiceParts {
                label,
                inter,
                sum_p,
                sum_q,
            })
        })
        .collect()
}

/// `1 - mean_l (2 sum(p q) + s) / (sum p + sum q + s)` over the non-background
/// labels present in either input.
pub fn soft_dice_loss(warped: &SoftLabels, fixed: &LabelMap, smooth: f64) -> Result<f64> {
    if !(smooth > 0.0) {
        return Err(Error::invalid("dice smoothing must be positive"));
    }
    let parts = dice_parts(warped, fixed)?;
    let mean = parts
        .iter()
        .map(|d| (2.0 * d.inter + smooth) / (d.sum_p + d.sum_q + smooth))
        .sum::<f64>()
        / parts.len() as f64;
    Ok(1.0 - mean)
}

/// Mean over voxels and vector components of the squared forward-difference
/// gradient. Differences leaving the grid count as zero.
pub fn smoothness(v: &VectorField) -> f64 {
    let g = v.geometry();
    let vec = v.vectors();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let s = par::sum(vec.len(), |i| {
        let c = g.coords(i);
        let mut acc = 0.0;
        for a in 0..3 {
            if c[a] + 1 < g.dims[a] {
                let j = i + strides[a];
                for k in 0..3 {
                    let d = vec[j][k] - vec[i][k];
                    acc += d * d;
                }
            }
        }
        acc
    });
    s / (3.0 * vec.len() as f64)
}

fn smoothness_gradient(v: &VectorField, weight: f64, out: &mut [[f64; 3]]) {
    let g = v.geometry();
    let vec = v.vectors();
    let strides = [1, g.dims[0], g.dims[0] * g.dims[1]];
    let scale = weight * 2.0 / (3.0 * vec.len() as f64);
    let grad = par::map(vec.len(), |i| {
        let c = g.coords(i);
        let mut d = [0.0; 3];
        for a in 0..3 {
            if c[a] > 0 {
                let j = i - strides[a];
                for k in 0..3 {
                    d[k] += vec[i][k] - vec[j][k];
                }
            }
            if c[a] + 1 < g.dims[a] {
                let j = i + strides[a];
                for k in 0..3 {
                    d[k] -= vec[j][k] - vec[i][k];
                }
            }
        }
        d.map(|x| x * scale)
    });
    for (o, d) in out.iter_mut().zip(grad) {
        for k in 0..3 {
            o[k] += d[k];
        }
    }
}

fn add_chain(out: &mut [[f64; 3]], d_warped: &[f64], wg: &WarpGradient) {
    for ((o, &dw), g) in out.iter_mut().zip(d_warped).zip(wg.as_slice()) {
        for k in 0..3 {
            o[k] += dw * g[k];
        }
    }
}

fn mse_term(ch: &Channel, weight: f64, grad: Option<&mut [[f64; 3]]>) -> Result<f64> {
    let value = mse(ch.warped, ch.fixed, None)?;
    if let Some(out) = grad {
        let (w, f) = (ch.warped.data(), ch.fixed.data());
        let scale = weight * 2.0 / w.len() as f64;
        let d: Vec<f64> = w.iter().zip(f).map(|(a, b)| scale * (a - b)).collect();
        add_chain(out, &d, ch.gradient);
    }
    Ok(value)
}

fn ncc_term(ch: &Channel, weight: f64, grad: Option<&mut [[f64; 3]]>) -> Result<f64> {
    let s = ncc_stats(ch.warped, ch.fixed, None)?;
    if let Some(out) = grad {
        let (w, f) = (ch.warped.data(), ch.fixed.data());
        let n = s.count as f64;
        let d: Vec<f64> = w
            .iter()
            .zip(f)
            .map(|(a, b)| {
                let drho = ((b - s.mean_b) / (s.sd_a * s.sd_b)
                    - s.rho * (a - s.mean_a) / (s.sd_a * s.sd_a))
                    / n;
                -weight * drho
            })
            .collect();
        add_chain(out, &d, ch.gradient);
    }
    Ok(1.0 - s.rho)
}

fn dice_term(
    ch: &LabelChannel,
    smooth: f64,
    weight: f64,
    grad: Option<&mut [[f64; 3]]>,
) -> Result<f64> {
    let parts = dice_parts(ch.warped, ch.fixed)?;
    let count = parts.len() as f64;
    let mut mean = 0.0;
    for d in &parts {
        mean += (2.0 * d.inter + smooth) / (d.sum_p + d.sum_q + smooth);
    }
    mean /= count;
    if let Some(out) = grad {
        let q = ch.fixed.labels();
        for d in &parts {
            let Some((_, wg)) = ch.warped.mask_of(d.label) else {
                continue;
            };
            let den = d.sum_p + d.sum_q + smooth;
            let num = 2.0 * d.inter + smooth;
            let scale = -weight / (count * den * den);
            let dp: Vec<f64> = q
                .iter()
                .map(|&l| {
                    let qi = (l == d.label) as u8 as f64;
                    scale * (2.0 * qi * den - num)
                })
                .collect();
            add_chain(out, &dp, wg);
        }
    }
    Ok(1.0 - mean)
}

/// Evaluates every configured term, the weighted total and its gradient.
/// Terms with zero weight are reported but contribute nothing.
pub fn evaluate(config: &LossConfig, state: &LossState) -> Result<LossReport> {
    config.validate()?;
    let n = [
        state.primary.map(|c| c.warped.data().len()),
        state.secondary.map(|c| c.warped.data().len()),
        state.labels.map(|c| c.fixed.labels().len()),
        state.velocity.map(|v| v.vectors().len()),
    ]
    .into_iter()
    .flatten()
    .next()
    .ok_or_else(|| Error::invalid("loss state is empty"))?;
    let mut gradient = vec![[0.0; 3]; n];
    let mut terms = Vec::with_capacity(config.terms.len());
    let mut total = 0.0;
    for t in &config.terms {
        let missing = || {
            Error::invalid(format!(
                "loss term {:?} has no {:?} input",
                t.kind, t.target
            ))
        };
        let g = (t.weight > 0.0).then_some(gradient.as_mut_slice());
        let value = match (t.kind, t.target) {
            (LossKind::Mse | LossKind::Ncc, target) => {
                let ch = match target {
                    LossTarget::PrimaryContrast => state.primary,
                    _ => state.secondary,
                }
                .ok_or_else(missing)?;
                if ch.warped.data().len() != n {
                    return Err(Error::invalid("loss inputs have different sizes"));
                }
                if t.kind == LossKind::Mse {
                    mse_term(&ch, t.weight, g)?
                } else {
                    ncc_term(&ch, t.weight, g)?
                }
            }
            (LossKind::Dice, _) => {
                let ch = state.labels.ok_or_else(missing)?;
                dice_term(&ch, config.dice_smooth, t.weight, g)?
            }
            (LossKind::Regularizer, _) => {
                let v = state.velocity.ok_or_else(missing)?;
                if let Some(out) = g {
                    smoothness_gradient(v.field(), t.weight, out);
                }
                smoothness(v.field())
            }
        };
        if t.weight > 0.0 {
            total += t.weight * value;
        }
        terms.push(TermValue {
            kind: t.kind,
            target: t.target,
            weight: t.weight,
            value,
        });
    }
    Ok(LossReport {
        terms,
        total,
        gradient,
    })
}
