//! Multi-resolution diffeomorphic registration by gradient descent on a
//! stationary velocity field.
//!
//! Each iteration exponentiates the velocity, warps the moving channels,
//! evaluates the configured energy and steps against the displacement
//! gradient (the exponential map's Jacobian is taken as identity). Steps are
//! normalized by the largest gradient vector so `step_size` is in voxels.
//! A step that does not lower the energy is rejected and the step size
//! halved; accepted steps let it grow back towards its initial value.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, build_pyramid, gaussian_smooth, LabelMap, Pyramid, Volume};
use crate::objective::{
    self, Channel, LabelChannel, LossConfig, LossReport, LossState, LossTarget,
};
use crate::sampler::{one_hot_channels, warp_label_channels, warp_with_gradient};
use crate::transform::{
    exponentiate_auto, upsample_velocity, DisplacementField, VelocityField, DEFAULT_EXP_STEPS,
};

/// Number of trailing iterations used by the relative-change stopping rule.
const CONVERGENCE_WINDOW: usize = 5;
/// A level stops once rejections have shrunk the step below this fraction of
/// its initial value.
const MIN_STEP_FRACTION: f64 = 1e-3;
/// Step size multiplier after an accepted step, capped at the initial value.
const STEP_GROWTH: f64 = 1.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Unsupervised,
    Supervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationConfig {
    pub loss: LossConfig,
    pub pyramid_schedule: Vec<usize>,
    pub iterations_per_level: Vec<usize>,
    /// Largest per-voxel velocity update of a step, in voxels.
    pub step_size: f64,
    /// Step size multiplier applied at each new pyramid level.
    pub step_decay: f64,
    pub convergence_tol: f64,
    pub exp_steps: u32,
    pub mode: Mode,
    /// Recorded with results. The optimizer itself is deterministic.
    pub seed: u64,
    /// Gaussian width, in full-resolution voxels, applied to the descent
    /// direction. Zero disables smoothing.
    pub gradient_sigma: f64,
    /// Gaussian width (voxels of the current level) applied to the images
    /// at every level before matching. Zero disables smoothing.
    pub image_sigma: f64,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::unsupervised(),
            pyramid_schedule: vec![4, 2, 1],
            iterations_per_level: vec![100, 100, 50],
            step_size: 0.5,
            step_decay: 1.0,
            convergence_tol: 1e-4,
            exp_steps: DEFAULT_EXP_STEPS,
            mode: Mode::Unsupervised,
            seed: 0,
            gradient_sigma: 8.0,
            image_sigma: 0.5,
        }
    }
}

impl RegistrationConfig {
    pub fn supervised(secondary_weight: f64) -> Self {
        Self {
            loss: LossConfig::supervised(secondary_weight),
            mode: Mode::Supervised,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        grid::validate_schedule(&self.pyramid_schedule)?;
        if self.iterations_per_level.len() != self.pyramid_schedule.len() {
            return Err(Error::invalid(format!(
                "{} iteration budgets for {} pyramid levels",
                self.iterations_per_level.len(),
                self.pyramid_schedule.len()
            )));
        }
        if self.iterations_per_level.contains(&0) {
            return Err(Error::invalid("iteration budgets must be positive"));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::invalid("step_size must be positive"));
        }
        if !(self.step_decay > 0.0 && self.step_decay <= 1.0) {
            return Err(Error::invalid("step_decay must lie in (0, 1]"));
        }
        if !(self.convergence_tol.is_finite() && self.convergence_tol > 0.0) {
            return Err(Error::invalid("convergence_tol must be positive"));
        }
        if self.exp_steps == 0 {
            return Err(Error::invalid("exp_steps must be positive"));
        }
        if !(self.gradient_sigma.is_finite() && self.gradient_sigma >= 0.0) {
            return Err(Error::invalid("gradient_sigma must be non-negative"));
        }
        if !(self.image_sigma.is_finite() && self.image_sigma >= 0.0) {
            return Err(Error::invalid("image_sigma must be non-negative"));
        }
        let has_secondary = self.loss.uses(LossTarget::SecondaryContrast);
        match self.mode {
            Mode::Supervised if !has_secondary => Err(Error::invalid(
                "supervised mode requires a secondary_contrast loss term",
            )),
            Mode::Unsupervised if has_secondary => Err(Error::invalid(
                "secondary_contrast loss terms require supervised mode",
            )),
            _ => Ok(()),
        }
    }
}

/// An image with its optional segmentation.
#[derive(Debug, Clone, Copy)]
pub struct Scan<'a> {
    pub image: &'a Volume,
    pub labels: Option<&'a LabelMap>,
}

impl<'a> Scan<'a> {
    pub fn new(image: &'a Volume, labels: Option<&'a LabelMap>) -> Self {
        Self { image, labels }
    }
}

/// Paired secondary-contrast images used by supervised registration.
#[derive(Debug, Clone, Copy)]
pub struct Supervision<'a> {
    pub fixed: &'a Volume,
    pub moving: &'a Volume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    /// Finest-level displacement, `exp(velocity)`.
    pub displacement: DisplacementField,
    pub velocity: VelocityField,
    /// Total loss at the start of each level and after every accepted step.
    pub loss_trace: Vec<Vec<f64>>,
    /// Total loss of the zero velocity at each level.
    pub zero_velocity_loss: Vec<f64>,
    /// Per-term values at the final iterate.
    pub final_report: Vec<objective::TermValue>,
    pub converged: bool,
    pub wall_time: f64,
}

impl RegistrationResult {
    /// The zero transform, as if registration had stopped before moving.
    pub fn identity(geometry: grid::Geometry) -> Self {
        Self {
            displacement: DisplacementField::zeros(geometry),
            velocity: VelocityField::zeros(geometry),
            loss_trace: vec![vec![0.0]],
            zero_velocity_loss: vec![0.0],
            final_report: Vec::new(),
            converged: true,
            wall_time: 0.0,
        }
    }

    pub fn final_loss(&self) -> f64 {
        *self
            .loss_trace
            .last()
            .and_then(|t| t.last())
            .expect("loss trace is never empty")
    }

    /// Same solution regardless of timing.
    pub fn same_solution(&self, other: &RegistrationResult) -> bool {
        self.displacement == other.displacement
            && self.velocity == other.velocity
            && self.loss_trace == other.loss_trace
            && self.zero_velocity_loss == other.zero_velocity_loss
            && self.converged == other.converged
    }
}

struct Level<'a> {
    fixed: &'a Volume,
    moving: &'a Volume,
    fixed_labels: Option<&'a LabelMap>,
    /// One-hot channels of the moving labels, one per dice label.
    moving_channels: Option<Vec<Vec<f64>>>,
    fixed_secondary: Option<&'a Volume>,
    moving_secondary: Option<&'a Volume>,
}

struct Problem<'a> {
    config: &'a RegistrationConfig,
    dice_labels: Vec<u32>,
    level: Level<'a>,
}

impl Problem<'_> {
    fn evaluate(&self, v: &VelocityField) -> Result<LossReport> {
        let lv = &self.level;
        let (u, _) = exponentiate_auto(v, self.config.exp_steps)?;
        let (wp, gp) = warp_with_gradient(lv.moving, &u)?;
        let secondary = match (lv.fixed_secondary, lv.moving_secondary) {
            (Some(f), Some(m)) => {
                let (w, g) = warp_with_gradient(m, &u)?;
                Some((w, g, f))
            }
            _ => None,
        };
        let soft = match (lv.fixed_labels, &lv.moving_channels) {
            (Some(_), Some(ch)) => Some(warp_label_channels(
                ch,
                &self.dice_labels,
                lv.moving.geometry(),
                &u,
            )?),
            _ => None,
        };
        let state = LossState {
            velocity: Some(v),
            primary: Some(Channel {
                warped: &wp,
                gradient: &gp,
                fixed: lv.fixed,
            }),
            secondary: secondary.as_ref().map(|(w, g, f)| Channel {
                warped: w,
                gradient: g,
                fixed: f,
            }),
            labels: soft
                .as_ref()
                .zip(lv.fixed_labels)
                .map(|(s, f)| LabelChannel {
                    warped: s,
                    fixed: f,
                }),
        };
        objective::evaluate(&self.config.loss, &state)
    }
}

fn descent_direction(report: &LossReport, dims: [usize; 3], sigma: f64) -> Option<Vec<[f64; 3]>> {
    let mut flat: Vec<f64> = report.gradient.iter().flatten().copied().collect();
    gaussian_smooth(&mut flat, dims, 3, sigma);
    let dir: Vec<[f64; 3]> = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let max = dir.iter().map(|d| grid::norm(*d)).fold(0.0, f64::max);
    if !(max > 0.0) || !max.is_finite() {
        return None;
    }
    Some(dir.into_iter().map(|d| d.map(|x| x / max)).collect())
}

fn check_finite(report: &LossReport, level: usize, iteration: usize) -> Result<()> {
    if report.total.is_finite() && report.gradient.iter().flatten().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericalFailure { level, iteration })
    }
}

struct Pyramids {
    fixed: Pyramid,
    moving: Pyramid,
    secondary: Option<(Pyramid, Pyramid)>,
}

fn validate_inputs(
    fixed: &Scan,
    moving: &Scan,
    supervision: Option<&Supervision>,
    config: &RegistrationConfig,
) -> Result<()> {
    config.validate()?;
    let fg = fixed.image.geometry();
    let mg = moving.image.geometry();
    if fg.dims != mg.dims || fg.spacing != mg.spacing {
        return Err(Error::invalid(format!(
            "fixed and moving geometry differ: {:?}/{:?} vs {:?}/{:?}",
            fg.dims, fg.spacing, mg.dims, mg.spacing
        )));
    }
    for l in [fixed.labels, moving.labels].into_iter().flatten() {
        fg.check_same_dims(l.geometry(), "registration labels")?;
    }
    if config.loss.uses(LossTarget::Labels) && (fixed.labels.is_none() || moving.labels.is_none()) {
        return Err(Error::invalid(
            "dice loss requires labels for both fixed and moving scans",
        ));
    }
    if config.mode == Mode::Supervised {
        let s = supervision.ok_or_else(|| {
            Error::invalid("supervised mode requires fixed and moving secondary contrasts")
        })?;
        fg.check_same_dims(s.fixed.geometry(), "fixed secondary")?;
        fg.check_same_dims(s.moving.geometry(), "moving secondary")?;
    }
    Ok(())
}

/// Estimates the displacement aligning `moving` to `fixed`: the warped image
/// is `moving(x + u(x))`.
pub fn register(
    fixed: &Scan,
    moving: &Scan,
    supervision: Option<&Supervision>,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    let start = Instant::now();
    validate_inputs(fixed, moving, supervision, config)?;
    let schedule = &config.pyramid_schedule;
    let sigma = config.image_sigma;
    let pyr = Pyramids {
        fixed: build_pyramid(fixed.image, fixed.labels, schedule)?.smoothed(sigma),
        moving: build_pyramid(moving.image, moving.labels, schedule)?.smoothed(sigma),
        secondary: match (config.mode, supervision) {
            (Mode::Supervised, Some(s)) => Some((
                build_pyramid(s.fixed, None, schedule)?.smoothed(sigma),
                build_pyramid(s.moving, None, schedule)?.smoothed(sigma),
            )),
            _ => None,
        },
    };
    let dice_labels: Vec<u32> = {
        let mut set: Vec<u32> = fixed
            .labels
            .into_iter()
            .chain(moving.labels)
            .flat_map(|l| l.foreground_labels())
            .collect();
        set.sort_unstable();
        set.dedup();
        set
    };

    let mut velocity: Option<VelocityField> = None;
    let mut loss_trace = Vec::with_capacity(schedule.len());
    let mut zero_velocity_loss = Vec::with_capacity(schedule.len());
    let mut converged = false;
    let mut final_report = Vec::new();

    for (k, &factor) in schedule.iter().enumerate() {
        let fl = &pyr.fixed.levels()[k];
        let ml = &pyr.moving.levels()[k];
        let problem = Problem {
            config,
            dice_labels: dice_labels.clone(),
            level: Level {
                fixed: &fl.volume,
                moving: &ml.volume,
                fixed_labels: fl.labels.as_ref(),
                moving_channels: ml
                    .labels
                    .as_ref()
                    .filter(|_| fl.labels.is_some() && config.loss.uses(LossTarget::Labels))
                    .map(|l| one_hot_channels(l, &dice_labels)),
                fixed_secondary: pyr.secondary.as_ref().map(|(f, _)| &f.levels()[k].volume),
                moving_secondary: pyr.secondary.as_ref().map(|(_, m)| &m.levels()[k].volume),
            },
        };
        let geometry = *fl.volume.geometry();
        let zero = VelocityField::zeros(geometry);
        let zero_report = problem.evaluate(&zero)?;
        check_finite(&zero_report, k, 0)?;
        zero_velocity_loss.push(zero_report.total);

        // start from the coarser solution unless the identity is better
        let (mut v, mut report) = match velocity.take() {
            Some(prev) => {
                let up = upsample_velocity(&prev, geometry, schedule[k - 1], factor)?;
                let r = problem.evaluate(&up)?;
                check_finite(&r, k, 0)?;
                if r.total <= zero_report.total {
                    (up, r)
                } else {
                    (zero, zero_report)
                }
            }
            None => (zero, zero_report),
        };

        let base_step = config.step_size * config.step_decay.powi(k as i32);
        let mut step = base_step;
        let mut trace = vec![report.total];
        let mut level_converged = false;
        for iteration in 1..config.iterations_per_level[k] {
            let sigma = config.gradient_sigma / factor as f64;
            let Some(dir) = descent_direction(&report, geometry.dims, sigma) else {
                level_converged = true;
                break;
            };
            let candidate: Vec<[f64; 3]> = v
                .vectors()
                .iter()
                .zip(&dir)
                .map(|(a, d)| [a[0] - step * d[0], a[1] - step * d[1], a[2] - step * d[2]])
                .collect();
            let candidate = match grid::VectorField::new(geometry, candidate) {
                Ok(f) => VelocityField::new(f),
                Err(_) => {
                    return Err(Error::NumericalFailure {
                        level: k,
                        iteration,
                    })
                }
            };
            let r = problem.evaluate(&candidate)?;
            check_finite(&r, k, iteration)?;
            if r.total >= report.total {
                step *= 0.5;
                if step < MIN_STEP_FRACTION * base_step {
                    level_converged = true;
                    break;
                }
                continue;
            }
            v = candidate;
            report = r;
            step = (step * STEP_GROWTH).min(base_step);
            trace.push(report.total);
            if trace.len() > CONVERGENCE_WINDOW {
                let old = trace[trace.len() - 1 - CONVERGENCE_WINDOW];
                let change = (old - report.total).abs() / old.abs().max(f64::MIN_POSITIVE);
                if change < config.convergence_tol {
                    level_converged = true;
                    break;
                }
            }
        }
        loss_trace.push(trace);
        converged = level_converged;
        final_report = report.terms;
        velocity = Some(v);
    }

    let velocity = velocity.expect("at least one pyramid level");
    let (displacement, _) = exponentiate_auto(&velocity, config.exp_steps)?;
    Ok(RegistrationResult {
        displacement,
        velocity,
        loss_trace,
        zero_velocity_loss,
        final_report,
        converged,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Registers every mover to `fixed`, in parallel. Results keep input order;
/// errors carry the index of the failing mover.
pub fn register_batch(
    fixed: &Scan,
    movers: &[Scan],
    supervision: Option<&[Supervision]>,
    config: &RegistrationConfig,
) -> Result<Vec<RegistrationResult>> {
    if let Some(s) = supervision {
        if s.len() != movers.len() {
            return Err(Error::invalid(format!(
                "{} supervision pairs for {} movers",
                s.len(),
                movers.len()
            )));
        }
    }
    let results: Vec<Result<RegistrationResult>> = movers
        .par_iter()
        .enumerate()
        .map(|(i, m)| register(fixed, m, supervision.map(|s| &s[i]), config))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Batch {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}
