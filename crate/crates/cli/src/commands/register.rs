use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use warpsynth::metrics::{default_mask, endpoint_error};
use warpsynth::objective::TermValue;
use warpsynth::registration::{Mode, Supervision};
use warpsynth::sampler::{warp, warp_labels};
use warpsynth::transform::{jacobian_determinant, min_interior};
use warpsynth::{io, register, RegistrationResult, Scan};

use crate::config::{prepare_out_dir, read_input, read_optional, RunConfig};
use crate::fail::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct RegisterArgs {
    /// Fixed (target) image.
    #[arg(long)]
    pub fixed: PathBuf,
    /// Moving image, warped onto the fixed one.
    #[arg(long)]
    pub moving: PathBuf,
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long)]
    pub moving_labels: Option<PathBuf>,
    /// Secondary contrast of the fixed subject (supervised mode only).
    #[arg(long)]
    pub fixed_secondary: Option<PathBuf>,
    /// Secondary contrast of the moving subject (supervised mode only).
    #[arg(long)]
    pub moving_secondary: Option<PathBuf>,
    /// Known displacement aligning moving to fixed; the summary then reports
    /// the mean endpoint error over the fixed foreground.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Output directory, created if absent.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct TraceRow {
    level: usize,
    factor: usize,
    step: usize,
    loss: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    final_loss: f64,
    terms: Vec<TermValue>,
    converged: bool,
    accepted_steps: Vec<usize>,
    min_jacobian: f64,
    max_displacement: f64,
    endpoint_error: Option<f64>,
    endpoint_mask_voxels: Option<usize>,
}

pub fn run(args: &RegisterArgs, config: &RunConfig) -> CliResult<()> {
    let fixed = read_input(&args.fixed, "fixed image", |p| io::read_scalar(p))?;
    let moving = read_input(&args.moving, "moving image", |p| io::read_scalar(p))?;
    let fixed_labels = read_optional(args.fixed_labels.as_deref(), "fixed labels", |p| {
        io::read_labels(p)
    })?;
    let moving_labels = read_optional(args.moving_labels.as_deref(), "moving labels", |p| {
        io::read_labels(p)
    })?;
    let fixed_secondary = read_optional(
        args.fixed_secondary.as_deref(),
        "fixed secondary image",
        |p| io::read_scalar(p),
    )?;
    let moving_secondary = read_optional(
        args.moving_secondary.as_deref(),
        "moving secondary image",
        |p| io::read_scalar(p),
    )?;
    let truth = read_optional(args.truth.as_deref(), "truth displacement", |p| {
        io::read_displacement(p)
    })?;

    let reg = &config.registration;
    let supervision = match (&fixed_secondary, &moving_secondary) {
        (Some(f), Some(m)) => Some(Supervision {
            fixed: f,
            moving: m,
        }),
        (None, None) => None,
        _ => {
            return Err(CliError::validation(
                "--fixed-secondary and --moving-secondary must be given together",
            ))
        }
    };
    if reg.mode == Mode::Supervised && supervision.is_none() {
        return Err(CliError::validation(
            "supervised mode needs --fixed-secondary and --moving-secondary",
        ));
    }
    if let Some(t) = &truth {
        fixed
            .geometry()
            .check_same_dims(t.geometry(), "truth displacement")?;
    }
    let out = prepare_out_dir(&args.out)?;

    let result = register(
        &Scan::new(&fixed, fixed_labels.as_ref()),
        &Scan::new(&moving, moving_labels.as_ref()),
        supervision.as_ref(),
        reg,
    )?;

    io::write_displacement(&result.displacement, out.join("displacement.nii"))?;
    io::write_scalar(
        &warp(&moving, &result.displacement)?,
        out.join("warped.nii"),
    )?;
    if let Some(l) = &moving_labels {
        io::write_labels(
            &warp_labels(l, &result.displacement)?,
            out.join("warped_labels.nii"),
        )?;
    }
    io::write_csv(
        &trace_rows(&result, &reg.pyramid_schedule),
        out.join("loss_trace.csv"),
    )?;

    let (endpoint_error, endpoint_mask_voxels) = match &truth {
        None => (None, None),
        Some(t) => {
            let mask = match &fixed_labels {
                Some(l) => l.foreground(),
                None => default_mask(&fixed),
            };
            let n = mask.iter().filter(|&&m| m).count();
            (
                Some(endpoint_error(&result.displacement, t, &mask)?),
                Some(n),
            )
        }
    };
    let summary = Summary {
        final_loss: result.final_loss(),
        terms: result.final_report.clone(),
        converged: result.converged,
        accepted_steps: result.loss_trace.iter().map(|t| t.len() - 1).collect(),
        min_jacobian: min_interior(&jacobian_determinant(&result.displacement)?),
        max_displacement: result.displacement.max_norm(),
        endpoint_error,
        endpoint_mask_voxels,
    };
    io::write_json(&summary, out.join("summary.json"))?;
    Ok(())
}

fn trace_rows(result: &RegistrationResult, schedule: &[usize]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (level, trace) in result.loss_trace.iter().enumerate() {
        for (step, &loss) in trace.iter().enumerate() {
            rows.push(TraceRow {
                level,
                factor: schedule.get(level).copied().unwrap_or(1),
                step,
                loss,
            });
        }
    }
    rows
}
