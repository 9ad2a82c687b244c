use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use warpsynth::io;
use warpsynth::metrics::{default_mask, evaluate, SsimOptions};

use crate::config::{prepare_out_dir, read_input, read_optional};
use crate::fail::{CliError, CliResult};

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth image.
    #[arg(long)]
    pub reference: PathBuf,
    /// Image under test (for example a synthetic contrast).
    #[arg(long)]
    pub test: PathBuf,
    /// Evaluation mask. Without it the reference labels' foreground is
    /// used, then a threshold mask of the reference.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Reference segmentation.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Segmentation of the test image; with --labels, per-label Dice goes
    /// to dice.csv.
    #[arg(long)]
    pub test_labels: Option<PathBuf>,
    #[arg(long, default_value = "subject")]
    pub subject: String,
    #[arg(long, default_value = "")]
    pub method: String,
    #[arg(long)]
    pub atlas_count: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub subject: String,
    pub method: String,
    pub atlas_count: Option<usize>,
    pub psnr: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub label: u32,
    pub dice: f64,
}

pub fn run(args: &EvalArgs) -> CliResult<()> {
    let reference = read_input(&args.reference, "reference image", |p| io::read_scalar(p))?;
    let test = read_input(&args.test, "test image", |p| io::read_scalar(p))?;
    let labels = read_optional(args.labels.as_deref(), "labels", |p| io::read_labels(p))?;
    let test_labels = read_optional(args.test_labels.as_deref(), "test labels", |p| {
        io::read_labels(p)
    })?;
    if test_labels.is_some() && labels.is_none() {
        return Err(CliError::validation("--test-labels needs --labels"));
    }
    let mask = match (&args.mask, &labels) {
        (Some(p), _) => read_input(p, "mask", |p| io::read_mask(p))?,
        (None, Some(l)) => l.foreground(),
        (None, None) => default_mask(&reference),
    };
    let pair = match (&labels, &test_labels) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let report = evaluate(
        &reference,
        &test,
        Some(&mask),
        pair,
        &SsimOptions::default(),
    )?;
    let out = prepare_out_dir(&args.out)?;
    let row = MetricRow {
        subject: args.subject.clone(),
        method: args.method.clone(),
        atlas_count: args.atlas_count,
        psnr: report.psnr,
        ssim: report.ssim,
        mask_voxels: report.mask_voxels,
    };
    io::write_csv(&[row], out.join("metrics.csv"))?;
    if pair.is_some() {
        let rows: Vec<DiceRow> = report
            .dice_per_label
            .iter()
            .map(|(&label, &dice)| DiceRow { label, dice })
            .collect();
        io::write_csv(&rows, out.join("dice.csv"))?;
    }
    Ok(())
}
