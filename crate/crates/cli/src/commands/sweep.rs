use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use warpsynth::metrics::{psnr, ssim, SsimOptions};
use warpsynth::phantom::{self, PhantomSpec};
use warpsynth::synthesis::{fuse_warped, warp_atlases};
use warpsynth::{io, AtlasSubject, FusionMethod};

use crate::config::{prepare_out_dir, RunConfig};
use crate::fail::CliResult;
use crate::stats::spearman;

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub method: FusionMethod,
    pub atlas_count: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mask_voxels: usize,
}

/// One row of `summary.csv`: metrics averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: FusionMethod,
    pub atlas_count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub seeds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTrend {
    pub method: FusionMethod,
    /// Spearman correlation of mean PSNR against atlas count.
    pub spearman_psnr: Option<f64>,
    pub spearman_ssim: Option<f64>,
    pub psnr_first: f64,
    pub psnr_last: f64,
    pub ssim_first: f64,
    pub ssim_last: f64,
    /// Positive rank correlation of mean PSNR with atlas count.
    pub increasing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedComparison {
    pub seed: u64,
    pub mean_psnr: f64,
    pub median_psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanVsMedian {
    pub atlas_count: usize,
    pub per_seed: Vec<SeedComparison>,
    /// Seeds where mean fusion reached at least the median's PSNR.
    pub mean_at_least_median: usize,
}

/// Contents of the sweep's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub max_atlases: usize,
    pub seeds: Vec<u64>,
    pub primary: String,
    pub target: String,
    pub trends: Vec<MethodTrend>,
    pub mean_vs_median: Option<MeanVsMedian>,
}

/// Registers the `max_atlases` cohort members to the target once per seed,
/// then fuses every prefix. `sweep.csv` is rewritten after each seed.
pub fn run(args: &SweepArgs, config: &RunConfig) -> CliResult<()> {
    let sweep = &config.sweep;
    sweep.validate()?;
    let out = prepare_out_dir(&args.out)?;
    let n = sweep.max_atlases;
    let options = SsimOptions::default();
    let mut rows = Vec::new();
    for &seed in &sweep.seeds {
        let spec = PhantomSpec {
            seed,
            ..config.phantom.clone()
        };
        let cohort = phantom::generate_cohort(&spec, n + 1)?;
        let target = &cohort[0];
        let fixed = AtlasSubject::from_phantom("target", target, &sweep.primary)?;
        let atlases = cohort[1..]
            .iter()
            .enumerate()
            .map(|(i, s)| AtlasSubject::from_phantom(format!("atlas_{i:03}"), s, &sweep.primary))
            .collect::<warpsynth::Result<Vec<_>>>()?;
        let warped = warp_atlases(
            &fixed,
            &atlases,
            std::slice::from_ref(&sweep.target),
            &config.registration,
        )?;
        let truth = target.contrast(&sweep.target)?;
        let mask_voxels = target.mask.iter().filter(|&&m| m).count();
        for &method in &sweep.methods {
            for k in 1..=n {
                let fused =
                    fuse_warped(&warped[..k], &sweep.target, method, fixed.labels.as_ref())?;
                rows.push(SweepRow {
                    seed,
                    method,
                    atlas_count: k,
                    psnr: psnr(truth, &fused.synthetic, &target.mask)?,
                    ssim: ssim(truth, &fused.synthetic, &target.mask, &options)?,
                    mask_voxels,
                });
            }
        }
        io::write_csv(&rows, out.join("sweep.csv"))?;
    }
    let (table, summary) = summarize(&rows, config);
    io::write_csv(&table, out.join("summary.csv"))?;
    io::write_json(&summary, out.join("summary.json"))?;
    Ok(())
}

/// Per-(method, k) means and the trend verdicts.
pub fn summarize(rows: &[SweepRow], config: &RunConfig) -> (Vec<SummaryRow>, SweepSummary) {
    let sweep = &config.sweep;
    let n = sweep.max_atlases;
    let mut table = Vec::new();
    let mut trends = Vec::new();
    for &method in &sweep.methods {
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for k in 1..=n {
            let cell: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == method && r.atlas_count == k)
                .collect();
            let count = cell.len() as f64;
            let mean_psnr = cell.iter().map(|r| r.psnr).sum::<f64>() / count;
            let mean_ssim = cell.iter().map(|r| r.ssim).sum::<f64>() / count;
            psnrs.push(mean_psnr);
            ssims.push(mean_ssim);
            table.push(SummaryRow {
                method,
                atlas_count: k,
                mean_psnr,
                mean_ssim,
                seeds: cell.len(),
            });
        }
        let ks: Vec<f64> = (1..=n).map(|k| k as f64).collect();
        let spearman_psnr = spearman(&ks, &psnrs);
        trends.push(MethodTrend {
            method,
            spearman_psnr,
            spearman_ssim: spearman(&ks, &ssims),
            psnr_first: psnrs[0],
            psnr_last: psnrs[n - 1],
            ssim_first: ssims[0],
            ssim_last: ssims[n - 1],
            increasing: spearman_psnr.is_some_and(|r| r > 0.0),
        });
    }
    let has = |m| sweep.methods.contains(&m);
    let mean_vs_median = (has(FusionMethod::Mean) && has(FusionMethod::Median)).then(|| {
        let at = |seed, method| {
            rows.iter()
                .find(|r| r.seed == seed && r.method == method && r.atlas_count == n)
                .map(|r| r.psnr)
                .unwrap_or(f64::NAN)
        };
        let per_seed: Vec<SeedComparison> = sweep
            .seeds
            .iter()
            .map(|&seed| SeedComparison {
                seed,
                mean_psnr: at(seed, FusionMethod::Mean),
                median_psnr: at(seed, FusionMethod::Median),
            })
            .collect();
        let mean_at_least_median = per_seed
            .iter()
            .filter(|c| c.mean_psnr >= c.median_psnr)
            .count();
        MeanVsMedian {
            atlas_count: n,
            per_seed,
            mean_at_least_median,
        }
    });
    let summary = SweepSummary {
        max_atlases: n,
        seeds: sweep.seeds.clone(),
        primary: sweep.primary.clone(),
        target: sweep.target.clone(),
        trends,
        mean_vs_median,
    };
    (table, summary)
}
