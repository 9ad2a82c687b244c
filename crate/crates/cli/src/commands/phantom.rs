use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use warpsynth::io;
use warpsynth::phantom::{self, PhantomSpec, PhantomSubject};

use crate::config::{prepare_out_dir, RunConfig};
use crate::fail::{CliError, CliResult};
use crate::manifest::{AtlasEntry, Manifest};

#[derive(Debug, Clone, Args)]
pub struct PhantomArgs {
    /// Number of deformed subjects.
    #[arg(long, default_value_t = 1)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SpecRecord<'a> {
    subjects: usize,
    spec: &'a PhantomSpec,
}

pub fn subject_dir(i: usize) -> String {
    format!("subject_{i:03}")
}

/// Contrast used for registration in the written manifest.
fn manifest_primary(spec: &PhantomSpec) -> String {
    let preferred = phantom::primary_contrast();
    let mut names: Vec<String> = spec
        .inversion_times
        .iter()
        .map(|&t| phantom::contrast_name(t))
        .collect();
    if names.contains(&preferred) {
        return preferred;
    }
    names.sort();
    names.swap_remove(0)
}

fn write_common(s: &PhantomSubject, dir: &Path) -> CliResult<()> {
    for (name, v) in &s.contrasts {
        io::write_scalar(&v.clone().without_mask(), dir.join(format!("{name}.nii")))?;
    }
    io::write_labels(&s.tissue_map, dir.join("labels.nii"))?;
    io::write_mask(s.geometry(), &s.mask, dir.join("mask.nii"))?;
    Ok(())
}

fn create(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::other(format!("cannot create {}: {e}", dir.display())))
}

/// Writes `base/` (the undeformed anatomy), `n` deformed subjects with
/// their truth fields, an atlas manifest over the subjects, and the spec.
///
/// `truth_displacement.nii` maps the base onto the subject;
/// `truth_inverse.nii` is what registering the subject (moving) to the base
/// (fixed) should recover.
pub fn run(args: &PhantomArgs, config: &RunConfig) -> CliResult<()> {
    if args.n == 0 {
        return Err(CliError::validation("--n must be at least 1"));
    }
    let spec = &config.phantom;
    let out = prepare_out_dir(&args.out)?;
    let base = phantom::generate(spec)?;
    let cohort = phantom::generate_cohort(spec, args.n)?;

    create(&out.join("base"))?;
    write_common(&base, &out.join("base"))?;
    let mut entries = Vec::new();
    for (i, s) in cohort.iter().enumerate() {
        let name = subject_dir(i);
        let dir = out.join(&name);
        create(&dir)?;
        write_common(s, &dir)?;
        let truth = s
            .true_displacement
            .as_ref()
            .ok_or_else(|| CliError::other("cohort member lacks its truth field"))?;
        io::write_displacement(truth, dir.join("truth_displacement.nii"))?;
        let inverse = s.inverse_truth()?.expect("truth field checked above");
        io::write_displacement(&inverse, dir.join("truth_inverse.nii"))?;
        let contrasts: BTreeMap<String, PathBuf> = s
            .contrasts
            .keys()
            .map(|c| (c.clone(), PathBuf::from(&name).join(format!("{c}.nii"))))
            .collect();
        entries.push(AtlasEntry {
            id: name.clone(),
            labels: Some(PathBuf::from(&name).join("labels.nii")),
            contrasts,
        });
    }
    let manifest = Manifest {
        primary: manifest_primary(spec),
        atlases: entries,
    };
    io::write_json(&manifest, out.join("atlases.json"))?;
    io::write_json(
        &SpecRecord {
            subjects: args.n,
            spec,
        },
        out.join("spec.json"),
    )?;
    Ok(())
}
