use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use warpsynth::synthesis::synthesize;
use warpsynth::transform::{jacobian_determinant, min_interior};
use warpsynth::{io, AtlasSubject, FusionMethod};

use crate::config::{prepare_out_dir, read_input, read_optional, RunConfig};
use crate::fail::{CliError, CliResult};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Fixed image in the manifest's primary contrast.
    #[arg(long)]
    pub fixed: PathBuf,
    /// Fixed segmentation; needed for weighted_mean fusion.
    #[arg(long)]
    pub fixed_labels: Option<PathBuf>,
    /// Atlas manifest (JSON).
    #[arg(long)]
    pub atlases: PathBuf,
    /// Contrast to synthesize; repeat for several. Defaults to the config,
    /// then to every non-primary contrast all atlases share.
    #[arg(long = "contrast")]
    pub contrasts: Vec<String>,
    /// mean, median or weighted_mean. Defaults to the config.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Contents of `fusion.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub method: FusionMethod,
    pub primary: String,
    /// One entry per registration performed.
    pub registrations: Vec<RegistrationRecord>,
    pub contrasts: BTreeMap<String, ContrastRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationRecord {
    pub id: String,
    pub atlas_id: String,
    /// Displacement file, relative to the output directory.
    pub displacement: String,
    pub converged: bool,
    pub final_loss: f64,
    pub min_jacobian: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRecord {
    pub file: String,
    pub atlas_ids: Vec<String>,
    /// Registrations whose transforms produced this contrast, in
    /// `atlas_ids` order.
    pub registration_ids: Vec<String>,
    pub weights: Vec<f64>,
}

/// Output file name of a synthetic contrast.
pub fn synthetic_file(contrast: &str) -> String {
    format!("synthetic_{contrast}.nii")
}

fn check_name(name: &str) -> CliResult<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-');
    if ok {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "contrast name {name:?} must use only letters, digits, '_' and '-'"
        )))
    }
}

pub fn run(args: &SynthArgs, config: &RunConfig) -> CliResult<()> {
    let (manifest, base) = Manifest::load(&args.atlases)?;
    let fixed = read_input(&args.fixed, "fixed image", |p| io::read_scalar(p))?;
    let fixed_labels = read_optional(args.fixed_labels.as_deref(), "fixed labels", |p| {
        io::read_labels(p)
    })?;
    let method = match &args.method {
        Some(m) => m.parse::<FusionMethod>()?,
        None => config.synth.method,
    };
    let contrasts = if !args.contrasts.is_empty() {
        args.contrasts.clone()
    } else if !config.synth.contrasts.is_empty() {
        config.synth.contrasts.clone()
    } else {
        manifest.shared_secondary_contrasts()
    };
    if contrasts.is_empty() {
        return Err(CliError::validation("no contrast to synthesize"));
    }
    for c in &contrasts {
        check_name(c)?;
        if *c == manifest.primary {
            return Err(CliError::validation(format!(
                "{c:?} is the registration contrast; synthesize a different one"
            )));
        }
    }
    if method == FusionMethod::WeightedMean {
        if fixed_labels.is_none() {
            return Err(CliError::validation(
                "weighted_mean fusion needs --fixed-labels",
            ));
        }
        if let Some(a) = manifest.atlases.iter().find(|a| a.labels.is_none()) {
            return Err(CliError::validation(format!(
                "weighted_mean fusion needs labels for atlas {:?}",
                a.id
            )));
        }
    }
    let atlases = manifest.read_atlases(&base)?;
    let fixed = AtlasSubject::new(
        "fixed",
        manifest.primary.clone(),
        fixed,
        BTreeMap::new(),
        fixed_labels,
    )?;
    let out = prepare_out_dir(&args.out)?;

    let synthesis = synthesize(&fixed, &atlases, &contrasts, method, &config.registration)?;

    let mut registrations = Vec::new();
    let mut reg_id = BTreeMap::new();
    for (i, w) in synthesis.atlases.iter().enumerate() {
        let id = format!("reg_{i:03}");
        reg_id.insert(w.atlas_id.clone(), id.clone());
        let displacement = format!("{id}_displacement.nii");
        io::write_displacement(&w.registration.displacement, out.join(&displacement))?;
        registrations.push(RegistrationRecord {
            id,
            atlas_id: w.atlas_id.clone(),
            displacement,
            converged: w.registration.converged,
            final_loss: w.registration.final_loss(),
            min_jacobian: min_interior(&jacobian_determinant(&w.registration.displacement)?),
        });
    }
    let mut records = BTreeMap::new();
    for (name, fused) in &synthesis.fused {
        let file = synthetic_file(name);
        io::write_scalar(&fused.synthetic, out.join(&file))?;
        records.insert(
            name.clone(),
            ContrastRecord {
                file,
                atlas_ids: fused.atlas_ids.clone(),
                registration_ids: fused.atlas_ids.iter().map(|a| reg_id[a].clone()).collect(),
                weights: fused.weights.clone(),
            },
        );
    }
    let record = FusionRecord {
        method,
        primary: manifest.primary.clone(),
        registrations,
        contrasts: records,
    };
    io::write_json(&record, out.join("fusion.json"))?;
    Ok(())
}
