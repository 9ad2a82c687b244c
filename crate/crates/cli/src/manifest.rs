//! Atlas manifests: explicit JSON lists of atlas files.
//!
//! ```json
//! {
//!   "primary": "ti1400",
//!   "atlases": [
//!     {
//!       "id": "subject_000",
//!       "labels": "subject_000/labels.nii",
//!       "contrasts": { "ti1400": "subject_000/ti1400.nii", "ti400": "subject_000/ti400.nii" }
//!     }
//!   ]
//! }
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use warpsynth::{io, AtlasSubject};

use crate::config::require_file;
use crate::fail::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Contrast used for registration.
    pub primary: String,
    pub atlases: Vec<AtlasEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtlasEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<PathBuf>,
    pub contrasts: BTreeMap<String, PathBuf>,
}

impl Manifest {
    /// Reads and checks a manifest; every referenced file must exist.
    pub fn load(path: &Path) -> CliResult<(Self, PathBuf)> {
        require_file(path, "atlas manifest")?;
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(&base)?;
        Ok((manifest, base))
    }

    fn validate(&self, base: &Path) -> CliResult<()> {
        if self.atlases.is_empty() {
            return Err(CliError::validation("atlas manifest lists no atlases"));
        }
        let mut ids: Vec<&str> = self.atlases.iter().map(|a| a.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::validation(format!(
                "duplicate atlas id {:?}",
                w[0]
            )));
        }
        for a in &self.atlases {
            if !a.contrasts.contains_key(&self.primary) {
                return Err(CliError::validation(format!(
                    "atlas {:?} lacks the primary contrast {:?}",
                    a.id, self.primary
                )));
            }
            for p in a.contrasts.values().chain(&a.labels) {
                require_file(&base.join(p), &format!("atlas {:?} file", a.id))?;
            }
        }
        Ok(())
    }

    /// Contrast names present in every atlas, excluding the primary.
    pub fn shared_secondary_contrasts(&self) -> Vec<String> {
        let mut names: Vec<String> = self.atlases[0]
            .contrasts
            .keys()
            .filter(|n| **n != self.primary)
            .cloned()
            .collect();
        names.retain(|n| self.atlases.iter().all(|a| a.contrasts.contains_key(n)));
        names
    }

    /// Reads every atlas into memory.
    pub fn read_atlases(&self, base: &Path) -> CliResult<Vec<AtlasSubject>> {
        self.atlases
            .iter()
            .map(|a| {
                let mut contrasts = BTreeMap::new();
                for (name, p) in &a.contrasts {
                    contrasts.insert(name.clone(), io::read_scalar(base.join(p))?);
                }
                let primary = contrasts.remove(&self.primary).expect("validated");
                let labels = a
                    .labels
                    .as_ref()
                    .map(|p| io::read_labels(base.join(p)))
                    .transpose()?;
                AtlasSubject::new(
                    a.id.clone(),
                    self.primary.clone(),
                    primary,
                    contrasts,
                    labels,
                )
                .map_err(|e| CliError::from(e).context(format!("atlas {:?}", a.id)))
            })
            .collect()
    }
}
