//! Run configuration: one TOML file plus `section.key=value` overrides.
//!
//! ```toml
//! workers = 2
//!
//! [registration]
//! iterations_per_level = [100, 100, 50]
//! gradient_sigma = 8.0
//!
//! [phantom]
//! dims = [64, 64, 64]
//! noise_sigma = 0.02
//!
//! [synth]
//! method = "mean"
//! contrasts = ["ti400"]
//!
//! [sweep]
//! max_atlases = 9
//! seeds = [0, 1, 2, 3, 4]
//! ```
//!
//! Every section is optional; missing keys take the library defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};
use warpsynth::phantom::{self, PhantomSpec};
use warpsynth::{FusionMethod, RegistrationConfig};

use crate::fail::{CliError, CliResult};

/// Environment variable holding the default worker count.
pub const WORKERS_ENV: &str = "WARPSYNTH_WORKERS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    /// Upper bound on parallel registrations; `None` defers to the
    /// environment, then to one worker.
    pub workers: Option<usize>,
    pub registration: RegistrationConfig,
    pub phantom: PhantomSpec,
    pub synth: SynthConfig,
    pub sweep: SweepConfig,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub method: FusionMethod,
    /// Contrasts to synthesize; empty means every non-primary contrast the
    /// atlases share.
    pub contrasts: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            method: FusionMethod::Mean,
            contrasts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Largest atlas count; the sweep covers 1..=max_atlases.
    pub max_atlases: usize,
    pub seeds: Vec<u64>,
    /// Contrast that is registered.
    pub primary: String,
    /// Contrast that is synthesized and scored.
    pub target: String,
    pub methods: Vec<FusionMethod>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_atlases: 9,
            seeds: vec![0, 1, 2, 3, 4],
            primary: phantom::primary_contrast(),
            target: phantom::secondary_contrast(),
            methods: vec![FusionMethod::Mean, FusionMethod::Median],
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.max_atlases < 2 {
            return Err(CliError::validation(format!(
                "sweep.max_atlases must be at least 2 to show a trend, got {}",
                self.max_atlases
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::validation("sweep.seeds is empty"));
        }
        if self.methods.is_empty() {
            return Err(CliError::validation("sweep.methods is empty"));
        }
        if self.primary == self.target {
            return Err(CliError::validation(
                "sweep.primary and sweep.target must name different contrasts",
            ));
        }
        Ok(())
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` in order and deserializes.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                text.parse::<Table>()
                    .map_err(|e| CliError::validation(format!("config {}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: RunConfig = Value::Table(table)
            .try_into()
            .map_err(|e| CliError::validation(format!("config: {e}")))?;
        config.registration.validate()?;
        config.phantom.validate()?;
        Ok(config)
    }

    /// Worker count: config, then environment, then 1.
    pub fn worker_count(&self) -> CliResult<usize> {
        let n = match self.workers {
            Some(n) => n,
            None => match std::env::var(WORKERS_ENV) {
                Ok(s) => s.trim().parse().map_err(|_| {
                    CliError::validation(format!(
                        "{WORKERS_ENV} must be a positive integer, got {s:?}"
                    ))
                })?,
                Err(_) => 1,
            },
        };
        if n == 0 {
            return Err(CliError::validation("worker count must be at least 1"));
        }
        Ok(n)
    }
}

/// Applies one `dotted.key=value` override. The value is parsed as a TOML
/// value when possible (`3`, `0.5`, `true`, `[4, 2, 1]`, `"x"`), otherwise
/// taken as a bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("override {spec:?} is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::validation(format!(
            "override {spec:?} has an empty key"
        )));
    }
    let value = parse_value(raw.trim());
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields at least one part");
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| {
            CliError::validation(format!("override {spec:?}: {part} is not a section"))
        })?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Fails unless `path` exists.
pub fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::validation(format!(
            "{what} not found: {}",
            path.display()
        )))
    }
}

/// Checks that `path` exists, then reads it with `read`, naming the path in
/// any error.
pub fn read_input<T>(
    path: &Path,
    what: &str,
    read: impl FnOnce(&Path) -> warpsynth::Result<T>,
) -> CliResult<T> {
    require_file(path, what)?;
    read(path).map_err(|e| CliError::from(e).context(path.display()))
}

/// Like [`read_input`] for optional inputs.
pub fn read_optional<T>(
    path: Option<&Path>,
    what: &str,
    read: impl FnOnce(&Path) -> warpsynth::Result<T>,
) -> CliResult<Option<T>> {
    path.map(|p| read_input(p, what, read)).transpose()
}

/// Creates the output directory (and parents) if absent.
pub fn prepare_out_dir(dir: &Path) -> CliResult<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::validation(format!(
            "cannot create output directory {}: {e}",
            dir.display()
        ))
    })?;
    Ok(dir.to_path_buf())
}
