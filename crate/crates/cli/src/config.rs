//! Config resolution: defaults, then config files in order, then flags.

use std::path::{Path, PathBuf};

use clap::Args;
use pgr_core::config::RunConfig;

use crate::error::CliError;

/// Options shared by every training subcommand.
#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML config file; keys it sets override the run's stored config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Inject part evidence at every part token, planning included.
    #[arg(long)]
    pub no_stage_gate: bool,
    /// Replace all evidence embeddings with zeros.
    #[arg(long)]
    pub zero_evidence: bool,
    /// Drop the spectral encoder branch.
    #[arg(long)]
    pub no_spectral: bool,
    /// Drop the pixel encoder branch.
    #[arg(long)]
    pub no_pixel: bool,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_toml(path: &Path) -> Result<toml::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))
}

/// Layers `stored` files (those that exist), then `--config`, then the
/// ablation and seed flags, then `flags`.
pub fn resolve(stored: &[PathBuf], common: &Common, flags: impl FnOnce(&mut RunConfig)) -> Result<RunConfig, CliError> {
    let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| CliError::runtime(e.to_string()))?;
    for p in stored.iter().filter(|p| p.exists()) {
        merge(&mut value, read_toml(p)?);
    }
    if let Some(p) = &common.config {
        merge(&mut value, read_toml(p)?);
    }
    let mut cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| CliError::validation(format!("config: {e}")))?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.no_stage_gate {
        cfg.model.stage_gate = false;
    }
    if common.zero_evidence {
        cfg.model.zero_evidence = true;
    }
    if common.no_spectral {
        cfg.encoders.use_spectral = false;
    }
    if common.no_pixel {
        cfg.encoders.use_pixel = false;
    }
    flags(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

/// Fails when `cfg` changes anything that shapes the model stored in a
/// checkpoint (architecture, encoders, evidence, ablations, image size).
pub fn check_compatible(cfg: &RunConfig, stored: &RunConfig) -> Result<(), CliError> {
    let same = cfg.model == stored.model && cfg.encoders == stored.encoders && cfg.evidence == stored.evidence && cfg.data.image_size == stored.data.image_size;
    if same {
        Ok(())
    } else {
        Err(CliError::validation(
            "model, encoder, evidence or ablation settings differ from the checkpoint; set them when the run is initialized (annotate)",
        ))
    }
}
