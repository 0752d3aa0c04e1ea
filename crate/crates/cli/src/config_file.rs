//! Optional TOML config file and the defaults < file < flags layering.

use std::path::Path;
use std::str::FromStr;

use serde::Deserialize;

use cadis_core::error::{CoreError, Result};
use cadis_core::{DenoiseConfig, EstimateMode};

use crate::CommonArgs;

/// Every key optional; absent keys fall through to the built-in defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub clusters: Option<usize>,
    pub beta: Option<f64>,
    pub samples: Option<usize>,
    pub tau: Option<f64>,
    pub patch_side: Option<usize>,
    pub stride: Option<usize>,
    pub train_stride: Option<usize>,
    pub r: Option<f64>,
    pub passes: Option<u32>,
    pub seed: Option<u64>,
    pub mode: Option<String>,
    pub workers: Option<usize>,
}

pub fn load_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(cadis_core::imaging::ImageIoError::Io)
        .map_err(CoreError::ImageIo)?;
    toml::from_str(&text)
        .map_err(|e| CoreError::invalid_parameter("config", format!("{path:?}: {e}")))
}

fn parse_mode(text: &str) -> Result<EstimateMode> {
    EstimateMode::from_str(text).map_err(|e| CoreError::invalid_parameter("mode", e))
}

/// Resolve the effective config: defaults, then the file named by
/// `--config` (if any), then explicit flags on top.
pub fn resolve(args: &CommonArgs) -> Result<DenoiseConfig> {
    resolve_inner(args, None)
}

/// Like [`resolve`], but when neither the file nor a flag sets
/// `patch_side`, take it from the loaded model instead of the built-in
/// default.
pub fn resolve_with_model(args: &CommonArgs, model_side: usize) -> Result<DenoiseConfig> {
    resolve_inner(args, Some(model_side))
}

fn resolve_inner(args: &CommonArgs, model_side: Option<usize>) -> Result<DenoiseConfig> {
    let file = match &args.config {
        Some(path) => load_file(path)?,
        None => FileConfig::default(),
    };
    let mut cfg = DenoiseConfig::default();
    apply_file(&mut cfg, &file)?;
    if let Some(side) = model_side {
        if file.patch_side.is_none() && args.patch_side.is_none() {
            cfg.patch_side = side;
        }
    }
    apply_flags(&mut cfg, args)?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn apply_file(cfg: &mut DenoiseConfig, file: &FileConfig) -> Result<()> {
    if let Some(v) = file.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = file.beta {
        cfg.beta = v;
    }
    if let Some(v) = file.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = file.tau {
        cfg.tau = v;
    }
    if let Some(v) = file.patch_side {
        cfg.patch_side = v;
    }
    if let Some(v) = file.stride {
        cfg.stride = v;
    }
    if let Some(v) = file.train_stride {
        cfg.train_stride = v;
    }
    if let Some(v) = file.r {
        cfg.boost_r = v;
    }
    if let Some(v) = file.passes {
        cfg.passes = v;
    }
    if let Some(v) = file.seed {
        cfg.base_seed = v;
    }
    if let Some(text) = &file.mode {
        cfg.mode = parse_mode(text)?;
    }
    if let Some(v) = file.workers {
        cfg.workers = v;
    }
    Ok(())
}

pub fn apply_flags(cfg: &mut DenoiseConfig, args: &CommonArgs) -> Result<()> {
    if let Some(v) = args.clusters {
        cfg.clusters = v;
    }
    if let Some(v) = args.beta {
        cfg.beta = v;
    }
    if let Some(v) = args.samples {
        cfg.n_samples = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    if let Some(v) = args.patch_side {
        cfg.patch_side = v;
    }
    if let Some(v) = args.stride {
        cfg.stride = v;
    }
    if let Some(v) = args.train_stride {
        cfg.train_stride = v;
    }
    if let Some(v) = args.r {
        cfg.boost_r = v;
    }
    if let Some(v) = args.passes {
        cfg.passes = v;
    }
    if let Some(v) = args.seed {
        cfg.base_seed = v;
    }
    if let Some(text) = &args.mode {
        cfg.mode = parse_mode(text)?;
    }
    if let Some(v) = args.workers {
        cfg.workers = v;
    }
    Ok(())
}
