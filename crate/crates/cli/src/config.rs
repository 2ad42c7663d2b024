//! Experiment configuration files and command-line overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dicycle_core::experiment::ExperimentConfig;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

/// Environment variable that toggles deterministic mode (`1`/`0`, `true`/`false`).
pub const DETERMINISTIC_ENV: &str = "DICYCLE_DETERMINISTIC";

pub fn load(path: Option<&Path>) -> Result<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn write_resolved(dir: &Path, config: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(RESOLVED_CONFIG);
    let text = toml::to_string_pretty(config).context("serializing configuration")?;
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn deterministic_from_env() -> Result<Option<bool>> {
    match std::env::var(DETERMINISTIC_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "1" | "true" | "yes" | "on" => Ok(Some(true)),
            "0" | "false" | "no" | "off" => Ok(Some(false)),
            other => bail!("{DETERMINISTIC_ENV}={other:?} is not a boolean"),
        },
    }
}

/// Split a total epoch count between the constant and the decaying stage.
pub fn split_epochs(total: usize) -> (usize, usize) {
    let p1 = total.div_ceil(2);
    (p1, total - p1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::default();
        cfg.train.seed = 17;
        cfg.train.generator.offset_cap = Some(4.0);
        cfg.data.amplitude = 0.0;
        write_resolved(dir.path(), &cfg).unwrap();
        let back = load(Some(&dir.path().join(RESOLVED_CONFIG))).unwrap();
        assert_eq!(back, cfg);
        write_resolved(dir.path(), &ExperimentConfig::default()).unwrap();
        let back = load(Some(&dir.path().join(RESOLVED_CONFIG))).unwrap();
        assert_eq!(back, ExperimentConfig::default());
    }

    #[test]
    fn partial_files_fill_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[train]\nepochs_phase1 = 3\n[train.generator]\nbase_width = 8\n").unwrap();
        let cfg = load(Some(&path)).unwrap();
        assert_eq!(cfg.train.epochs_phase1, 3);
        assert_eq!(cfg.train.generator.base_width, 8);
        assert_eq!(cfg.train.generator.resnet_blocks, 9);
        fs::write(&path, "[train]\nepochs = 3\n").unwrap();
        assert!(load(Some(&path)).is_err());
    }

    #[test]
    fn shipped_desk_config_parses() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        let cfg = load(Some(&path)).unwrap();
        assert_eq!(cfg.train.total_epochs(), 20);
        assert_eq!(cfg.train.generator.base_width, 8);
        assert_eq!(cfg.train.generator.resnet_blocks, 3);
        assert_eq!(cfg.train.discriminator.base_width, 16);
        assert_eq!(cfg.train.augment, dicycle_core::data::AugmentPolicy::identity());
        cfg.train.validate().unwrap();
    }

    #[test]
    fn epoch_split() {
        assert_eq!(split_epochs(1), (1, 0));
        assert_eq!(split_epochs(20), (10, 10));
        assert_eq!(split_epochs(5), (3, 2));
    }
}
