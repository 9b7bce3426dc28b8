//! Experiment configuration: one TOML file drives every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nas::Metric;
use crate::sidechannels::ChannelId;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {msg}")]
    Read { path: String, msg: String },
    #[error("config: {0}")]
    Invalid(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct PathsConfig {
    pub measurements: Option<PathBuf>,
    pub buildings: Option<PathBuf>,
    pub dsm: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub origin_east: f64,
    pub origin_north: f64,
    pub cell_m: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            origin_lat: 45.19,
            origin_lon: 5.71,
            origin_east: 0.0,
            origin_north: 0.0,
            cell_m: 10.0,
            width: 96,
            height: 96,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessConfig {
    pub rssi_ceiling_dbm: f64,
    pub static_window_min: f64,
    pub min_count: u32,
    pub drop_fraction: f64,
    pub val_fraction: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            rssi_ceiling_dbm: -55.0,
            static_window_min: 30.0,
            min_count: 3,
            drop_fraction: 0.10,
            val_fraction: 0.10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TilesConfig {
    pub tile: usize,
    pub stride: usize,
    pub min_label_fraction: f64,
}

impl Default for TilesConfig {
    fn default() -> Self {
        TilesConfig {
            tile: 96,
            stride: 20,
            min_label_fraction: 0.03,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NasConfig {
    pub population: usize,
    pub generations: usize,
    pub metric: Metric,
    pub budget_epochs: usize,
    pub workers: usize,
}

impl Default for NasConfig {
    fn default() -> Self {
        NasConfig {
            population: 20,
            generations: 25,
            metric: Metric::Mae,
            budget_epochs: 2,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub scenario: u8,
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            scenario: 1,
            lr: 1e-3,
            batch: 16,
            epochs: 50,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub radii_m: Vec<f64>,
    pub bin_width_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            radii_m: vec![200.0, 400.0, 800.0],
            bin_width_m: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: [usize; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: [32, 64, 128, 256],
        }
    }
}

/// Everything a run needs, reproducible from this file plus the seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub preprocess: PreprocessConfig,
    #[serde(default = "default_channels")]
    pub channels: Vec<String>,
    #[serde(default)]
    pub tiles: TilesConfig,
    #[serde(default)]
    pub nas: NasConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

fn default_channels() -> Vec<String> {
    vec!["msm".into(), "dist".into(), "elev".into()]
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.channels.is_empty() {
            return Err(ConfigError::Invalid("channels must not be empty".into()));
        }
        for c in &self.channels {
            if ChannelId::from_name(c).is_none() {
                return Err(ConfigError::Invalid(format!("unknown channel `{c}`")));
            }
        }
        if ChannelId::from_name(&self.channels[0]) != Some(ChannelId::Measurements) {
            return Err(ConfigError::Invalid(
                "the first channel must be `msm` (measurements)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.preprocess.drop_fraction) {
            return Err(ConfigError::Invalid(format!(
                "drop_fraction must be in [0, 1), got {}",
                self.preprocess.drop_fraction
            )));
        }
        if self.tiles.tile == 0 || self.tiles.stride == 0 {
            return Err(ConfigError::Invalid("tile and stride must be positive".into()));
        }
        if self.tiles.tile % crate::nn::DOWNSAMPLE_FACTOR != 0 {
            return Err(ConfigError::Invalid(format!(
                "tile size must be a multiple of {}",
                crate::nn::DOWNSAMPLE_FACTOR
            )));
        }
        Ok(())
    }

    /// Check that every referenced input path exists.
    pub fn check_paths(&self) -> Result<(), ConfigError> {
        for p in [&self.paths.measurements, &self.paths.buildings, &self.paths.dsm]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(ConfigError::MissingPath(p.display().to_string()));
            }
        }
        Ok(())
    }

    pub fn channel_ids(&self) -> Vec<ChannelId> {
        self.channels
            .iter()
            .map(|c| ChannelId::from_name(c).expect("validated"))
            .collect()
    }

    /// FNV-1a over the canonical serialized form, for run manifests.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).unwrap_or_default();
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        h
    }
}

/// Written next to every command's outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: format!("{:016x}", config.hash()),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("seed = 7\n[paths]\nworkdir = \"w\"\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.preprocess.min_count, 3);
        assert_eq!(cfg.tiles.tile, 96);
        assert_eq!(cfg.nas.population, 20);
        assert_eq!(cfg.eval.radii_m, vec![200.0, 400.0, 800.0]);
        assert_eq!(cfg.channels, vec!["msm", "dist", "elev"]);
        assert_eq!(
            cfg.channel_ids(),
            vec![ChannelId::Measurements, ChannelId::Distance, ChannelId::Elevation]
        );
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(ExperimentConfig::from_toml("").is_err()); // seed mandatory
        let bad_channel = "seed = 1\nchannels = [\"msm\", \"bogus\"]\n";
        assert!(ExperimentConfig::from_toml(bad_channel).is_err());
        let no_msm = "seed = 1\nchannels = [\"dist\"]\n";
        assert!(ExperimentConfig::from_toml(no_msm).is_err());
        let bad_tile = "seed = 1\n[tiles]\ntile = 50\nstride = 10\nmin_label_fraction = 0.03\n";
        assert!(ExperimentConfig::from_toml(bad_tile).is_err());
        let bad_drop = "seed = 1\n[preprocess]\nrssi_ceiling_dbm = -55\nstatic_window_min = 30\nmin_count = 3\ndrop_fraction = 1.0\nval_fraction = 0.1\n";
        assert!(ExperimentConfig::from_toml(bad_drop).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml("seed = 7\n").unwrap();
        let b = ExperimentConfig::from_toml("seed = 7\n").unwrap();
        let c = ExperimentConfig::from_toml("seed = 8\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn missing_paths_are_reported() {
        let mut cfg = ExperimentConfig::from_toml("seed = 1\n").unwrap();
        cfg.paths.measurements = Some(PathBuf::from("/definitely/not/here.csv"));
        assert!(matches!(cfg.check_paths(), Err(ConfigError::MissingPath(_))));
    }
}
