//! Pipeline configuration file (TOML). Every key is optional; missing keys
//! take the defaults below, unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stgraph::geo::SUPPORTED_RESOLUTIONS;
use stgraph::graph::{DEFAULT_DIST_KM, DEFAULT_SPLIT, DEFAULT_WINDOW_H};
use stgraph::models::{Arch, ModelConfig};
use stgraph::synth::SynthParams;
use stgraph::training::{
    Grid, TrainConfig, DEFAULT_DROPOUT, DEFAULT_EPOCHS, DEFAULT_HIDDEN, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};
use stgraph::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed for balancing, splits and training runs.
    pub seed: u64,
    pub synth: SynthParams,
    pub graph: GraphSection,
    pub train: TrainSection,
    pub grid: GridSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            synth: SynthParams::default(),
            graph: GraphSection::default(),
            train: TrainSection::default(),
            grid: GridSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    /// Fine graph: maximum great-circle distance between linked crashes.
    pub dist_km: f64,
    /// Fine graph: maximum time gap between linked crashes, hours.
    pub window_h: f64,
    /// Coarse graph: hexagon resolution.
    pub resolution: u8,
    /// Train, validation and test fractions.
    pub split: [f64; 3],
    /// Split each class separately.
    pub stratified: bool,
    /// Precomputed narrative embeddings (`id,e0,…,e383`); hashed
    /// embeddings are used when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

impl Default for GraphSection {
    fn default() -> Self {
        let (a, b, c) = DEFAULT_SPLIT;
        Self {
            dist_km: DEFAULT_DIST_KM,
            window_h: DEFAULT_WINDOW_H,
            resolution: 7,
            split: [a, b, c],
            stratified: false,
            embeddings: None,
        }
    }
}

impl GraphSection {
    pub fn ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub arch: Arch,
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub dropout: f64,
    pub temporal_kernel: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            arch: Arch::Dstgcn,
            hidden_dim: DEFAULT_HIDDEN,
            num_blocks: 2,
            dropout: DEFAULT_DROPOUT,
            temporal_kernel: 3,
            lr: DEFAULT_LR,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            epochs: DEFAULT_EPOCHS,
        }
    }
}

impl TrainSection {
    /// Unseeded training config; callers derive the run seed.
    pub fn to_config(self) -> TrainConfig {
        TrainConfig {
            model: ModelConfig {
                arch: self.arch,
                hidden_dim: self.hidden_dim,
                num_blocks: self.num_blocks,
                dropout: self.dropout,
                temporal_kernel: self.temporal_kernel,
            },
            lr: self.lr,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub hidden_dim: Vec<usize>,
    pub dropout: Vec<f64>,
    pub lr: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub epochs: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = Grid::default_for(Arch::Dstgcn);
        Self {
            hidden_dim: g.hidden_dim,
            dropout: g.dropout,
            lr: g.lr,
            weight_decay: g.weight_decay,
            epochs: g.epochs,
        }
    }
}

impl GridSection {
    pub fn to_grid(&self, train: &TrainSection) -> Grid {
        Grid {
            arch: train.arch,
            hidden_dim: self.hidden_dim.clone(),
            dropout: self.dropout.clone(),
            lr: self.lr.clone(),
            weight_decay: self.weight_decay.clone(),
            epochs: self.epochs,
            num_blocks: train.num_blocks,
            temporal_kernel: train.temporal_kernel,
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// The defaults rendered as a config file.
    pub fn default_toml() -> String {
        toml::to_string(&Self::default()).expect("defaults serialize")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        let g = &self.graph;
        if !(g.dist_km > 0.0) || !(g.window_h > 0.0) {
            return Err(Error::Config(
                "graph.dist_km and graph.window_h must be positive".into(),
            ));
        }
        if !SUPPORTED_RESOLUTIONS.contains(&g.resolution) {
            return Err(Error::Config(format!(
                "graph.resolution {} outside {:?}",
                g.resolution, SUPPORTED_RESOLUTIONS
            )));
        }
        if g.split.iter().any(|r| !(*r >= 0.0)) || (g.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "graph.split {:?} must be non-negative and sum to 1",
                g.split
            )));
        }
        self.train.to_config().validate()?;
        let grid = &self.grid;
        if grid.hidden_dim.is_empty() || grid.dropout.is_empty() || grid.lr.is_empty() || grid.weight_decay.is_empty() {
            return Err(Error::Config("grid lists must be non-empty".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let text = PipelineConfig::default_toml();
        assert_eq!(PipelineConfig::parse(&text).unwrap(), PipelineConfig::default());
        assert!(text.contains("dist_km = 30.0"));
        assert!(text.contains("resolution = 7"));
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c =
            PipelineConfig::parse("seed = 7\n[train]\narch = \"gat\"\nlr = 0.01\n[synth]\nn_records = 100\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.arch, Arch::Gat);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.hidden_dim, DEFAULT_HIDDEN);
        assert_eq!(c.synth.n_records, 100);
        assert_eq!(c.synth.n_hotspots, SynthParams::default().n_hotspots);
        assert_eq!(c.graph, GraphSection::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::parse("sed = 1\n").is_err());
        assert!(PipelineConfig::parse("[train]\nlearning_rate = 0.1\n").is_err());
        assert!(PipelineConfig::parse("[graph]\ndist = 3\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let mut c = PipelineConfig::default();
        assert!(c.validate().is_ok());
        c.graph.split = [0.5, 0.2, 0.1];
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = PipelineConfig::default();
        c.train.dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::default();
        c.graph.resolution = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
