//! Per-layer sparsity targets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::SelectionPool;
use crate::{Error, Result};

/// Default spread of the adaptive ramp around its mean.
pub const DEFAULT_RAMP_WIDTH: f64 = 0.2;

/// Names of the four built-in configurations, in reporting order.
pub const CONFIG_NAMES: [&str; 4] = ["baseline", "light_sparse", "uniform_sparse", "aggressive_sparse"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    /// Dense attention everywhere.
    Baseline,
    /// The same ratio in every layer; thresholds per head matrix.
    Uniform,
    /// A depth-increasing ramp averaging to the target; one threshold per
    /// layer over the whole batch.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityConfig {
    pub mode: SparsityMode,
    pub target: f64,
    #[serde(default = "default_ramp_width")]
    pub ramp_width: f64,
    pub layers: usize,
}

fn default_ramp_width() -> f64 {
    DEFAULT_RAMP_WIDTH
}

impl SparsityConfig {
    pub fn baseline(layers: usize) -> Self {
        Self {
            mode: SparsityMode::Baseline,
            target: 0.0,
            ramp_width: 0.0,
            layers,
        }
    }

    pub fn uniform(target: f64, layers: usize) -> Self {
        Self {
            mode: SparsityMode::Uniform,
            target,
            ramp_width: 0.0,
            layers,
        }
    }

    pub fn adaptive(target: f64, ramp_width: f64, layers: usize) -> Self {
        Self {
            mode: SparsityMode::Adaptive,
            target,
            ramp_width,
            layers,
        }
    }

    /// Looks up one of [`CONFIG_NAMES`].
    pub fn named(name: &str, layers: usize) -> Option<Self> {
        named_configs(layers).remove(name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("a schedule needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&self.target) {
            return Err(Error::Config(format!(
                "target sparsity must lie in [0, 1), got {}",
                self.target
            )));
        }
        match self.mode {
            SparsityMode::Baseline if self.target != 0.0 => Err(Error::Config(format!(
                "baseline mode requires target 0, got {}",
                self.target
            ))),
            SparsityMode::Adaptive => {
                let limit = 2.0 * self.target.min(1.0 - self.target);
                if !(self.ramp_width == 0.0 || (self.ramp_width > 0.0 && self.ramp_width < limit)) {
                    return Err(Error::Config(format!(
                        "ramp width {} leaves [0, 1) around target {} (must be below {limit})",
                        self.ramp_width, self.target
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Target sparsity per layer, index 0 = first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSchedule {
    pub per_layer: Vec<f64>,
}

impl LayerSchedule {
    pub fn dense(layers: usize) -> Self {
        Self {
            per_layer: vec![0.0; layers],
        }
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.per_layer.iter().sum::<f64>() / self.per_layer.len() as f64
    }
}

/// Expands a config into per-layer ratios.
///
/// The adaptive ramp is `s_l = target - δ/2 + δ·l/(L-1)`, which is symmetric
/// about the target so its mean is the target.
pub fn build_schedule(config: &SparsityConfig) -> Result<LayerSchedule> {
    config.validate()?;
    let layers = config.layers;
    let per_layer = match config.mode {
        SparsityMode::Baseline => vec![0.0; layers],
        SparsityMode::Uniform => vec![config.target; layers],
        SparsityMode::Adaptive if layers == 1 => vec![config.target],
        SparsityMode::Adaptive => {
            let half = config.ramp_width / 2.0;
            let step = config.ramp_width / (layers - 1) as f64;
            (0..layers).map(|l| config.target - half + step * l as f64).collect()
        }
    };
    Ok(LayerSchedule { per_layer })
}

/// The four built-in configurations keyed by name.
pub fn named_configs(layers: usize) -> BTreeMap<&'static str, SparsityConfig> {
    BTreeMap::from([
        ("baseline", SparsityConfig::baseline(layers)),
        ("uniform_sparse", SparsityConfig::uniform(0.8, layers)),
        (
            "light_sparse",
            SparsityConfig::adaptive(0.6, DEFAULT_RAMP_WIDTH, layers),
        ),
        (
            "aggressive_sparse",
            SparsityConfig::adaptive(0.8, DEFAULT_RAMP_WIDTH, layers),
        ),
    ])
}

/// Selection pool used by each layer. Thresholds are recomputed on every
/// forward pass in all modes.
pub fn batch_threshold_mode(config: &SparsityConfig) -> Vec<SelectionPool> {
    let pool = match config.mode {
        SparsityMode::Baseline | SparsityMode::Uniform => SelectionPool::PerHead,
        SparsityMode::Adaptive => SelectionPool::PerLayerBatch,
    };
    vec![pool; config.layers]
}
