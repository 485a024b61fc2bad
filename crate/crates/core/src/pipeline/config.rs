use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClsModelConfig, ClsTrainConfig, TaxonomyScheme};
use crate::datasets::{AugmentConfig, SyntheticConfig};
use crate::error::{Error, Result};
use crate::geometry::DEFAULT_STROKE_WIDTH;
use crate::losses::InstanceLossConfig;
use crate::metrics::MetricsConfig;
use crate::segmentation::{HeadInit, SegModelConfig};

/// Full run configuration; every section and field has a default, so a TOML
/// file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub segmentation: SegTrainConfig,
    pub classifier: ClsStageConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            segmentation: SegTrainConfig::default(),
            classifier: ClsStageConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// TuSimple-layout directory (`label_data.json`, optional
    /// `classes.json`, images relative to it). Synthetic scenes are generated
    /// when unset.
    pub dataset_dir: Option<PathBuf>,
    /// Generator settings. Its `seed` is replaced by the data stream of the
    /// root seed.
    pub synthetic: SyntheticConfig,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            synthetic: SyntheticConfig::default(),
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTrainConfig {
    pub model: SegModelConfig,
    pub loss: InstanceLossConfig,
    pub switch_epoch: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_power: f64,
    pub stroke_width: u32,
    pub head_init: HeadInit,
    pub augment: AugmentConfig,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            model: SegModelConfig::default(),
            loss: InstanceLossConfig::default(),
            switch_epoch: 50,
            epochs: 150,
            batch_size: 8,
            learning_rate: 5e-4,
            lr_power: 0.9,
            stroke_width: DEFAULT_STROKE_WIDTH,
            head_init: HeadInit::default(),
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsStageConfig {
    pub descriptor_size: usize,
    pub scheme: TaxonomyScheme,
    pub conv_blocks: Vec<usize>,
    pub fc_widths: Vec<usize>,
    pub association_threshold_px: f64,
    pub train: ClsTrainConfig,
}

impl Default for ClsStageConfig {
    fn default() -> Self {
        let model = ClsModelConfig::new(64, TaxonomyScheme::TwoClass);
        Self {
            descriptor_size: model.descriptor_size,
            scheme: TaxonomyScheme::TwoClass,
            conv_blocks: model.conv_blocks,
            fc_widths: model.fc_widths,
            association_threshold_px: 20.0,
            train: ClsTrainConfig::default(),
        }
    }
}

impl ClsStageConfig {
    pub fn model_config(&self, descriptor_size: usize, scheme: TaxonomyScheme) -> ClsModelConfig {
        ClsModelConfig {
            descriptor_size,
            num_outputs: scheme.num_outputs(),
            conv_blocks: self.conv_blocks.clone(),
            fc_widths: self.fc_widths.clone(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn seeds(&self) -> Seeds {
        Seeds::from_root(self.seed)
    }
}

/// Independent seeds for each subsystem, all derived from the root seed so a
/// change in one (e.g. the loss sampler) leaves the others untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub seg_init: u64,
    pub loss_sampling: u64,
    pub cls_init: u64,
}

impl Seeds {
    pub fn from_root(root: u64) -> Self {
        Self {
            data: derive_seed(root, &[1]),
            seg_init: derive_seed(root, &[2]),
            loss_sampling: derive_seed(root, &[3]),
            cls_init: derive_seed(root, &[4]),
        }
    }
}

/// Seed for the stream addressed by `path` under `base`.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter().fold(base, |seed, &k| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k.wrapping_add(1));
        rng.next_u64()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.segmentation.learning_rate, 5e-4);
        assert_eq!(cfg.segmentation.epochs, 150);
        assert_eq!(cfg.segmentation.model.input_size, (512, 256));
    }

    #[test]
    fn partial_files_and_unknown_keys() {
        let cfg = PipelineConfig::from_toml(
            "seed = 7\n[segmentation]\nswitch_epoch = 3\n[segmentation.model]\narchitecture = \"mini\"\ninput_size = [128, 64]\nchannels = 5\nwidth_multiplier = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.segmentation.switch_epoch, 3);
        assert_eq!(cfg.segmentation.batch_size, 8);
        assert!(PipelineConfig::from_toml("sed = 1").is_err());
    }

    #[test]
    fn seeds_are_distinct_and_stable() {
        let s = Seeds::from_root(0);
        let all = [s.data, s.seg_init, s.loss_sampling, s.cls_init];
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(all[i], all[j]);
            }
        }
        assert_eq!(Seeds::from_root(0), s);
        assert_ne!(Seeds::from_root(1), s);
        assert_ne!(derive_seed(5, &[1, 2]), derive_seed(5, &[2, 1]));
    }
}
