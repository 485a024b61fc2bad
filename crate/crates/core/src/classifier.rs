//! Second cascade stage: a small convolutional classifier over descriptors,
//! the taxonomy remappings it is trained under, and detection-to-label
//! association.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Module, ModuleT, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::ClassLabel;
use crate::descriptor::{descriptors_to_tensor, Descriptor};
use crate::error::{Error, Result};
use crate::geometry::{average_distance, Polyline};
use crate::nn::{self, Adam, ConvBnRelu, ConvSpec, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaxonomyScheme {
    TwoClass,
    ThreeClass,
    Full,
}

impl TaxonomyScheme {
    pub const ALL: [TaxonomyScheme; 3] = [
        TaxonomyScheme::TwoClass,
        TaxonomyScheme::ThreeClass,
        TaxonomyScheme::Full,
    ];

    pub fn num_outputs(self) -> usize {
        self.class_names().len()
    }

    pub fn class_names(self) -> &'static [&'static str] {
        match self {
            TaxonomyScheme::TwoClass => &["continuous", "dashed"],
            TaxonomyScheme::ThreeClass => &["continuous", "dashed", "double_dashed"],
            TaxonomyScheme::Full => &[
                "single_white_continuous",
                "double_white_continuous",
                "single_yellow_continuous",
                "double_yellow_continuous",
                "dashed",
                "double_dashed",
                "botts_dots",
                "unknown",
            ],
        }
    }

    pub fn token(self) -> &'static str {
        match self {
            TaxonomyScheme::TwoClass => "two_class",
            TaxonomyScheme::ThreeClass => "three_class",
            TaxonomyScheme::Full => "full",
        }
    }
}

impl fmt::Display for TaxonomyScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for TaxonomyScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|scheme| scheme.token() == s)
            .ok_or_else(|| Error::Config(format!("unknown scheme {s:?} (two_class, three_class, full)")))
    }
}

/// Output index of `label` under `scheme`; `None` means the label is ignored.
pub fn remap_class(label: ClassLabel, scheme: TaxonomyScheme) -> Option<usize> {
    use ClassLabel::*;
    match scheme {
        TaxonomyScheme::Full => Some(label.code() as usize),
        TaxonomyScheme::TwoClass | TaxonomyScheme::ThreeClass => match label {
            SingleWhiteContinuous | DoubleWhiteContinuous | SingleYellowContinuous | DoubleYellowContinuous => Some(0),
            Dashed | BottsDots => Some(1),
            DoubleDashed if scheme == TaxonomyScheme::ThreeClass => Some(2),
            DoubleDashed => Some(1),
            Unknown => None,
        },
    }
}

/// Index of the gt boundary closest to `detected` by mean horizontal
/// distance, if that distance is below `threshold_px`. Ties go to the lower
/// index; gt boundaries sharing no row are skipped.
pub fn nearest_gt(detected: &Polyline, gt: &[Polyline], threshold_px: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in gt.iter().enumerate() {
        if let Some(d) = average_distance(detected, g) {
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
    }
    best.filter(|&(_, d)| d < threshold_px).map(|(i, _)| i)
}

/// Class of the gt boundary associated with `detected`, see [`nearest_gt`].
pub fn associate_to_gt(detected: &Polyline, gt: &[(Polyline, ClassLabel)], threshold_px: f64) -> Option<ClassLabel> {
    let lines: Vec<Polyline> = gt.iter().map(|(p, _)| p.clone()).collect();
    nearest_gt(detected, &lines, threshold_px).map(|i| gt[i].1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClsModelConfig {
    pub descriptor_size: usize,
    pub num_outputs: usize,
    pub conv_blocks: Vec<usize>,
    pub fc_widths: Vec<usize>,
}

impl ClsModelConfig {
    pub fn new(descriptor_size: usize, scheme: TaxonomyScheme) -> Self {
        Self {
            descriptor_size,
            num_outputs: scheme.num_outputs(),
            conv_blocks: vec![16, 32, 64, 128],
            fc_widths: vec![64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_outputs < 2 {
            return Err(Error::Config(format!(
                "classifier needs at least 2 outputs, got {}",
                self.num_outputs
            )));
        }
        let factor = 1usize << self.conv_blocks.len();
        if self.descriptor_size == 0 || !self.descriptor_size.is_multiple_of(factor) {
            return Err(Error::Config(format!(
                "descriptor size {} is not divisible by 2^{} = {factor}",
                self.descriptor_size,
                self.conv_blocks.len()
            )));
        }
        if self.conv_blocks.iter().chain(&self.fc_widths).any(|&c| c == 0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

pub struct ClsModel {
    config: ClsModelConfig,
    scheme: TaxonomyScheme,
    store: ParamStore,
    blocks: Vec<ConvBnRelu>,
    fcs: Vec<candle_nn::Linear>,
}

pub fn build_classifier(config: &ClsModelConfig, scheme: TaxonomyScheme, seed: u64) -> Result<ClsModel> {
    ClsModel::new(config, scheme, seed)
}

impl ClsModel {
    pub fn new(config: &ClsModelConfig, scheme: TaxonomyScheme, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.num_outputs != scheme.num_outputs() {
            return Err(Error::Config(format!(
                "{scheme} has {} outputs, config says {}",
                scheme.num_outputs(),
                config.num_outputs
            )));
        }
        let mut store = ParamStore::new(seed);
        let mut cin = 3;
        let mut blocks = Vec::new();
        for (i, &c) in config.conv_blocks.iter().enumerate() {
            blocks.push(ConvBnRelu::new(
                &mut store,
                &format!("block{i}"),
                ConvSpec::square(cin, c, 3, 1),
            )?);
            cin = c;
        }
        let mut fcs = Vec::new();
        for (i, &w) in config.fc_widths.iter().chain([&config.num_outputs]).enumerate() {
            fcs.push(store.linear(&format!("fc{i}"), cin, w)?);
            cin = w;
        }
        Ok(Self {
            config: config.clone(),
            scheme,
            store,
            blocks,
            fcs,
        })
    }

    pub fn config(&self) -> &ClsModelConfig {
        &self.config
    }

    pub fn scheme(&self) -> TaxonomyScheme {
        self.scheme
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Logits `(B, num_outputs)` for a `(B, 3, S, S)` batch.
    pub fn forward_t(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let s = self.config.descriptor_size;
        let (_, c, h, w) = x.dims4()?;
        if (c, h, w) != (3, s, s) {
            return Err(Error::Shape(format!(
                "classifier expects (B, 3, {s}, {s}), got {:?}",
                x.dims()
            )));
        }
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward_t(&h, train)?.max_pool2d(2)?;
        }
        h = nn::global_avg_pool(&h)?;
        let last = self.fcs.len() - 1;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }

    /// Class index and its probability for every descriptor, in one pass.
    pub fn classify(&self, descriptors: &[Descriptor]) -> Result<Vec<(usize, f32)>> {
        if descriptors.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(d) = descriptors.iter().find(|d| d.size != self.config.descriptor_size) {
            return Err(Error::Shape(format!(
                "descriptor size {} does not match classifier size {}",
                d.size, self.config.descriptor_size
            )));
        }
        let logits = self.forward_t(&descriptors_to_tensor(descriptors)?, false)?;
        let probs: Vec<Vec<f32>> = candle_nn::ops::softmax(&logits, 1)?.to_vec2()?;
        Ok(probs
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = i;
                    }
                }
                (best, row[best])
            })
            .collect())
    }

    pub fn save(&self, path: &Path, seg_config_hash: Option<&str>) -> Result<()> {
        let meta = HashMap::from([
            ("kind".to_string(), "classifier".to_string()),
            ("config".to_string(), serde_json::to_string(&self.config)?),
            ("scheme".to_string(), self.scheme.to_string()),
            (
                "seg_config_hash".to_string(),
                seg_config_hash.unwrap_or_default().to_string(),
            ),
        ]);
        nn::save_checkpoint(path, &self.store.snapshot()?, meta)
    }

    /// Loads a classifier and the segmentation config hash it was trained
    /// against (empty when trained without one).
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let (tensors, meta) = nn::load_checkpoint(path)?;
        let bad = |reason: &str| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if meta.get("kind").map(String::as_str) != Some("classifier") {
            return Err(bad("not a classifier checkpoint"));
        }
        let config: ClsModelConfig = serde_json::from_str(meta.get("config").ok_or_else(|| bad("missing config"))?)?;
        let scheme: TaxonomyScheme = meta.get("scheme").ok_or_else(|| bad("missing scheme"))?.parse()?;
        let model = Self::new(&config, scheme, 0)?;
        model.store.restore(&tensors)?;
        Ok((model, meta.get("seg_config_hash").cloned().unwrap_or_default()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClsTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_power: f64,
    pub seed: u64,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 5e-4,
            lr_power: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsTrainReport {
    pub epoch_losses: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub best_epoch: usize,
    pub class_counts: Vec<usize>,
    pub class_weighted: bool,
}

fn weighted_cross_entropy(logits: &Tensor, targets: &Tensor, weights: Option<&Tensor>) -> Result<Tensor> {
    let Some(w) = weights else {
        return Ok(candle_nn::loss::cross_entropy(logits, targets)?);
    };
    let logp = candle_nn::ops::log_softmax(logits, 1)?;
    let nll = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?.neg()?;
    let sw = w.index_select(targets, 0)?;
    Ok(((nll * &sw)?.sum_all()? / sw.sum_all()?)?)
}

fn accuracy_of(model: &ClsModel, data: &[(Descriptor, usize)]) -> Result<f64> {
    let mut hits = 0;
    for chunk in data.chunks(256) {
        let desc: Vec<Descriptor> = chunk.iter().map(|(d, _)| d.clone()).collect();
        let out = model.classify(&desc)?;
        hits += out.iter().zip(chunk).filter(|((p, _), (_, t))| p == t).count();
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Cross-entropy training with Adam and polynomial decay; keeps the weights
/// of the epoch with the best validation accuracy (the last epoch when
/// `val` is empty). When a class has no examples the loss switches to
/// inverse-frequency class weights over the classes that do.
pub fn train_classifier(
    train: &[(Descriptor, usize)],
    val: &[(Descriptor, usize)],
    config: &ClsModelConfig,
    scheme: TaxonomyScheme,
    hp: &ClsTrainConfig,
) -> Result<(ClsModel, ClsTrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some((_, t)) = train.iter().chain(val).find(|(_, t)| *t >= config.num_outputs) {
        return Err(Error::Config(format!("target {t} out of range for {scheme}")));
    }
    let model = ClsModel::new(config, scheme, hp.seed)?;
    let mut class_counts = vec![0usize; config.num_outputs];
    for (_, t) in train {
        class_counts[*t] += 1;
    }
    let class_weighted = class_counts.contains(&0);
    let weights = if class_weighted {
        log::warn!("classes without training examples: {class_counts:?}; weighting by inverse frequency");
        let w: Vec<f32> = class_counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { train.len() as f32 / n as f32 })
            .collect();
        Some(Tensor::new(w, &Device::Cpu)?)
    } else {
        None
    };

    let batch = hp.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);
    let total_steps = steps_per_epoch * hp.epochs;
    let mut opt = Adam::new(model.store.trainable(), hp.learning_rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed_c1a5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = ClsTrainReport {
        epoch_losses: Vec::new(),
        val_accuracy: Vec::new(),
        best_epoch: 0,
        class_counts,
        class_weighted,
    };
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for idx in order.chunks(batch) {
            opt.lr = nn::poly_lr(hp.learning_rate, opt.steps(), total_steps, hp.lr_power);
            let desc: Vec<Descriptor> = idx.iter().map(|&i| train[i].0.clone()).collect();
            let targets: Vec<u32> = idx.iter().map(|&i| train[i].1 as u32).collect();
            let x = descriptors_to_tensor(&desc)?;
            let y = Tensor::new(targets, &Device::Cpu)?;
            let logits = model.forward_t(&x, true)?;
            let loss = weighted_cross_entropy(&logits, &y, weights.as_ref())?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    phase: "classifier".into(),
                    epoch,
                });
            }
            loss_sum += value * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        report.epoch_losses.push(loss_sum / train.len() as f64);
        let acc = if val.is_empty() {
            None
        } else {
            Some(accuracy_of(&model, val)?)
        };
        report.val_accuracy.push(acc);
        log::info!(
            "classifier epoch {epoch}: loss {:.4} val acc {acc:?}",
            report.epoch_losses[epoch]
        );
        if let Some(a) = acc {
            if best.as_ref().is_none_or(|(b, _)| a > *b) {
                best = Some((a, model.store.snapshot()?));
                report.best_epoch = epoch;
            }
        } else {
            report.best_epoch = epoch;
        }
    }
    if let Some((_, snapshot)) = best {
        model.store.restore(&snapshot.into_iter().collect())?;
    }
    Ok((model, report))
}
