use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{derive_seed, PipelineConfig, Seeds, SegTrainConfig};
use super::evaluate::{evaluate_segmentation, predict_instances};
use crate::classifier::{
    nearest_gt, remap_class, train_classifier, ClsModel, ClsTrainConfig, ClsTrainReport, TaxonomyScheme,
};
use crate::datasets::{augment, read_dataset, ClassLabel, Sample, SyntheticConfig};
use crate::descriptor::{extract_descriptor, Descriptor};
use crate::error::{Error, Result};
use crate::geometry::{rasterize_boundaries, InstanceMap, Polyline};
use crate::losses::{binary_phase_loss, curriculum_step, CurriculumState, InstanceLossOp, Phase};
use crate::metrics::{ablate_descriptor_sizes, classification_accuracy, AblationTable, MetricsConfig};
use crate::nn::{self, Adam};
use crate::segmentation::{
    images_to_tensor, resize_to_input, DecodedInstance, SegModel, BINARY_CHANNELS, INSTANCE_CHANNELS,
};

/// A sample resized to the network input, with its rasterized target.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSample {
    pub source_id: String,
    pub image: RgbImage,
    /// Boundaries in network coordinates.
    pub boundaries: Vec<Polyline>,
    pub classes: Vec<ClassLabel>,
    pub map: InstanceMap,
    pub original_size: (u32, u32),
    pub original_boundaries: Vec<Polyline>,
}

impl PreparedSample {
    pub fn new(image: &RgbImage, sample: &Sample, input_size: (u32, u32), stroke_width: u32) -> Result<Self> {
        let original_size = image.dimensions();
        let sx = input_size.0 as f64 / original_size.0 as f64;
        let sy = input_size.1 as f64 / original_size.1 as f64;
        let boundaries: Vec<Polyline> = sample.boundaries.iter().map(|p| p.scaled(sx, sy)).collect();
        let map = rasterize_boundaries(&boundaries, stroke_width, input_size)?;
        Ok(Self {
            source_id: sample.source_id.clone(),
            image: resize_to_input(image, input_size),
            boundaries,
            classes: sample.classes.clone(),
            map,
            original_size,
            original_boundaries: sample.boundaries.clone(),
        })
    }

    /// Gt boundaries paired with their classes.
    pub fn labeled(&self) -> Vec<(Polyline, ClassLabel)> {
        self.boundaries
            .iter()
            .cloned()
            .zip(self.classes.iter().copied())
            .collect()
    }
}

/// Loads the configured dataset with pixels in memory: the TuSimple directory
/// when set, generated scenes otherwise.
pub fn load_samples(cfg: &PipelineConfig) -> Result<Vec<Sample>> {
    match &cfg.data.dataset_dir {
        Some(dir) => {
            let mut samples = read_dataset(dir)?;
            samples.par_iter_mut().try_for_each(|s| s.materialize(dir))?;
            Ok(samples)
        }
        None => SyntheticConfig {
            seed: cfg.seeds().data,
            ..cfg.data.synthetic.clone()
        }
        .generate(),
    }
}

pub fn prepare_samples(samples: &[Sample], cfg: &SegTrainConfig) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            let img = s
                .image
                .loaded()
                .ok_or_else(|| Error::Config(format!("{}: image not loaded", s.source_id)))?;
            PreparedSample::new(img, s, cfg.model.input_size, cfg.stroke_width)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegTrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_accuracy: Option<f64>,
}

impl SegTrainReport {
    pub fn phase_losses(&self, phase: Phase) -> Vec<f64> {
        self.epochs
            .iter()
            .filter(|e| e.phase == phase)
            .map(|e| e.loss)
            .collect()
    }
}

pub const SEG_CHECKPOINT: &str = "seg.safetensors";
pub const SEG_STATE: &str = "seg_state.safetensors";
pub const CLS_CHECKPOINT: &str = "cls.safetensors";

fn phase_epochs(cfg: &SegTrainConfig, phase: Phase) -> usize {
    let binary = cfg.switch_epoch.min(cfg.epochs);
    match phase {
        Phase::Binary => binary,
        Phase::Instance => cfg.epochs - binary,
    }
}

fn save_state(path: &Path, model: &SegModel, opt: &Adam, epoch: usize, report: &SegTrainReport) -> Result<()> {
    let (mut tensors, step) = opt.state();
    tensors.extend(model.store().snapshot()?);
    let meta = HashMap::from([
        ("kind".to_string(), "seg_train_state".to_string()),
        ("config".to_string(), serde_json::to_string(model.config())?),
        ("epoch".to_string(), epoch.to_string()),
        ("head_channels".to_string(), model.head_channels().to_string()),
        ("adam_step".to_string(), step.to_string()),
        ("report".to_string(), serde_json::to_string(report)?),
    ]);
    nn::save_checkpoint(path, &tensors, meta)
}

struct Resumed {
    model: SegModel,
    opt: Adam,
    epoch: usize,
    report: SegTrainReport,
}

fn load_state(path: &Path, cfg: &SegTrainConfig, seeds: &Seeds) -> Result<Resumed> {
    let (mut tensors, meta) = nn::load_checkpoint(path)?;
    let bad = |reason: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if meta.get("kind").map(String::as_str) != Some("seg_train_state") {
        return Err(bad("not a segmentation training state"));
    }
    if meta.get("config") != Some(&serde_json::to_string(&cfg.model)?) {
        return Err(bad("model configuration differs from the one being trained"));
    }
    let num = |key: &str| -> Result<usize> {
        meta.get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(&format!("missing {key}")))
    };
    let report: SegTrainReport = serde_json::from_str(meta.get("report").ok_or_else(|| bad("missing report"))?)?;
    let model = SegModel::new(&cfg.model, seeds.seg_init, num("head_channels")?)?;
    let adam: HashMap<String, Tensor> = tensors
        .keys()
        .filter(|k| k.starts_with("adam."))
        .cloned()
        .collect::<Vec<_>>()
        .into_iter()
        .filter_map(|k| tensors.remove_entry(&k))
        .collect();
    model.store().restore(&tensors)?;
    let mut opt = Adam::new(model.trainable(), cfg.learning_rate)?;
    opt.restore(&adam, num("adam_step")?)?;
    Ok(Resumed {
        model,
        opt,
        epoch: num("epoch")?,
        report,
    })
}

/// Two-phase training: binary cross entropy on a 2-channel head until
/// `switch_epoch`, then the pairwise instance loss on a `K_MAX + 1` head.
///
/// With `out_dir`, the best instance-phase weights (by validation accuracy)
/// go to [`SEG_CHECKPOINT`] and the full training state after every epoch to
/// [`SEG_STATE`]; `resume` continues from such a state. The returned model
/// holds the best weights.
pub fn train_segmentation(
    cfg: &SegTrainConfig,
    metrics: &MetricsConfig,
    seeds: &Seeds,
    train: &[PreparedSample],
    val: &[PreparedSample],
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<(SegModel, SegTrainReport)> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.loss.validate()?;
    if cfg.switch_epoch == 0 {
        log::warn!("switch_epoch is 0: skipping the binary phase, instance loss from the start");
    }
    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = train.len().div_ceil(batch);

    let (mut model, mut opt, mut state, start, mut report) = match resume {
        Some(path) => {
            let r = load_state(path, cfg, seeds)?;
            let state = CurriculumState {
                phase: curriculum_step(&CurriculumState::new(cfg.switch_epoch), r.epoch)
                    .state
                    .phase,
                epoch: r.epoch,
                switch_epoch: cfg.switch_epoch,
            };
            log::info!("resuming after epoch {}", r.epoch);
            (r.model, r.opt, state, r.epoch + 1, r.report)
        }
        None => {
            let state = CurriculumState::new(cfg.switch_epoch);
            let channels = match state.phase {
                Phase::Binary => BINARY_CHANNELS,
                Phase::Instance => INSTANCE_CHANNELS,
            };
            let model = SegModel::new(&cfg.model, seeds.seg_init, channels)?;
            let opt = Adam::new(model.trainable(), cfg.learning_rate)?;
            (model, opt, state, 0, SegTrainReport::default())
        }
    };
    let mut best: Option<HashMap<String, Tensor>> = match (report.best_epoch, out_dir) {
        (Some(_), Some(dir)) => Some(nn::load_checkpoint(&dir.join(SEG_CHECKPOINT))?.0),
        _ => None,
    };

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in start..cfg.epochs {
        let step = curriculum_step(&state, epoch);
        if step.reinit_head {
            log::info!("epoch {epoch}: switching to the instance loss");
            model.replace_head(INSTANCE_CHANNELS, cfg.head_init, derive_seed(seeds.seg_init, &[1]))?;
            opt = Adam::new(model.trainable(), cfg.learning_rate)?;
        }
        state = step.state;
        let phase = state.phase;
        let total_steps = steps_per_epoch * phase_epochs(cfg, phase);

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seeds.data, &[0x5e9, epoch as u64]));
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(batch).enumerate() {
            let mut images = Vec::with_capacity(idx.len());
            let mut maps = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &train[i];
                if cfg.augment.horizontal_flip || cfg.augment.brightness_jitter > 0.0 {
                    let (img, lanes) = augment(&s.image, &s.boundaries, &cfg.augment, &mut rng);
                    maps.push(rasterize_boundaries(&lanes, cfg.stroke_width, cfg.model.input_size)?);
                    images.push(img);
                } else {
                    images.push(s.image.clone());
                    maps.push(s.map.clone());
                }
            }
            opt.lr = nn::poly_lr(cfg.learning_rate, opt.steps(), total_steps, cfg.lr_power);
            let x = images_to_tensor(&images, cfg.model.input_size)?;
            let logits = model.forward_t(&x, true)?;
            let loss = match phase {
                Phase::Binary => {
                    let (w, h) = cfg.model.input_size;
                    let mask: Vec<u32> = maps.iter().flat_map(|m| m.binary()).map(u32::from).collect();
                    let mask = Tensor::from_vec(mask, (maps.len(), h as usize, w as usize), &Device::Cpu)?;
                    binary_phase_loss(&logits, &mask)?
                }
                Phase::Instance => InstanceLossOp {
                    seeds: (0..maps.len())
                        .map(|i| derive_seed(seeds.loss_sampling, &[epoch as u64, b as u64, i as u64]))
                        .collect(),
                    maps,
                    config: cfg.loss,
                }
                .loss(&logits)?,
            };
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::Divergence {
                    phase: phase.to_string(),
                    epoch,
                });
            }
            loss_sum += value * idx.len() as f64;
            opt.backward_step(&loss)?;
        }
        let loss = loss_sum / train.len() as f64;

        let val_accuracy = if phase == Phase::Instance && !val.is_empty() {
            Some(evaluate_segmentation(&model, val, metrics)?.accuracy)
        } else {
            None
        };
        log::info!("epoch {epoch} [{phase}] loss {loss:.5} val accuracy {val_accuracy:?}");
        report.epochs.push(EpochLog {
            epoch,
            phase,
            loss,
            val_accuracy,
        });
        let improved = phase == Phase::Instance
            && match (val_accuracy, report.best_val_accuracy) {
                (Some(a), Some(b)) => a > b,
                (Some(_), None) => true,
                (None, _) => true,
            };
        if improved {
            report.best_epoch = Some(epoch);
            report.best_val_accuracy = val_accuracy;
            best = Some(model.store().snapshot()?.into_iter().collect());
            if let Some(dir) = out_dir {
                model.save(&dir.join(SEG_CHECKPOINT), Phase::Instance)?;
            }
        }
        if let Some(dir) = out_dir {
            save_state(&dir.join(SEG_STATE), &model, &opt, epoch, &report)?;
        }
    }

    match best {
        Some(weights) => model.store().restore(&weights)?,
        None => {
            if let Some(dir) = out_dir {
                model.save(&dir.join(SEG_CHECKPOINT), state.phase)?;
            }
        }
    }
    Ok((model, report))
}

/// Gt class of every detection (by average distance, see
/// [`crate::classifier::associate_to_gt`]), `None` when unassociated.
pub fn associate_detections(
    samples: &[PreparedSample],
    detections: &[Vec<DecodedInstance>],
    threshold_px: f64,
) -> Vec<Vec<Option<ClassLabel>>> {
    samples
        .iter()
        .zip(detections)
        .map(|(s, dets)| {
            dets.iter()
                .map(|d| nearest_gt(&d.polyline, &s.boundaries, threshold_px).map(|i| s.classes[i]))
                .collect()
        })
        .collect()
}

/// A descriptor with its class index under the scheme.
pub type LabelledDescriptor = (Descriptor, usize);

/// `{descriptor, output index}` pairs for associated detections whose label
/// the scheme does not ignore, plus those labels.
pub fn descriptor_pairs(
    samples: &[PreparedSample],
    detections: &[Vec<DecodedInstance>],
    labels: &[Vec<Option<ClassLabel>>],
    size: usize,
    scheme: TaxonomyScheme,
) -> Result<(Vec<LabelledDescriptor>, Vec<ClassLabel>)> {
    let mut pairs = Vec::new();
    let mut kept = Vec::new();
    for ((s, dets), labs) in samples.iter().zip(detections).zip(labels) {
        for (i, (d, label)) in dets.iter().zip(labs).enumerate() {
            let Some(label) = *label else { continue };
            let Some(target) = remap_class(label, scheme) else {
                continue;
            };
            let desc = extract_descriptor(&s.image, &d.pixels, size).map_err(|e| Error::Boundary {
                index: i,
                source: Box::new(e),
            })?;
            pairs.push((Descriptor { boundary: i, ..desc }, target));
            kept.push(label);
        }
    }
    Ok((pairs, kept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsStageReport {
    pub detections: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    pub pairs_per_class: Vec<usize>,
    pub training: ClsTrainReport,
}

/// Runs the segmentation model over the splits, associates detections with
/// gt labels and trains the classifier on the resulting descriptors.
pub fn train_classification(
    cfg: &PipelineConfig,
    seg: &SegModel,
    train: &[PreparedSample],
    val: &[PreparedSample],
) -> Result<(ClsModel, ClsStageReport)> {
    let stage = &cfg.classifier;
    let min_points = cfg.metrics.min_points;
    let threshold = stage.association_threshold_px;
    let det_train = predict_instances(seg, train, min_points)?;
    let det_val = predict_instances(seg, val, min_points)?;
    let lab_train = associate_detections(train, &det_train, threshold);
    let lab_val = associate_detections(val, &det_val, threshold);
    let (train_pairs, _) = descriptor_pairs(train, &det_train, &lab_train, stage.descriptor_size, stage.scheme)?;
    let (val_pairs, _) = descriptor_pairs(val, &det_val, &lab_val, stage.descriptor_size, stage.scheme)?;
    let detections = det_train.iter().map(Vec::len).sum();
    if train_pairs.is_empty() {
        return Err(Error::EmptyAssociation {
            detections,
            threshold_px: threshold,
        });
    }
    let mut pairs_per_class = vec![0; stage.scheme.num_outputs()];
    for (_, t) in &train_pairs {
        pairs_per_class[*t] += 1;
    }
    log::info!(
        "classifier pairs: train {} val {} per class {pairs_per_class:?}",
        train_pairs.len(),
        val_pairs.len()
    );
    let hp = ClsTrainConfig {
        seed: cfg.seeds().cls_init,
        ..stage.train
    };
    let model_cfg = stage.model_config(stage.descriptor_size, stage.scheme);
    let (model, training) = train_classifier(&train_pairs, &val_pairs, &model_cfg, stage.scheme, &hp)?;
    Ok((
        model,
        ClsStageReport {
            detections,
            train_pairs: train_pairs.len(),
            val_pairs: val_pairs.len(),
            pairs_per_class,
            training,
        },
    ))
}

/// Trains and scores one classifier per (size, scheme). Detections and their
/// associations are computed once and shared by every cell.
pub fn run_ablation(
    cfg: &PipelineConfig,
    seg: &SegModel,
    train: &[PreparedSample],
    val: &[PreparedSample],
    sizes: &[usize],
    schemes: &[TaxonomyScheme],
) -> Result<AblationTable> {
    let stage = &cfg.classifier;
    let threshold = stage.association_threshold_px;
    let det_train = predict_instances(seg, train, cfg.metrics.min_points)?;
    let det_val = predict_instances(seg, val, cfg.metrics.min_points)?;
    let lab_train = associate_detections(train, &det_train, threshold);
    let lab_val = associate_detections(val, &det_val, threshold);
    let hp = ClsTrainConfig {
        seed: cfg.seeds().cls_init,
        ..stage.train
    };
    Ok(ablate_descriptor_sizes(sizes, schemes, |size, scheme| {
        let (train_pairs, _) = descriptor_pairs(train, &det_train, &lab_train, size, scheme)?;
        let (val_pairs, val_labels) = descriptor_pairs(val, &det_val, &lab_val, size, scheme)?;
        if train_pairs.is_empty() {
            return Err(Error::EmptyAssociation {
                detections: det_train.iter().map(Vec::len).sum(),
                threshold_px: threshold,
            });
        }
        let model_cfg = stage.model_config(size, scheme);
        let (model, _) = train_classifier(&train_pairs, &val_pairs, &model_cfg, scheme, &hp)?;
        let descs: Vec<Descriptor> = val_pairs.into_iter().map(|(d, _)| d).collect();
        let preds: Vec<usize> = model.classify(&descs)?.into_iter().map(|(c, _)| c).collect();
        classification_accuracy(&preds, &val_labels, scheme)
    }))
}
