use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClsModel, TaxonomyScheme};
use crate::descriptor::batch_descriptors;
use crate::error::{Error, Result};
use crate::geometry::Polyline;
use crate::losses::Phase;
use crate::segmentation::{decode_instances, resize_to_input, SegModel, INSTANCE_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeBoundary {
    /// Segmentation channel the boundary was decoded from (1..=K_MAX).
    pub instance_id: u8,
    /// Row-averaged points in the coordinates of the input image.
    pub polyline: Polyline,
    pub class_index: usize,
    pub class_name: String,
    pub confidence: f32,
}

/// Wall-clock milliseconds per stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub preprocess_ms: f64,
    pub segmentation_ms: f64,
    pub descriptor_ms: f64,
    pub classification_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeResult {
    pub boundaries: Vec<CascadeBoundary>,
    pub timings: StageTimings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CascadeOptions {
    pub min_points: usize,
    /// Descriptor size the caller expects; checked against the classifier.
    pub descriptor_size: Option<usize>,
}

impl Default for CascadeOptions {
    fn default() -> Self {
        Self {
            min_points: 3,
            descriptor_size: None,
        }
    }
}

/// Segmentation and classification models checked for compatibility, with a
/// counter of network invocations.
pub struct Cascade {
    seg: SegModel,
    cls: ClsModel,
    min_points: usize,
    invocations: AtomicUsize,
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

impl Cascade {
    /// `cls_seg_hash` is the segmentation config hash recorded when the
    /// classifier was trained; empty skips that check.
    pub fn new(
        seg: SegModel,
        seg_phase: Phase,
        cls: ClsModel,
        cls_seg_hash: &str,
        options: CascadeOptions,
    ) -> Result<Self> {
        if seg_phase != Phase::Instance || seg.head_channels() != INSTANCE_CHANNELS {
            return Err(Error::Incompatible(format!(
                "segmentation model is from the {seg_phase} phase with {} output channels; \
                 inference needs an instance-phase model",
                seg.head_channels()
            )));
        }
        if !cls_seg_hash.is_empty() && cls_seg_hash != seg.config().hash() {
            return Err(Error::Incompatible(
                "classifier was trained on detections of a different segmentation configuration".into(),
            ));
        }
        let s = cls.config().descriptor_size;
        if let Some(expected) = options.descriptor_size.filter(|&e| e != s) {
            return Err(Error::Incompatible(format!(
                "descriptor size {expected} requested but the classifier takes {s}"
            )));
        }
        if options.min_points == 0 {
            return Err(Error::Config("min_points must be >= 1".into()));
        }
        Ok(Self {
            seg,
            cls,
            min_points: options.min_points,
            invocations: AtomicUsize::new(0),
        })
    }

    pub fn open(seg_path: &Path, cls_path: &Path, options: CascadeOptions) -> Result<Self> {
        let (seg, phase) = SegModel::load(seg_path)?;
        let (cls, hash) = ClsModel::load(cls_path)?;
        Self::new(seg, phase, cls, &hash, options)
    }

    pub fn scheme(&self) -> TaxonomyScheme {
        self.cls.scheme()
    }

    pub fn segmentation(&self) -> &SegModel {
        &self.seg
    }

    pub fn classifier(&self) -> &ClsModel {
        &self.cls
    }

    /// Total network forward passes made so far.
    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }

    /// One segmentation pass, then one classifier pass over all detected
    /// boundaries at once (skipped when nothing was detected).
    pub fn infer(&self, image: &RgbImage) -> Result<CascadeResult> {
        self.infer_with_network_lanes(image).map(|(r, _)| r)
    }

    /// As [`Cascade::infer`], also returning each boundary's polyline in
    /// network coordinates.
    pub fn infer_with_network_lanes(&self, image: &RgbImage) -> Result<(CascadeResult, Vec<Polyline>)> {
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let input_size = self.seg.config().input_size;
        let resized = resize_to_input(image, input_size);
        timings.preprocess_ms = elapsed_ms(t);

        let t = Instant::now();
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let output = self.seg.predict(std::slice::from_ref(&resized))?.remove(0);
        let (ow, oh) = image.dimensions();
        let sx = ow as f64 / input_size.0 as f64;
        let sy = oh as f64 / input_size.1 as f64;
        // keep only boundaries that still have enough rows in image coordinates
        let instances: Vec<_> = decode_instances(&output, self.min_points)
            .into_iter()
            .map(|d| {
                let scaled = d.polyline.scaled(sx, sy);
                (d, scaled)
            })
            .filter(|(_, p)| p.len() >= self.min_points)
            .collect();
        timings.segmentation_ms = elapsed_ms(t);

        let t = Instant::now();
        let pixels: Vec<Vec<(u32, u32)>> = instances.iter().map(|(d, _)| d.pixels.clone()).collect();
        let descriptors = batch_descriptors(&resized, &pixels, self.cls.config().descriptor_size)?;
        timings.descriptor_ms = elapsed_ms(t);

        let t = Instant::now();
        if !descriptors.is_empty() {
            self.invocations.fetch_add(1, Ordering::Relaxed);
        }
        let classes = self.cls.classify(&descriptors)?;
        timings.classification_ms = elapsed_ms(t);

        let names = self.cls.scheme().class_names();
        let mut network_lanes = Vec::with_capacity(instances.len());
        let boundaries = instances
            .into_iter()
            .zip(classes)
            .map(|((d, polyline), (class_index, confidence))| {
                network_lanes.push(d.polyline);
                CascadeBoundary {
                    instance_id: d.instance_id,
                    polyline,
                    class_index,
                    class_name: names[class_index].to_string(),
                    confidence,
                }
            })
            .collect();
        Ok((CascadeResult { boundaries, timings }, network_lanes))
    }
}
