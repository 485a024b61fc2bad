use super::cascade::Cascade;
use super::train::PreparedSample;
use crate::classifier::{nearest_gt, remap_class};
use crate::error::{Error, Result};
use crate::geometry::Polyline;
use crate::metrics::{match_lanes, EvalResolution, ImageCounts, ImageReport, MetricsConfig, MetricsReport};
use crate::segmentation::{decode_instances, DecodedInstance, SegModel};

const PREDICT_BATCH: usize = 8;

/// Decoded instances for every sample, batching the forward passes.
pub fn predict_instances(
    model: &SegModel,
    samples: &[PreparedSample],
    min_points: usize,
) -> Result<Vec<Vec<DecodedInstance>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(PREDICT_BATCH) {
        let images: Vec<_> = chunk.iter().map(|s| s.image.clone()).collect();
        for o in model.predict(&images)? {
            out.push(decode_instances(&o, min_points));
        }
    }
    Ok(out)
}

/// Sorted union of the rows of `lanes`.
fn row_union(lanes: &[Polyline]) -> Vec<i32> {
    let mut rows: Vec<i32> = lanes.iter().flat_map(|p| p.rows().to_vec()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Matches predictions given in network coordinates against a sample's gt at
/// the configured resolution. Predictions are interpolated onto the gt rows.
pub fn match_sample(pred: &[Polyline], sample: &PreparedSample, cfg: &MetricsConfig) -> ImageCounts {
    let (gt, pred): (&[Polyline], Vec<Polyline>) = match cfg.resolution {
        EvalResolution::Network => (&sample.boundaries, pred.to_vec()),
        EvalResolution::Original => {
            let (nw, nh) = (sample.image.width() as f64, sample.image.height() as f64);
            let (ow, oh) = (sample.original_size.0 as f64, sample.original_size.1 as f64);
            (
                &sample.original_boundaries,
                pred.iter().map(|p| p.scaled(ow / nw, oh / nh)).collect(),
            )
        }
    };
    let rows = row_union(gt);
    let pred: Vec<Polyline> = pred.iter().map(|p| p.resampled(&rows)).collect();
    match_lanes(&pred, gt, cfg)
}

fn report(per_image: Vec<ImageReport>, cfg: &MetricsConfig) -> Result<MetricsReport> {
    let n = per_image.len();
    MetricsReport::from_images(per_image, *cfg).map_err(|e| match e {
        Error::UndefinedMetric(msg) => Error::UndefinedMetric(format!("{msg} over {n} images")),
        other => other,
    })
}

/// Lane metrics of the segmentation stage alone.
pub fn evaluate_segmentation(
    model: &SegModel,
    samples: &[PreparedSample],
    cfg: &MetricsConfig,
) -> Result<MetricsReport> {
    let detections = predict_instances(model, samples, cfg.min_points)?;
    let per_image = samples
        .iter()
        .zip(&detections)
        .map(|(s, dets)| {
            let pred: Vec<Polyline> = dets.iter().map(|d| d.polyline.clone()).collect();
            ImageReport {
                source_id: s.source_id.clone(),
                counts: match_sample(&pred, s, cfg),
            }
        })
        .collect();
    report(per_image, cfg)
}

/// Lane metrics of the full cascade, plus the accuracy of the predicted
/// classes on detections associated with a gt boundary (within
/// `association_threshold_px`, labels the scheme ignores skipped).
pub fn evaluate(
    cascade: &Cascade,
    samples: &[PreparedSample],
    cfg: &MetricsConfig,
    association_threshold_px: f64,
) -> Result<MetricsReport> {
    let scheme = cascade.scheme();
    let mut per_image = Vec::with_capacity(samples.len());
    let (mut hits, mut total) = (0usize, 0usize);
    for s in samples {
        let (result, network_lanes) = cascade.infer_with_network_lanes(&s.image)?;
        for (b, lane) in result.boundaries.iter().zip(&network_lanes) {
            let Some(i) = nearest_gt(lane, &s.boundaries, association_threshold_px) else {
                continue;
            };
            if let Some(target) = remap_class(s.classes[i], scheme) {
                total += 1;
                hits += usize::from(target == b.class_index);
            }
        }
        per_image.push(ImageReport {
            source_id: s.source_id.clone(),
            counts: match_sample(&network_lanes, s, cfg),
        });
    }
    let mut report = report(per_image, cfg)?;
    report.classification_accuracy = (total > 0).then(|| hits as f64 / total as f64);
    Ok(report)
}
