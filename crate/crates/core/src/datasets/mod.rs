//! Annotated samples: TuSimple ingestion, sidecar class labels, synthetic
//! scenes and dataset splits.

mod classes;
mod synthetic;
mod tusimple;

use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use classes::{load_class_annotations, ClassAnnotations, ClassLabel, ClassRecord};
pub use synthetic::{generate_scene, SceneSpec, SyntheticConfig};
pub use tusimple::{load_tusimple, parse_tusimple, TuSimpleRecord, MISSING_X, TUSIMPLE_SIZE};

use crate::error::{Error, Result};
use crate::geometry::Polyline;

/// Pixels of a sample, either in memory or a path relative to the dataset
/// root that is read on demand.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Loaded(RgbImage),
    Path(PathBuf),
}

impl ImageSource {
    pub fn loaded(&self) -> Option<&RgbImage> {
        match self {
            ImageSource::Loaded(img) => Some(img),
            ImageSource::Path(_) => None,
        }
    }

    pub fn load(&self, root: &Path) -> Result<RgbImage> {
        match self {
            ImageSource::Loaded(img) => Ok(img.clone()),
            ImageSource::Path(rel) => {
                let path = root.join(rel);
                Ok(image::open(&path)
                    .map_err(|e| match e {
                        image::ImageError::IoError(io) => Error::io(path, io),
                        other => Error::Image(other),
                    })?
                    .to_rgb8())
            }
        }
    }
}

/// One annotated frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageSource,
    pub boundaries: Vec<Polyline>,
    pub classes: Vec<ClassLabel>,
    /// Index of each boundary in the source annotation's lane list.
    pub lane_ids: Vec<usize>,
    pub source_id: String,
}

impl Sample {
    /// Replaces a lazy image with its pixels; annotations are untouched.
    pub fn materialize(&mut self, root: &Path) -> Result<()> {
        if let ImageSource::Path(_) = self.image {
            self.image = ImageSource::Loaded(self.image.load(root)?);
        }
        Ok(())
    }

    /// Attaches sidecar labels by original lane index.
    pub fn attach_classes(&mut self, ann: &ClassAnnotations) {
        self.classes = self.lane_ids.iter().map(|&i| ann.get(&self.source_id, i)).collect();
    }
}

/// Shuffles with `seed` and cuts into train/val/test by `fractions`.
pub fn split_dataset<T>(samples: Vec<T>, fractions: [f64; 3], seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(fractions));
    }
    let n = samples.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<T>> = samples.into_iter().map(Some).collect();
    let mut take = |idx: &[usize]| -> Vec<T> {
        idx.iter()
            .map(|&i| slots[i].take().expect("indices are a permutation"))
            .collect()
    };
    let train = take(&order[..n_train]);
    let val = take(&order[n_train..n_train + n_val]);
    let test = take(&order[n_train + n_val..]);
    Ok((train, val, test))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    #[serde(default)]
    pub horizontal_flip: bool,
    /// Maximum relative brightness change; 0 disables the jitter.
    #[serde(default)]
    pub brightness_jitter: f64,
}

/// Applies the enabled augmentations to an in-memory image and its lanes.
pub fn augment(
    image: &RgbImage,
    boundaries: &[Polyline],
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (RgbImage, Vec<Polyline>) {
    let mut img = image.clone();
    let mut lanes = boundaries.to_vec();
    if cfg.horizontal_flip && rng.random_bool(0.5) {
        image::imageops::flip_horizontal_in_place(&mut img);
        lanes = lanes.iter().map(|p| p.flipped(img.width())).collect();
    }
    if cfg.brightness_jitter > 0.0 {
        let f = 1.0 + rng.random_range(-cfg.brightness_jitter..=cfg.brightness_jitter);
        for p in img.pixels_mut() {
            for c in p.0.iter_mut() {
                *c = (*c as f64 * f).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    (img, lanes)
}

/// Writes samples as a TuSimple-style dataset: `images/*.png`,
/// `label_data.json` and the `classes.json` sidecar.
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut labels = String::new();
    let mut ann = ClassAnnotations::default();
    for s in samples {
        let rel = format!("images/{}.png", s.source_id);
        let img = s
            .image
            .loaded()
            .ok_or_else(|| Error::Config(format!("{} has no pixels loaded", s.source_id)))?;
        img.save(dir.join(&rel))?;
        let mut rec = s.to_record();
        rec.raw_file = rel.clone();
        labels.push_str(&rec.to_line());
        labels.push('\n');
        for (i, c) in s.classes.iter().enumerate() {
            ann.insert(&rel, s.lane_ids.get(i).copied().unwrap_or(i), *c)?;
        }
    }
    let path = dir.join("label_data.json");
    std::fs::write(&path, labels).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("classes.json");
    std::fs::write(&path, ann.to_jsonl()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`] (or any TuSimple layout with
/// `label_data.json` and an optional `classes.json`). Images stay lazy.
pub fn read_dataset(dir: &Path) -> Result<Vec<Sample>> {
    let classes_path = dir.join("classes.json");
    let ann = if classes_path.exists() {
        Some(load_class_annotations(&classes_path)?)
    } else {
        None
    };
    load_tusimple(&dir.join("label_data.json"), ann.as_ref())
}
