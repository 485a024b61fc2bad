//! Square descriptors: `S²` colors read along a boundary's pixels, in scan
//! order, laid out row by row in an `S × S` image.

use std::path::{Path, PathBuf};

use candle_core::Tensor;
use image::RgbImage;

use crate::error::{Error, Result};

/// Sizes evaluated by the ablation harness.
pub const DESCRIPTOR_SIZES: [usize; 5] = [16, 32, 64, 128, 256];

#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub size: usize,
    pub pixels: RgbImage,
    /// Index of the originating boundary within its frame.
    pub boundary: usize,
}

/// `n` indices spread evenly over `0..len`, rounded to the nearest integer
/// (halves round up). Repeats indices when `len < n`.
pub fn sample_indices(len: usize, n: usize) -> Vec<usize> {
    if n == 1 || len == 1 {
        return vec![0; n];
    }
    let (len, n) = (len as u64, n as u64);
    (0..n)
        .map(|k| ((2 * k * (len - 1) + (n - 1)) / (2 * (n - 1))) as usize)
        .collect()
}

/// Builds a descriptor for one boundary. Pixels are `(x, y)` and are put in
/// row-major order of the source image before sampling.
pub fn extract_descriptor(image: &RgbImage, pixels: &[(u32, u32)], size: usize) -> Result<Descriptor> {
    if size == 0 {
        return Err(Error::Config("descriptor size must be positive".into()));
    }
    if pixels.is_empty() {
        return Err(Error::EmptyBoundary);
    }
    let (w, h) = image.dimensions();
    if let Some(&(x, y)) = pixels.iter().find(|&&(x, y)| x >= w || y >= h) {
        return Err(Error::Shape(format!("pixel ({x}, {y}) outside {w}x{h} image")));
    }
    let mut ordered = pixels.to_vec();
    ordered.sort_unstable_by_key(|&(x, y)| (y, x));
    let indices = sample_indices(ordered.len(), size * size);
    let side = size as u32;
    let mut out = RgbImage::new(side, side);
    for (k, &i) in indices.iter().enumerate() {
        let (x, y) = ordered[i];
        out.put_pixel(k as u32 % side, k as u32 / side, *image.get_pixel(x, y));
    }
    Ok(Descriptor {
        size,
        pixels: out,
        boundary: 0,
    })
}

/// One descriptor per boundary, in boundary order.
pub fn batch_descriptors(image: &RgbImage, boundaries: &[Vec<(u32, u32)>], size: usize) -> Result<Vec<Descriptor>> {
    boundaries
        .iter()
        .enumerate()
        .map(|(index, px)| {
            extract_descriptor(image, px, size)
                .map(|d| Descriptor { boundary: index, ..d })
                .map_err(|e| Error::Boundary {
                    index,
                    source: Box::new(e),
                })
        })
        .collect()
}

/// Stacks descriptors into a `(B, 3, S, S)` tensor with the same value
/// normalization as the segmentation input.
pub fn descriptors_to_tensor(descriptors: &[Descriptor]) -> Result<Tensor> {
    let Some(first) = descriptors.first() else {
        return Err(Error::Shape("empty descriptor batch".into()));
    };
    let s = first.size;
    let images: Vec<RgbImage> = descriptors
        .iter()
        .map(|d| {
            if d.size == s {
                Ok(d.pixels.clone())
            } else {
                Err(Error::Shape(format!("mixed descriptor sizes {s} and {}", d.size)))
            }
        })
        .collect::<Result<_>>()?;
    crate::segmentation::images_to_tensor(&images, (s as u32, s as u32))
}

/// Writes `{source_id}_{boundary}_{S}.png` into `dir`. Path separators in the
/// source id are replaced so every file lands directly in `dir`.
pub fn dump_descriptor(descriptor: &Descriptor, dir: &Path, source_id: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem: String = source_id
        .chars()
        .map(|c| if c == '/' || c == '\\' { '_' } else { c })
        .collect();
    let path = dir.join(format!("{stem}_{}_{}.png", descriptor.boundary, descriptor.size));
    descriptor.pixels.save(&path)?;
    Ok(path)
}
