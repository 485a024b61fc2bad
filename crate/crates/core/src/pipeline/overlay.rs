use image::{Rgb, RgbImage};

use super::cascade::CascadeResult;
use crate::classifier::TaxonomyScheme;
use crate::geometry::rasterize_boundaries;

/// Stroke width of drawn boundaries, in pixels.
pub const OVERLAY_WIDTH: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OverlayMode {
    /// Color by predicted class under the scheme.
    Classes(TaxonomyScheme),
    /// Color by segmentation instance slot.
    Instances,
}

pub const RED: Rgb<u8> = Rgb([255, 0, 0]);
pub const GREEN: Rgb<u8> = Rgb([0, 255, 0]);
pub const YELLOW: Rgb<u8> = Rgb([255, 255, 0]);

/// Continuous red, dashed green, double dashed yellow. The full taxonomy
/// keeps those three and adds distinct colors for the other labels.
pub fn class_color(scheme: TaxonomyScheme, class_index: usize) -> Rgb<u8> {
    match scheme {
        TaxonomyScheme::TwoClass | TaxonomyScheme::ThreeClass => [RED, GREEN, YELLOW][class_index.min(2)],
        TaxonomyScheme::Full => [
            RED,
            Rgb([255, 0, 255]),
            Rgb([255, 128, 0]),
            Rgb([160, 80, 0]),
            GREEN,
            YELLOW,
            Rgb([0, 255, 255]),
            Rgb([128, 128, 128]),
        ][class_index.min(7)],
    }
}

pub fn instance_color(instance_id: u8) -> Rgb<u8> {
    [
        Rgb([0, 0, 255]),
        Rgb([0, 255, 255]),
        Rgb([255, 0, 255]),
        Rgb([255, 128, 0]),
    ][(instance_id.max(1) as usize - 1) % 4]
}

/// Copy of `image` with every boundary of `result` drawn over it.
pub fn render_overlay(image: &RgbImage, result: &CascadeResult, mode: OverlayMode) -> RgbImage {
    let mut out = image.clone();
    let lanes: Vec<_> = result.boundaries.iter().map(|b| b.polyline.clone()).collect();
    let Ok(map) = rasterize_boundaries(&lanes, OVERLAY_WIDTH, image.dimensions()) else {
        return out;
    };
    for (x, y, px) in out.enumerate_pixels_mut() {
        let label = map.get(x, y);
        if label == 0 {
            continue;
        }
        let b = &result.boundaries[label as usize - 1];
        *px = match mode {
            OverlayMode::Classes(scheme) => class_color(scheme, b.class_index),
            OverlayMode::Instances => instance_color(b.instance_id),
        };
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polyline;
    use crate::pipeline::cascade::{CascadeBoundary, StageTimings};

    fn result(class_index: usize) -> CascadeResult {
        CascadeResult {
            boundaries: vec![CascadeBoundary {
                instance_id: 2,
                polyline: Polyline::from_points((5..40).map(|r| (r, 20.0 + r as f64 * 0.5))),
                class_index,
                class_name: String::new(),
                confidence: 0.9,
            }],
            timings: StageTimings::default(),
        }
    }

    #[test]
    fn empty_result_is_a_copy() {
        let img = RgbImage::from_pixel(64, 48, Rgb([10, 20, 30]));
        let empty = CascadeResult {
            boundaries: vec![],
            timings: StageTimings::default(),
        };
        assert_eq!(render_overlay(&img, &empty, OverlayMode::Instances), img);
    }

    #[test]
    fn dashed_is_green_along_the_polyline() {
        let img = RgbImage::from_pixel(64, 48, Rgb([10, 20, 30]));
        let r = result(1);
        let out = render_overlay(&img, &r, OverlayMode::Classes(TaxonomyScheme::TwoClass));
        for (row, x) in r.boundaries[0].polyline.points() {
            assert_eq!(*out.get_pixel(x.round() as u32, row as u32), GREEN);
        }
        assert_eq!(*out.get_pixel(60, 2), Rgb([10, 20, 30]));
        let again = render_overlay(&img, &r, OverlayMode::Classes(TaxonomyScheme::TwoClass));
        assert_eq!(out.as_raw(), again.as_raw());
        let cont = render_overlay(&img, &result(0), OverlayMode::Classes(TaxonomyScheme::ThreeClass));
        assert_eq!(*cont.get_pixel(30, 20), RED);
        let inst = render_overlay(&img, &r, OverlayMode::Instances);
        assert_eq!(*inst.get_pixel(30, 20), instance_color(2));
    }
}
