//! Procedural road scenes with exact lane annotations.
//!
//! Lanes converge towards a vanishing point above the bottom of the frame and
//! share one curvature term. Each boundary is drawn with the stroke pattern of
//! its class; the returned polylines are the stroke center lines sampled every
//! `row_step` rows.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassLabel, ImageSource, Sample};
use crate::error::{Error, Result};
use crate::geometry::{Polyline, K_MAX};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub image_size: (u32, u32),
    pub lane_count: usize,
    /// Lateral bend of the lanes at the top of the annotated region, pixels.
    pub curvature_range: (f64, f64),
    /// Full width of a boundary's marking pattern at the bottom row, pixels.
    pub stroke_width_range: (f64, f64),
    pub class_palette: Vec<ClassLabel>,
    /// Vertical spacing of the annotated rows; 0 picks `height / 32`.
    #[serde(default)]
    pub row_step: u32,
    /// Amplitude of the uniform per-pixel texture noise.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    12.0
}

impl SceneSpec {
    pub fn new(seed: u64, image_size: (u32, u32), lane_count: usize) -> Self {
        let scale = image_size.0 as f64 / 128.0;
        Self {
            seed,
            image_size,
            lane_count,
            curvature_range: (-12.0 * scale, 12.0 * scale),
            stroke_width_range: (3.0 * scale, 5.0 * scale),
            class_palette: ClassLabel::ALL.to_vec(),
            row_step: 0,
            noise: default_noise(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.lane_count > K_MAX {
            return Err(Error::InstanceBudget {
                count: self.lane_count,
                max: K_MAX,
            });
        }
        let (w, h) = self.image_size;
        if w < 16 || h < 16 {
            return Err(Error::Config(format!("scene size {w}x{h} is too small")));
        }
        if self.lane_count == 0 || self.class_palette.is_empty() {
            return Err(Error::Config(
                "scene needs at least one lane and one palette class".into(),
            ));
        }
        let (lo, hi) = self.stroke_width_range;
        if !(lo > 0.0 && lo <= hi) || self.curvature_range.0 > self.curvature_range.1 {
            return Err(Error::Config("invalid stroke width or curvature range".into()));
        }
        Ok(())
    }

    pub fn effective_row_step(&self) -> u32 {
        if self.row_step > 0 {
            self.row_step
        } else {
            (self.image_size.1 / 32).max(1)
        }
    }
}

/// First annotated row as a fraction of the image height; lanes above it have
/// converged too far to be told apart.
const TOP_FRACTION: f64 = 0.4;
const HORIZON_FRACTION: f64 = 0.25;

struct LaneShape {
    vanish_x: f64,
    bottom_x: f64,
    curvature: f64,
    horizon: f64,
    bottom: f64,
}

impl LaneShape {
    /// Perspective parameter: 0 at the horizon, 1 at the bottom row.
    fn t(&self, y: f64) -> f64 {
        (y - self.horizon) / (self.bottom - self.horizon)
    }

    fn x(&self, y: f64) -> f64 {
        let t = self.t(y);
        self.vanish_x + (self.bottom_x - self.vanish_x) * t + self.curvature * (1.0 - t).powi(2)
    }
}

/// Renders one scene. Identical specs produce bit-identical samples.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = spec.image_size;
    let (wf, hf) = (w as f64, h as f64);

    let horizon = (hf * HORIZON_FRACTION).round();
    let top_row = (hf * TOP_FRACTION).round() as i32;
    let bottom = hf - 1.0;

    let mut image = RgbImage::new(w, h);
    let road: f64 = rng.random_range(70.0..110.0);
    let sky = [
        rng.random_range(130.0..170.0),
        rng.random_range(150.0..190.0),
        rng.random_range(180.0..220.0),
    ];
    for y in 0..h {
        for x in 0..w {
            let n = rng.random_range(-spec.noise..=spec.noise);
            let px = if (y as f64) < horizon {
                sky.map(|c| c + n)
            } else {
                let shade = road + 10.0 * (y as f64 - horizon) / (bottom - horizon);
                [shade + n, shade + n, shade + n + 3.0]
            };
            image.put_pixel(x, y, Rgb(px.map(clamp_u8)));
        }
    }

    let vanish_x = wf / 2.0 + rng.random_range(-0.08..0.08) * wf;
    let center = wf / 2.0 + rng.random_range(-0.06..0.06) * wf;
    let spacing = rng.random_range(0.26..0.32) * wf;
    let curvature = rng.random_range(spec.curvature_range.0..=spec.curvature_range.1);
    let row_step = spec.effective_row_step() as i32;
    let rows: Vec<i32> = (top_row..h as i32).step_by(row_step as usize).collect();

    let mut boundaries = Vec::with_capacity(spec.lane_count);
    let mut classes = Vec::with_capacity(spec.lane_count);
    for i in 0..spec.lane_count {
        let offset = i as f64 - (spec.lane_count as f64 - 1.0) / 2.0;
        let shape = LaneShape {
            vanish_x,
            bottom_x: center + offset * spacing,
            curvature,
            horizon,
            bottom,
        };
        let class = spec.class_palette[rng.random_range(0..spec.class_palette.len())];
        let width = rng.random_range(spec.stroke_width_range.0..=spec.stroke_width_range.1);
        let phase = rng.random_range(0.0..1.0);
        draw_boundary(&mut image, &shape, class, width, phase, top_row, &mut rng);

        let cols = rows
            .iter()
            .map(|&r| {
                let x = shape.x(r as f64);
                (x >= 0.0 && x <= wf - 1.0).then_some(x)
            })
            .collect();
        boundaries.push(Polyline::new(rows.clone(), cols).expect("rows are increasing"));
        classes.push(class);
    }

    Ok(Sample {
        image: ImageSource::Loaded(image),
        lane_ids: (0..boundaries.len()).collect(),
        boundaries,
        classes,
        source_id: format!("synthetic_{:016x}", spec.seed),
    })
}

/// Stroke bands of a pattern as (offset from center, half width), relative to
/// the full pattern width.
fn bands(class: ClassLabel) -> &'static [(f64, f64)] {
    if class.is_double() {
        &[(-1.0 / 3.0, 1.0 / 6.0), (1.0 / 3.0, 1.0 / 6.0)]
    } else if class == ClassLabel::BottsDots {
        &[(0.0, 0.35)]
    } else {
        &[(0.0, 0.5)]
    }
}

/// (period as a fraction of the image height at the bottom row, duty cycle)
fn dash_pattern(class: ClassLabel) -> Option<(f64, f64)> {
    match class {
        ClassLabel::Dashed | ClassLabel::DoubleDashed => Some((1.0 / 5.0, 0.5)),
        ClassLabel::BottsDots => Some((1.0 / 10.0, 0.3)),
        _ => None,
    }
}

fn stroke_color(class: ClassLabel) -> [f64; 3] {
    if class.is_yellow() {
        [225.0, 190.0, 45.0]
    } else if class == ClassLabel::Unknown {
        [150.0, 150.0, 145.0]
    } else {
        [235.0, 235.0, 230.0]
    }
}

fn draw_boundary(
    image: &mut RgbImage,
    shape: &LaneShape,
    class: ClassLabel,
    width: f64,
    phase: f64,
    top_row: i32,
    rng: &mut ChaCha8Rng,
) {
    let (w, h) = image.dimensions();
    let color = stroke_color(class);
    let mut dash_phase = phase;
    // bottom-up so the dash phase accumulates from the near field
    for y in (top_row..h as i32).rev() {
        let t = shape.t(y as f64);
        let scale = 0.5 + 0.5 * t;
        let on = match dash_pattern(class) {
            Some((period, duty)) => {
                let period_rows = period * h as f64 * scale;
                dash_phase += 1.0 / period_rows;
                dash_phase.fract() < duty
            }
            None => true,
        };
        if !on {
            continue;
        }
        let center = shape.x(y as f64);
        let pattern_width = width * scale;
        for &(offset, half) in bands(class) {
            let c = center + offset * pattern_width;
            let half = (half * pattern_width).max(0.5);
            let x0 = (c - half).ceil().max(0.0) as i64;
            let x1 = (c + half).floor().min(w as f64 - 1.0) as i64;
            for x in x0..=x1 {
                let n = rng.random_range(-8.0..=8.0);
                image.put_pixel(x as u32, y as u32, Rgb(color.map(|v| clamp_u8(v + n))));
            }
        }
    }
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Settings for a generated corpus; scene `i` uses a seed derived from
/// `seed` and `i` only, so scenes can be generated in any order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub count: usize,
    pub seed: u64,
    pub image_size: (u32, u32),
    pub min_lanes: usize,
    pub max_lanes: usize,
    pub class_palette: Option<Vec<ClassLabel>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 64,
            seed: 0,
            image_size: (128, 64),
            min_lanes: 2,
            max_lanes: K_MAX,
            class_palette: None,
        }
    }
}

impl SyntheticConfig {
    pub fn scene_spec(&self, index: usize) -> SceneSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64 + 1);
        let seed = rng.random();
        let lanes = rng.random_range(self.min_lanes..=self.max_lanes.max(self.min_lanes));
        let mut spec = SceneSpec::new(seed, self.image_size, lanes);
        if let Some(p) = &self.class_palette {
            spec.class_palette = p.clone();
        }
        spec
    }

    pub fn generate(&self) -> Result<Vec<Sample>> {
        (0..self.count)
            .into_par_iter()
            .map(|i| generate_scene(&self.scene_spec(i)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_identical() {
        let spec = SceneSpec::new(42, (128, 64), 4);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a.image.loaded().unwrap(), b.image.loaded().unwrap());
        assert_eq!(a.boundaries, b.boundaries);
        assert_eq!(a.classes, b.classes);
        let c = generate_scene(&SceneSpec::new(43, (128, 64), 4)).unwrap();
        assert_ne!(a.image.loaded().unwrap(), c.image.loaded().unwrap());
    }

    #[test]
    fn palette_restricts_classes() {
        let mut spec = SceneSpec::new(5, (128, 64), 3);
        spec.class_palette = vec![ClassLabel::Dashed];
        let s = generate_scene(&spec).unwrap();
        assert_eq!(s.classes, vec![ClassLabel::Dashed; 3]);
    }

    #[test]
    fn too_many_lanes_rejected() {
        let spec = SceneSpec::new(1, (128, 64), 5);
        assert!(matches!(
            generate_scene(&spec),
            Err(Error::InstanceBudget { count: 5, .. })
        ));
    }

    #[test]
    fn stroke_pixels_lie_near_their_polyline() {
        for seed in 0..30 {
            let mut spec = SceneSpec::new(seed, (128, 64), 4);
            spec.noise = 0.0;
            let sample = generate_scene(&spec).unwrap();
            let img = sample.image.loaded().unwrap();
            let max_half = spec.stroke_width_range.1 / 2.0;
            let top = sample.boundaries[0].rows()[0];
            // stroke pixels are the only ones brighter than the road
            for y in top..64 {
                for x in 0..128u32 {
                    let p = img.get_pixel(x, y as u32);
                    let near_edge = (x as f64) < max_half + 1.0 || (x as f64) > 126.0 - max_half;
                    if p[0] <= 135 || near_edge {
                        continue;
                    }
                    let d = sample
                        .boundaries
                        .iter()
                        .filter_map(|b| b.distance_to(x as f64, y as f64))
                        .fold(f64::INFINITY, f64::min);
                    // the last annotated row may sit above the bottom stroke row
                    let tol = if y > *sample.boundaries[0].rows().last().unwrap() {
                        2.0
                    } else {
                        1.0
                    };
                    assert!(d <= max_half + tol, "seed {seed}: ({x},{y}) at {d}");
                }
            }
        }
    }

    #[test]
    fn parallel_generation_equals_serial() {
        let cfg = SyntheticConfig {
            count: 8,
            ..Default::default()
        };
        let par = cfg.generate().unwrap();
        for (i, s) in par.iter().enumerate() {
            let serial = generate_scene(&cfg.scene_spec(i)).unwrap();
            assert_eq!(s.boundaries, serial.boundaries);
            assert_eq!(s.image.loaded(), serial.image.loaded());
        }
    }
}
