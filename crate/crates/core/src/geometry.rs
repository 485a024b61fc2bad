//! Polylines, instance maps and the point-set measures shared by the rest of
//! the crate.
//!
//! Pixel `(x, y)` has its center at integer coordinates `(x, y)`; a polyline
//! stores one optional x per sampled row, `None` marking a row where the
//! boundary is absent.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Maximum number of boundary instances: the ego-lane boundaries plus one
/// boundary on each side.
pub const K_MAX: usize = 4;

/// Default stroke width used to rasterize ground truth, in pixels.
pub const DEFAULT_STROKE_WIDTH: u32 = 5;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Polyline {
    rows: Vec<i32>,
    cols: Vec<Option<f64>>,
}

impl Polyline {
    /// Builds a polyline, checking that rows strictly increase and that both
    /// vectors have the same length.
    pub fn new(rows: Vec<i32>, cols: Vec<Option<f64>>) -> Result<Self> {
        if rows.len() != cols.len() {
            return Err(Error::Shape(format!(
                "polyline has {} rows but {} columns",
                rows.len(),
                cols.len()
            )));
        }
        if rows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("polyline rows must be strictly increasing".into()));
        }
        if cols.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Shape("polyline columns must be finite".into()));
        }
        Ok(Self { rows, cols })
    }

    /// Builds a polyline from present points only. Points are sorted by row;
    /// a repeated row keeps its first x.
    pub fn from_points(points: impl IntoIterator<Item = (i32, f64)>) -> Self {
        let mut by_row = BTreeMap::new();
        for (row, x) in points {
            by_row.entry(row).or_insert(x);
        }
        let (rows, cols) = by_row.into_iter().map(|(r, x)| (r, Some(x))).unzip();
        Self { rows, cols }
    }

    pub fn rows(&self) -> &[i32] {
        &self.rows
    }

    pub fn cols(&self) -> &[Option<f64>] {
        &self.cols
    }

    /// Present `(row, x)` points in row order.
    pub fn points(&self) -> impl Iterator<Item = (i32, f64)> + '_ {
        self.rows.iter().zip(&self.cols).filter_map(|(&r, c)| c.map(|x| (r, x)))
    }

    /// Number of present points.
    pub fn len(&self) -> usize {
        self.cols.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_at(&self, row: i32) -> Option<f64> {
        self.rows.binary_search(&row).ok().and_then(|i| self.cols[i])
    }

    /// Scales coordinates; rows are rounded to the nearest integer and a
    /// row that collides with an earlier one is dropped.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        let mut rows = Vec::with_capacity(self.rows.len());
        let mut cols = Vec::with_capacity(self.cols.len());
        for (&r, c) in self.rows.iter().zip(&self.cols) {
            let row = (r as f64 * sy).round() as i32;
            if rows.last().is_some_and(|&last| last >= row) {
                continue;
            }
            rows.push(row);
            cols.push(c.map(|x| x * sx));
        }
        Self { rows, cols }
    }

    /// Mirrors x about the center of an image `width` pixels wide.
    pub fn flipped(&self, width: u32) -> Self {
        let w = width as f64 - 1.0;
        Self {
            rows: self.rows.clone(),
            cols: self.cols.iter().map(|c| c.map(|x| w - x)).collect(),
        }
    }

    /// Linearly interpolates x at each requested row. Rows outside the span of
    /// present points, or falling between points separated by an absent row,
    /// come out absent.
    pub fn resampled(&self, rows: &[i32]) -> Self {
        let present: Vec<(i32, f64)> = self.points().collect();
        let cols = rows
            .iter()
            .map(|&row| {
                let i = present.partition_point(|&(r, _)| r < row);
                match present.get(i) {
                    Some(&(r, x)) if r == row => Some(x),
                    Some(&(r1, x1)) if i > 0 => {
                        let (r0, x0) = present[i - 1];
                        let t = (row - r0) as f64 / (r1 - r0) as f64;
                        Some(x0 + t * (x1 - x0))
                    }
                    _ => None,
                }
            })
            .collect();
        Self {
            rows: rows.to_vec(),
            cols,
        }
    }

    /// Consecutive present points joined into segments. A polyline with one
    /// present point yields a single degenerate segment.
    pub fn segments(&self) -> Vec<Segment> {
        let pts: Vec<(f64, f64)> = self.points().map(|(r, x)| (x, r as f64)).collect();
        match pts.len() {
            0 => Vec::new(),
            1 => vec![Segment { a: pts[0], b: pts[0] }],
            _ => pts.windows(2).map(|w| Segment { a: w[0], b: w[1] }).collect(),
        }
    }

    /// Euclidean distance from `(x, y)` to the segment chain, `None` for an
    /// empty polyline.
    pub fn distance_to(&self, x: f64, y: f64) -> Option<f64> {
        self.segments()
            .iter()
            .map(|s| s.distance_to(x, y))
            .min_by(f64::total_cmp)
    }
}

/// A segment in image coordinates, endpoints as `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: (f64, f64),
    pub b: (f64, f64),
}

impl Segment {
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((x - self.a.0) * dx + (y - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (px, py) = (self.a.0 + t * dx, self.a.1 + t * dy);
        ((x - px).powi(2) + (y - py).powi(2)).sqrt()
    }
}

/// Per-pixel instance labels: 0 is background, `1..=K_MAX` are boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl InstanceMap {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    /// Wraps row-major labels, rejecting values above `K_MAX`.
    pub fn from_data(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::Shape(format!(
                "instance map of {width}x{height} needs {} labels, got {}",
                width as usize * height as usize,
                data.len()
            )));
        }
        if let Some(&v) = data.iter().find(|&&v| v as usize > K_MAX) {
            return Err(Error::InstanceBudget {
                count: v as usize,
                max: K_MAX,
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: u32, y: u32) -> u8 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Collapses all boundary instances into label 1.
    pub fn binary(&self) -> Vec<u8> {
        self.data.iter().map(|&v| u8::from(v > 0)).collect()
    }

    /// Pixels carrying `label`, as `(x, y)` in row-major order.
    pub fn pixels_of(&self, label: u8) -> Vec<(u32, u32)> {
        let w = self.width as usize;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == label)
            .map(|(i, _)| ((i % w) as u32, (i / w) as u32))
            .collect()
    }

    pub fn flipped(&self) -> Self {
        let w = self.width as usize;
        let data = self.data.chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
        Self { data, ..*self }
    }
}

/// Paints each boundary as a stroke `width_px` wide: a pixel gets label
/// `i + 1` when its center lies within `width_px / 2` of boundary `i`'s
/// segment chain. Overlaps keep the lowest boundary index.
pub fn rasterize_boundaries(
    boundaries: &[Polyline],
    width_px: u32,
    (width, height): (u32, u32),
) -> Result<InstanceMap> {
    if boundaries.len() > K_MAX {
        return Err(Error::InstanceBudget {
            count: boundaries.len(),
            max: K_MAX,
        });
    }
    if width_px.is_multiple_of(2) {
        return Err(Error::EvenWidth(width_px));
    }
    let radius = width_px as f64 / 2.0;
    let mut map = InstanceMap::zeros(width, height);
    if width == 0 || height == 0 {
        return Ok(map);
    }
    for (i, boundary) in boundaries.iter().enumerate() {
        let label = (i + 1) as u8;
        for seg in boundary.segments() {
            let x0 = (seg.a.0.min(seg.b.0) - radius).floor().max(0.0);
            let x1 = (seg.a.0.max(seg.b.0) + radius).ceil().min(width as f64 - 1.0);
            let y0 = (seg.a.1.min(seg.b.1) - radius).floor().max(0.0);
            let y1 = (seg.a.1.max(seg.b.1) + radius).ceil().min(height as f64 - 1.0);
            if x0 > x1 || y0 > y1 {
                continue;
            }
            for y in y0 as u32..=y1 as u32 {
                for x in x0 as u32..=x1 as u32 {
                    let idx = y as usize * width as usize + x as usize;
                    if map.data[idx] == 0 && seg.distance_to(x as f64, y as f64) <= radius {
                        map.data[idx] = label;
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Reduces a pixel set to one point per row at the mean x of that row.
pub fn row_average(pixels: &[(u32, u32)]) -> Polyline {
    let mut acc: BTreeMap<u32, (u64, u64)> = BTreeMap::new();
    for &(x, y) in pixels {
        let e = acc.entry(y).or_default();
        e.0 += x as u64;
        e.1 += 1;
    }
    Polyline::from_points(acc.into_iter().map(|(y, (sum, n))| (y as i32, sum as f64 / n as f64)))
}

/// Counts ground-truth points matched by the prediction at the same row with
/// horizontal error strictly below `threshold_px`. Returns
/// `(matched, gt_total)`.
pub fn point_match_count(pred: &Polyline, gt: &Polyline, threshold_px: f64) -> (usize, usize) {
    let mut matched = 0;
    let mut total = 0;
    for (row, x_gt) in gt.points() {
        total += 1;
        if let Some(x_pred) = pred.x_at(row) {
            if (x_pred - x_gt).abs() < threshold_px {
                matched += 1;
            }
        }
    }
    (matched, total)
}

/// Mean horizontal distance over rows where both polylines are present;
/// `None` when they share no row.
pub fn average_distance(pred: &Polyline, gt: &Polyline) -> Option<f64> {
    let (sum, n) = gt
        .points()
        .filter_map(|(row, x_gt)| pred.x_at(row).map(|x| (x - x_gt).abs()))
        .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vertical(x: f64, rows: std::ops::Range<i32>) -> Polyline {
        Polyline::from_points(rows.map(|r| (r, x)))
    }

    #[test]
    fn polyline_rejects_bad_rows() {
        assert!(Polyline::new(vec![1, 1], vec![Some(0.0), Some(1.0)]).is_err());
        assert!(Polyline::new(vec![1, 2], vec![Some(0.0)]).is_err());
        assert!(Polyline::new(vec![1, 2], vec![None, Some(1.0)]).is_ok());
    }

    #[test]
    fn empty_input_rasterizes_to_zeros() {
        let map = rasterize_boundaries(&[], 5, (512, 256)).unwrap();
        assert!(map.data().iter().all(|&v| v == 0));
    }

    #[test]
    fn vertical_line_covers_five_columns() {
        let line = vertical(100.0, 0..256);
        let map = rasterize_boundaries(&[line], 5, (512, 256)).unwrap();
        for y in 0..256 {
            for x in 0..512 {
                // brute-force distance to the vertical segment
                let expected = u8::from((x as f64 - 100.0).abs() <= 2.5);
                assert_eq!(map.get(x, y), expected, "pixel ({x}, {y})");
            }
        }
        assert_eq!(DEFAULT_STROKE_WIDTH, 5);
    }

    #[test]
    fn rasterize_rejects_budget_and_even_width() {
        let lines = vec![vertical(10.0, 0..5); 5];
        assert!(matches!(
            rasterize_boundaries(&lines, 5, (64, 64)),
            Err(Error::InstanceBudget { count: 5, .. })
        ));
        assert!(matches!(
            rasterize_boundaries(&lines[..1], 4, (64, 64)),
            Err(Error::EvenWidth(4))
        ));
    }

    #[test]
    fn overlap_keeps_lowest_index() {
        let a = vertical(20.0, 0..30);
        let b = vertical(22.0, 0..30);
        let map = rasterize_boundaries(&[a, b], 5, (64, 32)).unwrap();
        assert_eq!(map.get(21, 10), 1);
        assert_eq!(map.get(23, 10), 2);
        assert_eq!(map.get(24, 10), 2);
    }

    #[test]
    fn row_average_examples() {
        let p = row_average(&[(10, 5), (14, 5)]);
        assert_eq!(p.points().collect::<Vec<_>>(), vec![(5, 12.0)]);
        let p = row_average(&[(7, 3)]);
        assert_eq!(p.points().collect::<Vec<_>>(), vec![(3, 7.0)]);
        assert!(row_average(&[]).is_empty());
    }

    #[test]
    fn row_average_matches_per_row_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pixels: Vec<(u32, u32)> = (0..1000)
            .map(|_| (rng.random_range(0..512), rng.random_range(0..20)))
            .collect();
        let out = row_average(&pixels);
        for row in 0..20u32 {
            let xs: Vec<f64> = pixels.iter().filter(|p| p.1 == row).map(|p| p.0 as f64).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((out.x_at(row as i32).unwrap() - mean).abs() < 1e-9);
        }
    }

    #[test]
    fn point_match_examples() {
        let gt = vertical(50.0, 0..10);
        assert_eq!(point_match_count(&gt, &gt, 20.0), (10, 10));
        let shifted = vertical(75.0, 0..10);
        assert_eq!(point_match_count(&shifted, &gt, 20.0), (0, 10));
        // exactly 20 px is not under the threshold
        let edge = vertical(70.0, 0..10);
        assert_eq!(point_match_count(&edge, &gt, 20.0), (0, 10));
        let disjoint = vertical(50.0, 20..30);
        assert_eq!(point_match_count(&disjoint, &gt, 20.0), (0, 10));
    }

    #[test]
    fn point_match_random_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let offsets: Vec<f64> = (0..200).map(|_| rng.random_range(0.0..40.0)).collect();
        let gt = Polyline::from_points((0..200).map(|r| (r, 100.0)));
        let pred = Polyline::from_points((0..200).map(|r| (r, 100.0 + offsets[r as usize])));
        let expected = offsets.iter().filter(|&&d| d < 20.0).count();
        assert_eq!(point_match_count(&pred, &gt, 20.0), (expected, 200));
    }

    #[test]
    fn average_distance_examples() {
        let gt = vertical(30.0, 0..10);
        assert_eq!(average_distance(&gt, &gt), Some(0.0));
        assert_eq!(average_distance(&vertical(40.0, 0..10), &gt), Some(10.0));
        assert_eq!(average_distance(&vertical(40.0, 20..30), &gt), None);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let offs: Vec<f64> = (0..50).map(|_| rng.random_range(-30.0..30.0)).collect();
        let pred = Polyline::from_points((0..50).map(|r| (r, 30.0 + offs[r as usize])));
        let gt = vertical(30.0, 0..50);
        let oracle = offs.iter().map(|d| d.abs()).sum::<f64>() / offs.len() as f64;
        assert!((average_distance(&pred, &gt).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn resampled_interpolates_between_points() {
        let p = Polyline::from_points([(0, 0.0), (10, 10.0)]);
        let r = p.resampled(&[-1, 0, 5, 10, 11]);
        assert_eq!(r.cols(), &[None, Some(0.0), Some(5.0), Some(10.0), None]);
    }

    #[test]
    fn scaled_drops_colliding_rows() {
        let p = Polyline::from_points([(0, 10.0), (1, 12.0), (4, 14.0)]);
        let s = p.scaled(0.5, 0.25);
        assert_eq!(s.rows(), &[0, 1]);
        assert_eq!(s.cols(), &[Some(5.0), Some(7.0)]);
    }

    fn arb_polyline() -> impl Strategy<Value = Polyline> {
        (0i32..40, 2usize..12, prop::collection::vec(-10.0f64..140.0, 12))
            .prop_map(|(start, n, xs)| Polyline::from_points((0..n).map(|i| (start + 3 * i as i32, xs[i]))))
    }

    proptest! {
        #[test]
        fn rasterized_labels_stay_in_budget(lines in prop::collection::vec(arb_polyline(), 0..=4)) {
            let map = rasterize_boundaries(&lines, 5, (128, 64)).unwrap();
            prop_assert!(map.data().iter().all(|&v| v as usize <= K_MAX));
        }

        #[test]
        fn row_average_is_permutation_invariant(
            mut pixels in prop::collection::vec((0u32..100, 0u32..10), 1..60),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let before = row_average(&pixels);
            pixels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(before, row_average(&pixels));
        }

        #[test]
        fn raising_threshold_never_loses_matches(
            a in arb_polyline(), b in arb_polyline(), t in 0.5f64..50.0, dt in 0.0f64..50.0,
        ) {
            let (m1, _) = point_match_count(&a, &b, t);
            let (m2, _) = point_match_count(&a, &b, t + dt);
            prop_assert!(m2 >= m1);
        }
    }
}
