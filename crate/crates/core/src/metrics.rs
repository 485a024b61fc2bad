//! TuSimple-style lane metrics, classification accuracy and the descriptor
//! size ablation table.
//!
//! Lane matching is solved exactly rather than greedily. Point accuracy uses
//! the one-to-one pred/gt assignment with the most matched points. A predicted
//! lane is correct when it can be paired with a distinct gt lane whose points
//! it matches at or above `fp_cutoff`; the number of correct lanes is the size
//! of a maximum matching over such pairs. Both are independent of lane order
//! and never get worse as the threshold grows.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::classifier::{remap_class, TaxonomyScheme};
use crate::datasets::ClassLabel;
use crate::error::{Error, Result};
use crate::geometry::{point_match_count, Polyline};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalResolution {
    /// Match in network input coordinates.
    Network,
    /// Rescale predictions to the annotation frame before matching.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub threshold_px: f64,
    /// Matched fraction of a gt lane's points for a prediction to count as
    /// a correct lane.
    pub fp_cutoff: f64,
    pub min_points: usize,
    pub resolution: EvalResolution,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            threshold_px: 20.0,
            fp_cutoff: 0.85,
            min_points: 3,
            resolution: EvalResolution::Network,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaneMatch {
    pub pred: usize,
    pub gt: usize,
    pub matched: usize,
}

/// Counts for one image.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ImageCounts {
    /// `C_i`: matched points over the assignment.
    pub matched_points: usize,
    /// `S_i`: gt points.
    pub gt_points: usize,
    pub n_pred: usize,
    pub n_gt: usize,
    pub false_positives: usize,
    pub missed: usize,
    pub assignment: Vec<LaneMatch>,
}

/// Corpus totals; merging is associative and commutative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EvalCounts {
    pub matched_points: usize,
    pub gt_points: usize,
    pub f_pred: usize,
    pub n_pred: usize,
    pub m_pred: usize,
    pub n_gt: usize,
}

impl EvalCounts {
    pub fn add(&mut self, img: &ImageCounts) {
        self.merge(&EvalCounts {
            matched_points: img.matched_points,
            gt_points: img.gt_points,
            f_pred: img.false_positives,
            n_pred: img.n_pred,
            m_pred: img.missed,
            n_gt: img.n_gt,
        });
    }

    pub fn merge(&mut self, other: &EvalCounts) {
        self.matched_points += other.matched_points;
        self.gt_points += other.gt_points;
        self.f_pred += other.f_pred;
        self.n_pred += other.n_pred;
        self.m_pred += other.m_pred;
        self.n_gt += other.n_gt;
    }

    pub fn describe(&self) -> String {
        format!(
            "{} gt points, {} gt lanes, {} predicted lanes",
            self.gt_points, self.n_gt, self.n_pred
        )
    }
}

/// Matches one image's predictions against its ground truth. Empty gt lanes
/// are ignored.
pub fn match_lanes(pred: &[Polyline], gt: &[Polyline], cfg: &MetricsConfig) -> ImageCounts {
    let gt: Vec<(usize, &Polyline)> = gt.iter().enumerate().filter(|(_, g)| !g.is_empty()).collect();
    let counts: Vec<Vec<(usize, usize)>> = pred
        .iter()
        .map(|p| {
            gt.iter()
                .map(|(_, g)| point_match_count(p, g, cfg.threshold_px))
                .collect()
        })
        .collect();
    let weights: Vec<Vec<i64>> = counts
        .iter()
        .map(|row| row.iter().map(|&(m, _)| m as i64).collect())
        .collect();
    let assignment: Vec<LaneMatch> = max_weight_assignment(&weights, pred.len(), gt.len())
        .into_iter()
        .filter(|&(i, j)| counts[i][j].0 > 0)
        .map(|(i, j)| LaneMatch {
            pred: i,
            gt: gt[j].0,
            matched: counts[i][j].0,
        })
        .collect();
    let hits: Vec<Vec<bool>> = counts
        .iter()
        .map(|row| {
            row.iter()
                .map(|&(m, total)| total > 0 && m as f64 >= cfg.fp_cutoff * total as f64)
                .collect()
        })
        .collect();
    let correct = max_cardinality_matching(&hits, gt.len());
    ImageCounts {
        matched_points: assignment.iter().map(|m| m.matched).sum(),
        gt_points: gt.iter().map(|(_, g)| g.len()).sum(),
        n_pred: pred.len(),
        n_gt: gt.len(),
        false_positives: pred.len() - correct,
        missed: gt.len() - correct,
        assignment,
    }
}

/// Hungarian algorithm (shortest augmenting paths with potentials) on a
/// `rows × cols` weight matrix, maximizing the total. Returns (row, col)
/// pairs; every row is assigned when `rows <= cols`, and vice versa.
fn max_weight_assignment(weights: &[Vec<i64>], rows: usize, cols: usize) -> Vec<(usize, usize)> {
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> i64 {
        if transpose {
            -weights[j][i]
        } else {
            -weights[i][j]
        }
    };
    // 1-based arrays as in the classic formulation; p[j] = row matched to column j
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| p[j] != 0)
        .map(|j| {
            if transpose {
                (j - 1, p[j] - 1)
            } else {
                (p[j] - 1, j - 1)
            }
        })
        .collect();
    out.sort_unstable();
    out
}

/// Size of a maximum matching in a bipartite graph given as an adjacency
/// matrix (Kuhn's augmenting paths).
fn max_cardinality_matching(adj: &[Vec<bool>], cols: usize) -> usize {
    fn augment(i: usize, adj: &[Vec<bool>], seen: &mut [bool], owner: &mut [Option<usize>]) -> bool {
        for j in 0..owner.len() {
            if adj[i][j] && !seen[j] {
                seen[j] = true;
                if owner[j].is_none_or(|k| augment(k, adj, seen, owner)) {
                    owner[j] = Some(i);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; cols];
    (0..adj.len())
        .filter(|&i| augment(i, adj, &mut vec![false; cols], &mut owner))
        .count()
}

/// `Σ C_i / Σ S_i`.
pub fn accuracy(counts: &EvalCounts) -> Result<f64> {
    if counts.gt_points == 0 {
        return Err(Error::UndefinedMetric(format!(
            "accuracy needs gt points ({})",
            counts.describe()
        )));
    }
    Ok(counts.matched_points as f64 / counts.gt_points as f64)
}

/// `F_pred / N_pred`, zero when nothing was predicted.
pub fn fp_rate(counts: &EvalCounts) -> f64 {
    if counts.n_pred == 0 {
        0.0
    } else {
        counts.f_pred as f64 / counts.n_pred as f64
    }
}

/// `M_pred / N_gt`.
pub fn fn_rate(counts: &EvalCounts) -> Result<f64> {
    if counts.n_gt == 0 {
        return Err(Error::UndefinedMetric(format!(
            "false-negative rate needs gt lanes ({})",
            counts.describe()
        )));
    }
    Ok(counts.m_pred as f64 / counts.n_gt as f64)
}

/// Fraction of predictions equal to the remapped label, skipping labels the
/// scheme ignores.
pub fn classification_accuracy(predictions: &[usize], labels: &[ClassLabel], scheme: TaxonomyScheme) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (hits, n) = predictions
        .iter()
        .zip(labels)
        .filter_map(|(&p, &l)| remap_class(l, scheme).map(|t| (p == t) as usize))
        .fold((0, 0), |(h, n), hit| (h + hit, n + 1));
    if n == 0 {
        return Err(Error::UndefinedMetric(
            "classification accuracy over an empty set".into(),
        ));
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub source_id: String,
    #[serde(flatten)]
    pub counts: ImageCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub fp_rate: f64,
    pub fn_rate: f64,
    pub totals: EvalCounts,
    pub per_image: Vec<ImageReport>,
    pub config: MetricsConfig,
    /// Classifier accuracy over associated detections, when a classifier ran.
    pub classification_accuracy: Option<f64>,
}

impl MetricsReport {
    pub fn from_images(per_image: Vec<ImageReport>, config: MetricsConfig) -> Result<Self> {
        let mut totals = EvalCounts::default();
        for img in &per_image {
            totals.add(&img.counts);
        }
        Ok(Self {
            accuracy: accuracy(&totals)?,
            fp_rate: fp_rate(&totals),
            fn_rate: fn_rate(&totals)?,
            totals,
            per_image,
            config,
            classification_accuracy: None,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "accuracy  {:.4}", self.accuracy);
        let _ = writeln!(s, "fp_rate   {:.4}", self.fp_rate);
        let _ = writeln!(s, "fn_rate   {:.4}", self.fn_rate);
        if let Some(a) = self.classification_accuracy {
            let _ = writeln!(s, "class_acc {a:.4}");
        }
        let t = &self.totals;
        let _ = writeln!(
            s,
            "images {}  points {}/{}  lanes: pred {} (fp {})  gt {} (missed {})",
            self.per_image.len(),
            t.matched_points,
            t.gt_points,
            t.n_pred,
            t.f_pred,
            t.n_gt,
            t.m_pred
        );
        let c = &self.config;
        let _ = writeln!(
            s,
            "threshold_px {}  fp_cutoff {}  min_points {}  resolution {:?}",
            c.threshold_px, c.fp_cutoff, c.min_points, c.resolution
        );
        s
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "accuracy,{}", self.accuracy);
        let _ = writeln!(s, "fp_rate,{}", self.fp_rate);
        let _ = writeln!(s, "fn_rate,{}", self.fn_rate);
        if let Some(a) = self.classification_accuracy {
            let _ = writeln!(s, "classification_accuracy,{a}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub size: usize,
    pub scheme: TaxonomyScheme,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub sizes: Vec<usize>,
    pub schemes: Vec<TaxonomyScheme>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn cell(&self, size: usize, scheme: TaxonomyScheme) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.size == size && c.scheme == scheme)
    }

    /// `size,scheme,accuracy` rows; failed cells leave accuracy blank.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("size,scheme,accuracy\n");
        for c in &self.cells {
            let acc = c.accuracy.map(|a| format!("{a:.6}")).unwrap_or_default();
            let _ = writeln!(s, "{},{},{acc}", c.size, c.scheme);
        }
        s
    }

    /// One row per size, one column per scheme.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:>6}", "size");
        for scheme in &self.schemes {
            let _ = write!(s, " {:>12}", scheme.to_string());
        }
        s.push('\n');
        for &size in &self.sizes {
            let _ = write!(s, "{size:>6}");
            for &scheme in &self.schemes {
                let v = match self.cell(size, scheme) {
                    Some(AblationCell { accuracy: Some(a), .. }) => format!("{a:.4}"),
                    _ => "failed".into(),
                };
                let _ = write!(s, " {v:>12}");
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `cell` for every (size, scheme) pair, size-major. A failing cell is
/// recorded and the remaining cells still run.
pub fn ablate_descriptor_sizes<F>(sizes: &[usize], schemes: &[TaxonomyScheme], mut cell: F) -> AblationTable
where
    F: FnMut(usize, TaxonomyScheme) -> Result<f64>,
{
    let mut cells = Vec::new();
    for &size in sizes {
        for &scheme in schemes {
            let (accuracy, error) = match cell(size, scheme) {
                Ok(a) => (Some(a), None),
                Err(e) => {
                    log::warn!("ablation cell S={size} {scheme} failed: {e}");
                    (None, Some(e.to_string()))
                }
            };
            cells.push(AblationCell {
                size,
                scheme,
                accuracy,
                error,
            });
        }
    }
    AblationTable {
        sizes: sizes.to_vec(),
        schemes: schemes.to_vec(),
        cells,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn lane(x0: f64, slope: f64, rows: std::ops::Range<i32>) -> Polyline {
        Polyline::from_points(rows.map(|r| (r, x0 + slope * r as f64)))
    }

    #[test]
    fn exact_and_empty_predictions() {
        let gt = vec![lane(10.0, 0.5, 0..40), lane(80.0, -0.3, 5..40)];
        let c = match_lanes(&gt, &gt, &MetricsConfig::default());
        assert_eq!((c.false_positives, c.missed), (0, 0));
        assert_eq!(c.matched_points, c.gt_points);
        let c = match_lanes(&[], &gt, &MetricsConfig::default());
        assert_eq!((c.missed, c.matched_points, c.false_positives), (2, 0, 0));
        let mut t = EvalCounts::default();
        t.add(&c);
        assert_eq!(fp_rate(&t), 0.0);
        assert_eq!(fn_rate(&t).unwrap(), 1.0);
        assert_eq!(accuracy(&t).unwrap(), 0.0);
    }

    #[test]
    fn undefined_metrics() {
        let t = EvalCounts::default();
        assert!(matches!(accuracy(&t), Err(Error::UndefinedMetric(_))));
        assert!(matches!(fn_rate(&t), Err(Error::UndefinedMetric(_))));
        assert_eq!(fp_rate(&t), 0.0);
        assert!(classification_accuracy(&[], &[], TaxonomyScheme::TwoClass).is_err());
    }

    #[test]
    fn classification_accuracy_skips_ignored() {
        use ClassLabel::*;
        let labels = [Dashed, SingleWhiteContinuous, Unknown, BottsDots];
        let acc = classification_accuracy(&[1, 0, 0, 0], &labels, TaxonomyScheme::TwoClass).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            classification_accuracy(&[1, 1], &[Dashed, Dashed], TaxonomyScheme::TwoClass).unwrap(),
            1.0
        );
        assert_eq!(
            classification_accuracy(&[1, 0], &[Dashed, Dashed], TaxonomyScheme::TwoClass).unwrap(),
            0.5
        );
    }

    /// Exhaustive search over partial injective assignments.
    fn brute_force(weights: &[Vec<i64>], cols: usize) -> i64 {
        fn go(i: usize, weights: &[Vec<i64>], used: &mut Vec<bool>) -> i64 {
            if i == weights.len() {
                return 0;
            }
            let mut best = go(i + 1, weights, used);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(weights[i][j] + go(i + 1, weights, used));
                    used[j] = false;
                }
            }
            best
        }
        go(0, weights, &mut vec![false; cols])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let (r, c) = (rng.random_range(0..6), rng.random_range(0..6));
            let w: Vec<Vec<i64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.random_range(0..50)).collect())
                .collect();
            let a = max_weight_assignment(&w, r, c);
            let total: i64 = a.iter().map(|&(i, j)| w[i][j]).sum();
            assert_eq!(total, brute_force(&w, c));
            assert_eq!(a.len(), r.min(c));
        }
    }

    #[test]
    fn ablation_records_failures_and_continues() {
        let t = ablate_descriptor_sizes(
            &[16, 32],
            &[TaxonomyScheme::TwoClass, TaxonomyScheme::ThreeClass],
            |s, scheme| {
                if s == 16 && scheme == TaxonomyScheme::ThreeClass {
                    Err(Error::EmptyDataset)
                } else {
                    Ok(s as f64 / 100.0)
                }
            },
        );
        assert_eq!(t.cells.len(), 4);
        assert!(t.cell(16, TaxonomyScheme::ThreeClass).unwrap().error.is_some());
        let csv = t.to_csv();
        assert!(csv.starts_with("size,scheme,accuracy\n16,two_class,0.160000\n16,three_class,\n"));
        assert_eq!(t.to_text().lines().count(), 3);
    }

    fn arb_lanes() -> impl Strategy<Value = Vec<Polyline>> {
        prop::collection::vec((0.0..100.0f64, -1.0..1.0f64, 0i32..10, 10i32..30), 0..=4)
            .prop_map(|v| v.into_iter().map(|(x, s, a, b)| lane(x, s, a..b)).collect())
    }

    proptest! {
        #[test]
        fn order_invariance_and_monotone_threshold(
            pred in arb_lanes(),
            gt in arb_lanes(),
            t1 in 1.0..30.0f64,
            dt in 0.0..30.0f64,
        ) {
            let cfg = MetricsConfig { threshold_px: t1, ..Default::default() };
            let base = match_lanes(&pred, &gt, &cfg);
            let mut rp = pred.clone();
            rp.reverse();
            let mut rg = gt.clone();
            rg.rotate_left(gt.len().min(1));
            let other = match_lanes(&rp, &rg, &cfg);
            prop_assert_eq!(
                (base.matched_points, base.false_positives, base.missed),
                (other.matched_points, other.false_positives, other.missed)
            );
            let wider = match_lanes(&pred, &gt, &MetricsConfig { threshold_px: t1 + dt, ..cfg });
            prop_assert!(wider.matched_points >= base.matched_points);
            prop_assert!(wider.missed <= base.missed);
            prop_assert!(base.matched_points <= base.gt_points);
            prop_assert!(base.false_positives <= base.n_pred && base.missed <= base.n_gt);
        }
    }
}
