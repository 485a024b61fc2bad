//! TuSimple JSON-lines annotations: one object per frame with `lanes`
//! (per-boundary x lists), `h_samples` (shared rows) and `raw_file`.

use std::path::Path;

use serde_json::{json, Value};

use super::{ClassAnnotations, ImageSource, Sample};
use crate::error::{Error, Result};
use crate::geometry::{Polyline, K_MAX};

/// x value marking a row where the lane is absent.
pub const MISSING_X: f64 = -2.0;

/// Frame size of the TuSimple lane detection images.
pub const TUSIMPLE_SIZE: (u32, u32) = (1280, 720);

#[derive(Debug, Clone, PartialEq)]
pub struct TuSimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<i32>,
    pub raw_file: String,
}

impl TuSimpleRecord {
    pub fn parse(line: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            record: excerpt(line),
            reason: e.to_string(),
        })?;
        let record_name = value
            .get("raw_file")
            .and_then(Value::as_str)
            .map(str::to_string)
            .unwrap_or_else(|| excerpt(line));
        let malformed = |reason: String| Error::MalformedRecord {
            record: record_name.clone(),
            reason,
        };
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("record is not a JSON object".into()))?;
        for key in ["lanes", "h_samples", "raw_file"] {
            if !obj.contains_key(key) {
                return Err(malformed(format!("missing key {key:?}")));
            }
        }
        let raw_file = obj["raw_file"]
            .as_str()
            .ok_or_else(|| malformed("\"raw_file\" is not a string".into()))?
            .to_string();
        let h_samples = obj["h_samples"]
            .as_array()
            .ok_or_else(|| malformed("\"h_samples\" is not a list".into()))?
            .iter()
            .map(|v| v.as_i64().map(|r| r as i32))
            .collect::<Option<Vec<i32>>>()
            .ok_or_else(|| malformed("\"h_samples\" must hold integers".into()))?;
        if h_samples.windows(2).any(|w| w[0] >= w[1]) {
            return Err(malformed("\"h_samples\" must be strictly increasing".into()));
        }
        let lanes = obj["lanes"]
            .as_array()
            .ok_or_else(|| malformed("\"lanes\" is not a list".into()))?
            .iter()
            .enumerate()
            .map(|(i, lane)| {
                let xs = lane
                    .as_array()
                    .ok_or_else(|| malformed(format!("lane {i} is not a list")))?
                    .iter()
                    .map(Value::as_f64)
                    .collect::<Option<Vec<f64>>>()
                    .ok_or_else(|| malformed(format!("lane {i} must hold numbers")))?;
                if xs.len() != h_samples.len() {
                    return Err(malformed(format!(
                        "lane {i} has {} entries but h_samples has {}",
                        xs.len(),
                        h_samples.len()
                    )));
                }
                Ok(xs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            lanes,
            h_samples,
            raw_file,
        })
    }

    /// Serializes to a single line; integral coordinates are written as
    /// integers, as in the original annotation files.
    pub fn to_line(&self) -> String {
        let lanes: Vec<Vec<Value>> = self
            .lanes
            .iter()
            .map(|lane| lane.iter().map(|&x| number(x)).collect())
            .collect();
        json!({
            "lanes": lanes,
            "h_samples": self.h_samples,
            "raw_file": self.raw_file,
        })
        .to_string()
    }

    pub fn polylines(&self) -> Vec<Polyline> {
        self.lanes
            .iter()
            .map(|xs| {
                let cols = xs.iter().map(|&x| (x != MISSING_X).then_some(x)).collect();
                Polyline::new(self.h_samples.clone(), cols).expect("rows validated at parse time")
            })
            .collect()
    }

    /// Builds a record from polylines, resampled onto the union of their rows.
    pub fn from_polylines(raw_file: &str, lanes: &[Polyline]) -> Self {
        let mut rows: Vec<i32> = lanes.iter().flat_map(|p| p.rows().to_vec()).collect();
        rows.sort_unstable();
        rows.dedup();
        let lanes = lanes
            .iter()
            .map(|p| rows.iter().map(|&r| p.x_at(r).unwrap_or(MISSING_X)).collect())
            .collect();
        Self {
            lanes,
            h_samples: rows,
            raw_file: raw_file.to_string(),
        }
    }
}

fn number(x: f64) -> Value {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        json!(x as i64)
    } else {
        json!(x)
    }
}

fn excerpt(line: &str) -> String {
    let s: String = line.chars().take(60).collect();
    format!("{s:?}")
}

/// Parses one annotation line into a sample whose image is loaded lazily from
/// `raw_file`. Classes default to `Unknown` until annotations are attached.
pub fn parse_tusimple(line: &str) -> Result<Sample> {
    let record = TuSimpleRecord::parse(line)?;
    Ok(Sample::from_record(&record, None))
}

impl Sample {
    /// Converts a record. When it has more than `K_MAX` lanes, empty lanes are
    /// dropped first, then the lanes farthest from the bottom-center of the
    /// frame; `lane_ids` keeps the original indices for class lookup.
    pub fn from_record(record: &TuSimpleRecord, classes: Option<&ClassAnnotations>) -> Sample {
        let polylines = record.polylines();
        let mut keep: Vec<usize> = (0..polylines.len()).collect();
        if keep.len() > K_MAX {
            keep.retain(|&i| !polylines[i].is_empty());
        }
        if keep.len() > K_MAX {
            let center = TUSIMPLE_SIZE.0 as f64 / 2.0;
            let bottom_x = |p: &Polyline| p.points().last().map_or(f64::INFINITY, |(_, x)| x);
            keep.sort_by(|&a, &b| {
                (bottom_x(&polylines[a]) - center)
                    .abs()
                    .total_cmp(&(bottom_x(&polylines[b]) - center).abs())
            });
            keep.truncate(K_MAX);
            keep.sort_unstable();
            log::debug!("{}: keeping lanes {keep:?} of {}", record.raw_file, polylines.len());
        }
        let boundaries = keep.iter().map(|&i| polylines[i].clone()).collect();
        let labels = keep
            .iter()
            .map(|&i| classes.map_or(super::ClassLabel::Unknown, |c| c.get(&record.raw_file, i)))
            .collect();
        Sample {
            image: ImageSource::Path(record.raw_file.clone().into()),
            boundaries,
            classes: labels,
            lane_ids: keep,
            source_id: record.raw_file.clone(),
        }
    }

    pub fn to_record(&self) -> TuSimpleRecord {
        TuSimpleRecord::from_polylines(&self.source_id, &self.boundaries)
    }
}

/// Reads every record of a JSON-lines annotation file.
pub fn load_tusimple(path: &Path, classes: Option<&ClassAnnotations>) -> Result<Vec<Sample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| TuSimpleRecord::parse(l).map(|r| Sample::from_record(&r, classes)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record_line(lanes: &[Vec<i64>], rows: &[i32]) -> String {
        json!({"lanes": lanes, "h_samples": rows, "raw_file": "clips/0530/1492626760788443246_0/20.jpg"}).to_string()
    }

    #[test]
    fn two_lanes_of_48_samples() {
        let rows: Vec<i32> = (0..48).map(|i| 240 + 10 * i).collect();
        let a: Vec<i64> = (0..48).map(|i| if i < 5 { -2 } else { 600 - 5 * i }).collect();
        let b: Vec<i64> = (0..48).map(|i| 700 + 6 * i).collect();
        let s = parse_tusimple(&record_line(&[a.clone(), b.clone()], &rows)).unwrap();
        assert_eq!(s.boundaries.len(), 2);
        assert_eq!(s.classes.len(), 2);
        assert_eq!(s.boundaries[0].len(), 43);
        assert_eq!(s.boundaries[1].len(), 48);
        // independent read of the same line
        let v: Value = serde_json::from_str(&record_line(&[a, b], &rows)).unwrap();
        for (lane, poly) in v["lanes"].as_array().unwrap().iter().zip(&s.boundaries) {
            for (j, x) in lane.as_array().unwrap().iter().enumerate() {
                let x = x.as_i64().unwrap();
                let expect = (x != -2).then_some(x as f64);
                assert_eq!(poly.x_at(rows[j]), expect);
            }
        }
        assert_eq!(s.source_id, "clips/0530/1492626760788443246_0/20.jpg");
    }

    #[test]
    fn all_missing_lane_is_empty() {
        let s = parse_tusimple(&record_line(&[vec![-2, -2, -2], vec![1, 2, 3]], &[1, 2, 3])).unwrap();
        assert!(s.boundaries[0].is_empty());
        assert_eq!(s.boundaries[1].len(), 3);
    }

    #[test]
    fn malformed_records_are_named() {
        let err = parse_tusimple(&record_line(&[vec![1, 2]], &[1, 2, 3])).unwrap_err();
        match err {
            Error::MalformedRecord { record, reason } => {
                assert!(record.contains("20.jpg"));
                assert!(reason.contains("lane 0"));
            }
            e => panic!("unexpected {e}"),
        }
        let err = parse_tusimple(r#"{"lanes": [], "raw_file": "x.jpg"}"#).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { ref record, ref reason }
            if record == "x.jpg" && reason.contains("h_samples")));
        assert!(matches!(parse_tusimple("not json"), Err(Error::MalformedRecord { .. })));
    }

    #[test]
    fn five_lanes_keep_the_central_four() {
        let rows = [700];
        let lanes = vec![vec![10], vec![400], vec![600], vec![800], vec![1200]];
        let s = parse_tusimple(&record_line(&lanes, &rows)).unwrap();
        assert_eq!(s.lane_ids, vec![1, 2, 3, 4]);
        let lanes = vec![vec![10], vec![-2], vec![600], vec![800], vec![1270]];
        let s = parse_tusimple(&record_line(&lanes, &rows)).unwrap();
        assert_eq!(s.lane_ids, vec![0, 2, 3, 4]);
    }

    proptest! {
        #[test]
        fn parsed_samples_respect_invariants(
            n_rows in 1usize..20,
            lanes in prop::collection::vec(prop::collection::vec(prop_oneof![Just(-2i64), 0i64..1280], 20), 0..6),
        ) {
            let rows: Vec<i32> = (0..n_rows as i32).map(|i| 160 + 10 * i).collect();
            let lanes: Vec<Vec<i64>> = lanes.into_iter().map(|l| l[..n_rows].to_vec()).collect();
            let s = parse_tusimple(&record_line(&lanes, &rows)).unwrap();
            prop_assert!(s.boundaries.len() <= K_MAX);
            prop_assert_eq!(s.boundaries.len(), s.classes.len());
        }
    }
}
