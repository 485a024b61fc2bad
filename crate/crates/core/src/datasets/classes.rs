use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lane boundary type. Codes `0..=7` are stable and used in checkpoints and
/// the C interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[repr(u8)]
pub enum ClassLabel {
    SingleWhiteContinuous = 0,
    DoubleWhiteContinuous = 1,
    SingleYellowContinuous = 2,
    DoubleYellowContinuous = 3,
    Dashed = 4,
    DoubleDashed = 5,
    BottsDots = 6,
    Unknown = 7,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 8] = [
        ClassLabel::SingleWhiteContinuous,
        ClassLabel::DoubleWhiteContinuous,
        ClassLabel::SingleYellowContinuous,
        ClassLabel::DoubleYellowContinuous,
        ClassLabel::Dashed,
        ClassLabel::DoubleDashed,
        ClassLabel::BottsDots,
        ClassLabel::Unknown,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn token(self) -> &'static str {
        match self {
            ClassLabel::SingleWhiteContinuous => "single_white_continuous",
            ClassLabel::DoubleWhiteContinuous => "double_white_continuous",
            ClassLabel::SingleYellowContinuous => "single_yellow_continuous",
            ClassLabel::DoubleYellowContinuous => "double_yellow_continuous",
            ClassLabel::Dashed => "dashed",
            ClassLabel::DoubleDashed => "double_dashed",
            ClassLabel::BottsDots => "botts_dots",
            ClassLabel::Unknown => "unknown",
        }
    }

    pub fn is_continuous(self) -> bool {
        matches!(
            self,
            ClassLabel::SingleWhiteContinuous
                | ClassLabel::DoubleWhiteContinuous
                | ClassLabel::SingleYellowContinuous
                | ClassLabel::DoubleYellowContinuous
        )
    }

    pub fn is_yellow(self) -> bool {
        matches!(
            self,
            ClassLabel::SingleYellowContinuous | ClassLabel::DoubleYellowContinuous
        )
    }

    pub fn is_double(self) -> bool {
        matches!(
            self,
            ClassLabel::DoubleWhiteContinuous | ClassLabel::DoubleYellowContinuous | ClassLabel::DoubleDashed
        )
    }

    fn valid_tokens() -> String {
        Self::ALL.map(Self::token).join(", ")
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.token() == s)
            .ok_or_else(|| Error::UnknownClassToken {
                token: s.to_string(),
                valid: Self::valid_tokens(),
            })
    }
}

/// Per-boundary class labels keyed by `(raw_file, lane index)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassAnnotations {
    labels: HashMap<(String, usize), ClassLabel>,
}

/// One line of the sidecar JSON-lines file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassRecord {
    pub raw_file: String,
    pub classes: Vec<String>,
}

impl ClassAnnotations {
    pub fn insert(&mut self, source_id: &str, boundary: usize, label: ClassLabel) -> Result<()> {
        match self.labels.entry((source_id.to_string(), boundary)) {
            std::collections::hash_map::Entry::Occupied(_) => Err(Error::DuplicateAnnotation {
                source_id: source_id.to_string(),
                boundary,
            }),
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(label);
                Ok(())
            }
        }
    }

    /// Class of a boundary, `Unknown` when not annotated.
    pub fn get(&self, source_id: &str, boundary: usize) -> ClassLabel {
        self.labels
            .get(&(source_id.to_string(), boundary))
            .copied()
            .unwrap_or(ClassLabel::Unknown)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, usize), &ClassLabel)> {
        self.labels.iter()
    }

    /// Parses JSON lines (`{"raw_file": ..., "classes": [...]}`).
    pub fn parse_jsonl(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ClassRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
                record: format!("class annotation line {}", lineno + 1),
                reason: e.to_string(),
            })?;
            for (i, token) in rec.classes.iter().enumerate() {
                out.insert(&rec.raw_file, i, token.parse()?)?;
            }
        }
        Ok(out)
    }

    /// Parses `raw_file,boundary_index,token` rows. A header row starting with
    /// `raw_file` is skipped.
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut out = Self::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("raw_file") {
                continue;
            }
            let fields: Vec<&str> = line.rsplitn(3, ',').collect();
            let malformed = |reason: &str| Error::MalformedRecord {
                record: format!("class annotation line {}", lineno + 1),
                reason: reason.to_string(),
            };
            let [token, index, raw_file] = fields[..] else {
                return Err(malformed("expected raw_file,boundary_index,token"));
            };
            let index: usize = index
                .trim()
                .parse()
                .map_err(|_| malformed("boundary index is not an integer"))?;
            out.insert(raw_file.trim(), index, token.trim().parse()?)?;
        }
        Ok(out)
    }

    pub fn to_jsonl(&self) -> String {
        let mut by_file: std::collections::BTreeMap<&str, Vec<(usize, ClassLabel)>> = Default::default();
        for ((file, idx), label) in &self.labels {
            by_file.entry(file).or_default().push((*idx, *label));
        }
        let mut out = String::new();
        for (file, mut entries) in by_file {
            entries.sort();
            let n = entries.last().map_or(0, |e| e.0 + 1);
            let mut classes = vec![ClassLabel::Unknown.token().to_string(); n];
            for (i, label) in entries {
                classes[i] = label.token().to_string();
            }
            let rec = ClassRecord {
                raw_file: file.to_string(),
                classes,
            };
            out.push_str(&serde_json::to_string(&rec).expect("class record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Loads a sidecar class file; `.csv` files use the CSV layout, anything else
/// is read as JSON lines.
pub fn load_class_annotations(path: &Path) -> Result<ClassAnnotations> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        ClassAnnotations::parse_csv(&text)
    } else {
        ClassAnnotations::parse_jsonl(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_stable() {
        for (i, c) in ClassLabel::ALL.iter().enumerate() {
            assert_eq!(c.code() as usize, i);
            assert_eq!(ClassLabel::from_code(i as u8), Some(*c));
        }
        assert_eq!(ClassLabel::from_code(8), None);
    }

    #[test]
    fn dashed_entry_and_default() {
        let ann = ClassAnnotations::parse_jsonl(r#"{"raw_file": "clips/X/20.jpg", "classes": ["dashed"]}"#).unwrap();
        assert_eq!(ann.get("clips/X/20.jpg", 0), ClassLabel::Dashed);
        assert_eq!(ann.get("clips/X/20.jpg", 1), ClassLabel::Unknown);
        assert_eq!(ann.get("clips/Y/20.jpg", 0), ClassLabel::Unknown);
    }

    #[test]
    fn all_tokens_populate_all_members() {
        let tokens: Vec<String> = ClassLabel::ALL.iter().map(|c| format!("\"{c}\"")).collect();
        let line = format!(r#"{{"raw_file": "a.jpg", "classes": [{}]}}"#, tokens.join(","));
        let ann = ClassAnnotations::parse_jsonl(&line).unwrap();
        let got: Vec<ClassLabel> = (0..8).map(|i| ann.get("a.jpg", i)).collect();
        assert_eq!(got, ClassLabel::ALL.to_vec());
    }

    #[test]
    fn unknown_token_lists_valid_ones() {
        let err = ClassAnnotations::parse_jsonl(r#"{"raw_file": "a", "classes": ["zigzag"]}"#).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("zigzag") && msg.contains("botts_dots"), "{msg}");
    }

    #[test]
    fn duplicate_keys_rejected() {
        let text = "{\"raw_file\": \"a\", \"classes\": [\"dashed\"]}\n{\"raw_file\": \"a\", \"classes\": [\"dashed\"]}";
        assert!(matches!(
            ClassAnnotations::parse_jsonl(text),
            Err(Error::DuplicateAnnotation { boundary: 0, .. })
        ));
        assert!(ClassAnnotations::parse_csv("a,0,dashed\na,0,unknown").is_err());
    }

    #[test]
    fn csv_variant_matches_jsonl() {
        let csv = "raw_file,boundary_index,class\nclips/a.jpg,0,dashed\nclips/a.jpg,1,botts_dots\n";
        let jsonl = r#"{"raw_file": "clips/a.jpg", "classes": ["dashed", "botts_dots"]}"#;
        assert_eq!(
            ClassAnnotations::parse_csv(csv).unwrap(),
            ClassAnnotations::parse_jsonl(jsonl).unwrap()
        );
        let round = ClassAnnotations::parse_jsonl(&ClassAnnotations::parse_csv(csv).unwrap().to_jsonl()).unwrap();
        assert_eq!(round, ClassAnnotations::parse_csv(csv).unwrap());
    }
}
