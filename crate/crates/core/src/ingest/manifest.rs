use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Label {
    MitoticFigure,
    HardNegative,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::MitoticFigure
    }

    pub fn as_u8(self) -> u8 {
        u8::from(self.is_positive())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::MitoticFigure => "MITOTIC_FIGURE",
            Label::HardNegative => "HARD_NEGATIVE",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace([' ', '-'], "_").as_str() {
            "MITOTIC_FIGURE" | "MITOSIS" | "MITOTIC" | "MF" | "1" => Ok(Label::MitoticFigure),
            "HARD_NEGATIVE" | "NONMITOTIC" | "NON_MITOTIC" | "NON_MITOTIC_FIGURE" | "IMPOSTER" | "LOOKALIKE"
            | "HN" | "0" => Ok(Label::HardNegative),
            other => Err(Error::invalid("label", format!("unknown label `{other}`"))),
        }
    }
}

/// One labeled point anchored to a case, a domain and an image location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub annotation_id: String,
    pub case_id: String,
    pub domain: String,
    pub image_ref: String,
    pub x: f64,
    pub y: f64,
    pub label: Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub mitotic_figure: usize,
    pub hard_negative: usize,
}

impl LabelCounts {
    pub fn total(&self) -> usize {
        self.mitotic_figure + self.hard_negative
    }

    fn add(&mut self, label: Label) {
        match label {
            Label::MitoticFigure => self.mitotic_figure += 1,
            Label::HardNegative => self.hard_negative += 1,
        }
    }
}

/// Canonical dataset: validated records plus the image dimension table.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub image_root: Option<String>,
    pub images: BTreeMap<String, ImageInfo>,
    pub records: Vec<AnnotationRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    schema_version: u32,
    manifest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_root: Option<String>,
    images: BTreeMap<String, ImageInfo>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    schema_version: u32,
    #[serde(flatten)]
    record: AnnotationRecord,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>) -> Self {
        DatasetManifest {
            name: name.into(),
            ..Default::default()
        }
    }

    /// Checks id uniqueness, nonempty case ids and in-bounds coordinates.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.records {
            if !ids.insert(r.annotation_id.as_str()) {
                return Err(Error::invalid("annotation_id", format!("duplicate `{}`", r.annotation_id)));
            }
            if r.case_id.trim().is_empty() {
                return Err(Error::invalid("case_id", format!("empty for `{}`", r.annotation_id)));
            }
            let info = self.images.get(&r.image_ref).ok_or_else(|| {
                Error::invalid("image_ref", format!("`{}` of `{}` not in image table", r.image_ref, r.annotation_id))
            })?;
            if !in_bounds(r, info) {
                return Err(Error::invalid(
                    "coordinates",
                    format!("({}, {}) of `{}` outside {}x{}", r.x, r.y, r.annotation_id, info.width, info.height),
                ));
            }
        }
        Ok(())
    }

    pub fn label_counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for r in &self.records {
            c.add(r.label);
        }
        c
    }

    /// Annotation count per case (cases with zero annotations are absent).
    pub fn case_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for r in &self.records {
            *out.entry(r.case_id.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn domains(&self) -> BTreeSet<String> {
        self.records.iter().map(|r| r.domain.clone()).collect()
    }

    pub fn record(&self, annotation_id: &str) -> Option<&AnnotationRecord> {
        self.records.iter().find(|r| r.annotation_id == annotation_id)
    }

    pub fn index(&self) -> BTreeMap<&str, &AnnotationRecord> {
        self.records.iter().map(|r| (r.annotation_id.as_str(), r)).collect()
    }

    pub fn records_in_cases<'a>(&'a self, cases: &'a BTreeSet<String>) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.records.iter().filter(move |r| cases.contains(&r.case_id))
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let io = |e| Error::io("<manifest>", e);
        let header = HeaderLine {
            schema_version: MANIFEST_SCHEMA_VERSION,
            manifest: self.name.clone(),
            image_root: self.image_root.clone(),
            images: self.images.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for r in &self.records {
            serde_json::to_writer(
                &mut w,
                &RecordLine {
                    schema_version: MANIFEST_SCHEMA_VERSION,
                    record: r.clone(),
                },
            )?;
            w.write_all(b"\n").map_err(io)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse = |line: usize, e: String| Error::Parse {
            what: format!("manifest line {}", line + 1),
            message: e,
        };
        let (_, first) = lines.next().ok_or_else(|| parse(0, "missing header line".into()))?;
        let first = first.map_err(|e| Error::io("<manifest>", e))?;
        let header: HeaderLine = serde_json::from_str(&first).map_err(|e| parse(0, e.to_string()))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(parse(0, format!("unsupported schema_version {}", header.schema_version)));
        }
        let mut manifest = DatasetManifest {
            name: header.manifest,
            image_root: header.image_root,
            images: header.images,
            records: Vec::new(),
        };
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<manifest>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: RecordLine = serde_json::from_str(&line).map_err(|e| parse(i, e.to_string()))?;
            if rec.schema_version != MANIFEST_SCHEMA_VERSION {
                return Err(parse(i, format!("unsupported schema_version {}", rec.schema_version)));
            }
            manifest.records.push(rec.record);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_jsonl(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(f))
    }
}

pub(crate) fn in_bounds(r: &AnnotationRecord, info: &ImageInfo) -> bool {
    r.x.is_finite() && r.y.is_finite() && r.x >= 0.0 && r.y >= 0.0 && r.x < info.width as f64 && r.y < info.height as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> DatasetManifest {
        let mut m = DatasetManifest::new("tiny");
        m.images.insert("img0".into(), ImageInfo { width: 300, height: 300 });
        for (i, label) in [Label::MitoticFigure, Label::HardNegative, Label::MitoticFigure].into_iter().enumerate() {
            m.records.push(AnnotationRecord {
                annotation_id: format!("a{i}"),
                case_id: "c0".into(),
                domain: "A".into(),
                image_ref: "img0".into(),
                x: 10.0 + i as f64,
                y: 20.5,
                label,
            });
        }
        m
    }

    #[test]
    fn jsonl_round_trip_and_line_format() {
        let m = tiny();
        let mut buf = Vec::new();
        m.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let second: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let keys: BTreeSet<&str> = second.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(
            keys,
            ["annotation_id", "case_id", "domain", "image_ref", "label", "schema_version", "x", "y"].into_iter().collect()
        );
        assert_eq!(DatasetManifest::read_jsonl(&buf[..]).unwrap(), m);
    }

    #[test]
    fn counts_and_validation() {
        let mut m = tiny();
        assert_eq!(m.label_counts(), LabelCounts { mitotic_figure: 2, hard_negative: 1 });
        m.records[1].annotation_id = "a0".into();
        assert!(m.validate().is_err());
        let mut m = tiny();
        m.records[0].x = 300.0;
        assert!(m.validate().is_err());
        let empty = DatasetManifest::new("empty");
        empty.validate().unwrap();
        assert_eq!(empty.label_counts().total(), 0);
    }

    #[test]
    fn label_parsing() {
        assert_eq!("mitotic figure".parse::<Label>().unwrap(), Label::MitoticFigure);
        assert_eq!("hard-negative".parse::<Label>().unwrap(), Label::HardNegative);
        assert!("tumor".parse::<Label>().is_err());
    }
}
