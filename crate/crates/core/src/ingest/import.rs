//! Importers from COCO-style JSON and delimited tables into the canonical
//! manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::manifest::{in_bounds, AnnotationRecord, DatasetManifest, ImageInfo, Label, LabelCounts};
use super::reader::TileReader;
use crate::error::{Error, Result};

/// Published totals for the public datasets the framework targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PublishedDataset {
    pub name: &'static str,
    pub images: usize,
    pub mitotic_figures: usize,
    pub hard_negatives: usize,
    pub tumor_types: usize,
    pub scanners: usize,
}

pub const PUBLISHED_DATASETS: [PublishedDataset; 2] = [
    PublishedDataset {
        name: "CCMCT",
        images: 32,
        mitotic_figures: 44_880,
        hard_negatives: 27_965,
        tumor_types: 1,
        scanners: 1,
    },
    PublishedDataset {
        name: "MIDOG 2022",
        images: 354,
        mitotic_figures: 11_051,
        hard_negatives: 9_501,
        tumor_types: 5,
        scanners: 4,
    },
];

pub fn published_dataset(name: &str) -> Option<&'static PublishedDataset> {
    PUBLISHED_DATASETS.iter().find(|d| d.name.eq_ignore_ascii_case(name))
}

/// How to interpret a COCO-style JSON export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CocoMapping {
    #[serde(default)]
    pub name: Option<String>,
    /// Category name (or numeric id as a string) to label.
    pub category_map: BTreeMap<String, Label>,
    /// Categories dropped silently instead of raising an error.
    #[serde(default)]
    pub ignore_categories: Vec<String>,
    /// Constant domain for every record when `domain_field` is absent.
    #[serde(default)]
    pub domain: Option<String>,
    /// Image-level field holding the domain.
    #[serde(default)]
    pub domain_field: Option<String>,
    /// Image-level field holding the case id; defaults to `file_name`.
    #[serde(default)]
    pub case_field: Option<String>,
    #[serde(default)]
    pub image_root: Option<String>,
}

/// Column mapping for a delimited export (one annotation per row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvMapping {
    #[serde(default)]
    pub name: Option<String>,
    /// Column with the annotation id; rows are numbered when absent.
    #[serde(default)]
    pub annotation_id: Option<String>,
    pub case_id: String,
    #[serde(default)]
    pub domain: Option<String>,
    #[serde(default)]
    pub default_domain: Option<String>,
    pub image_ref: String,
    pub x: String,
    pub y: String,
    pub label: String,
    /// Raw label value to label; falls back to the built-in names when empty.
    #[serde(default)]
    pub label_map: BTreeMap<String, Label>,
    #[serde(default)]
    pub width: Option<String>,
    #[serde(default)]
    pub height: Option<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub image_root: Option<String>,
}

fn default_delimiter() -> char {
    ','
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "lowercase")]
pub enum MappingConfig {
    Coco(CocoMapping),
    Csv(CsvMapping),
}

impl MappingConfig {
    /// Parses a mapping from TOML or JSON text (chosen by the first non-blank character).
    pub fn parse(text: &str) -> Result<Self> {
        if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| Error::Parse {
                what: "mapping config".into(),
                message: e.to_string(),
            })
        } else {
            toml::from_str(text).map_err(|e| Error::Parse {
                what: "mapping config".into(),
                message: e.to_string(),
            })
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quarantined {
    pub annotation_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImportReport {
    pub images: usize,
    pub totals: LabelCounts,
    pub per_domain: BTreeMap<String, LabelCounts>,
    pub per_case: BTreeMap<String, LabelCounts>,
    pub quarantined: Vec<Quarantined>,
    pub ignored: usize,
}

impl ImportReport {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        let mut r = ImportReport {
            images: m.images.len(),
            totals: m.label_counts(),
            ..Default::default()
        };
        for rec in &m.records {
            bump(r.per_domain.entry(rec.domain.clone()).or_default(), rec.label);
            bump(r.per_case.entry(rec.case_id.clone()).or_default(), rec.label);
        }
        r
    }

    /// Compares totals with a published dataset; returns mismatch descriptions.
    pub fn compare_published(&self, published: &PublishedDataset) -> Vec<String> {
        let mut out = Vec::new();
        if self.totals.mitotic_figure != published.mitotic_figures {
            out.push(format!(
                "mitotic figures: {} imported vs {} published",
                self.totals.mitotic_figure, published.mitotic_figures
            ));
        }
        if self.totals.hard_negative != published.hard_negatives {
            out.push(format!(
                "hard negatives: {} imported vs {} published",
                self.totals.hard_negative, published.hard_negatives
            ));
        }
        out
    }
}

fn bump(c: &mut LabelCounts, l: Label) {
    match l {
        Label::MitoticFigure => c.mitotic_figure += 1,
        Label::HardNegative => c.hard_negative += 1,
    }
}

/// Reads `source` according to `mapping`. `dims` supplies image sizes for
/// tabular sources that lack width/height columns.
pub fn import_manifest(
    source: impl AsRef<Path>,
    mapping: &MappingConfig,
    dims: Option<&dyn TileReader>,
) -> Result<(DatasetManifest, ImportReport)> {
    let source = source.as_ref();
    let text = std::fs::read_to_string(source).map_err(|e| Error::io(source, e))?;
    let stem = source.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    match mapping {
        MappingConfig::Coco(m) => import_coco_str(&text, m, &stem),
        MappingConfig::Csv(m) => import_csv_str(&text, m, dims, &stem),
    }
}

fn value_key(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn field<'a>(obj: &'a Value, key: &str, what: &str) -> Result<&'a Value> {
    obj.get(key).ok_or_else(|| Error::Parse {
        what: what.into(),
        message: format!("missing `{key}`"),
    })
}

fn as_usize(v: &Value, what: &str) -> Result<usize> {
    v.as_u64().map(|x| x as usize).or_else(|| v.as_f64().filter(|f| *f >= 0.0).map(|f| f as usize)).ok_or_else(|| {
        Error::Parse {
            what: what.into(),
            message: format!("expected a non-negative number, got {v}"),
        }
    })
}

struct Builder {
    manifest: DatasetManifest,
    report: ImportReport,
    ids: BTreeSet<String>,
}

impl Builder {
    fn new(name: String, image_root: Option<String>) -> Self {
        let mut manifest = DatasetManifest::new(name);
        manifest.image_root = image_root;
        Builder {
            manifest,
            report: ImportReport::default(),
            ids: BTreeSet::new(),
        }
    }

    fn push(&mut self, rec: AnnotationRecord) -> Result<()> {
        if !self.ids.insert(rec.annotation_id.clone()) {
            return Err(Error::invalid("annotation_id", format!("duplicate `{}`", rec.annotation_id)));
        }
        if rec.case_id.trim().is_empty() {
            return Err(Error::invalid("case_id", format!("empty for `{}`", rec.annotation_id)));
        }
        let reason = match self.manifest.images.get(&rec.image_ref) {
            None => Some(format!("image `{}` has no known dimensions", rec.image_ref)),
            Some(info) if !in_bounds(&rec, info) => Some(format!(
                "coordinate ({}, {}) outside {}x{}",
                rec.x, rec.y, info.width, info.height
            )),
            Some(_) => None,
        };
        match reason {
            Some(reason) => self.report.quarantined.push(Quarantined {
                annotation_id: rec.annotation_id,
                reason,
            }),
            None => self.manifest.records.push(rec),
        }
        Ok(())
    }

    fn finish(self) -> Result<(DatasetManifest, ImportReport)> {
        self.manifest.validate()?;
        let mut report = ImportReport::from_manifest(&self.manifest);
        report.quarantined = self.report.quarantined;
        report.ignored = self.report.ignored;
        Ok((self.manifest, report))
    }
}

pub fn import_coco_str(text: &str, m: &CocoMapping, default_name: &str) -> Result<(DatasetManifest, ImportReport)> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        what: "COCO document".into(),
        message: e.to_string(),
    })?;
    let empty = Vec::new();
    let arr = |key: &str| doc.get(key).and_then(Value::as_array).unwrap_or(&empty);

    let mut categories = BTreeMap::new();
    for c in arr("categories") {
        let id = value_key(field(c, "id", "category")?).unwrap_or_default();
        let name = c.get("name").and_then(Value::as_str).unwrap_or(&id).to_string();
        categories.insert(id, name);
    }

    let mut b = Builder::new(m.name.clone().unwrap_or_else(|| default_name.into()), m.image_root.clone());
    // image id -> (image_ref, case, domain)
    let mut image_meta = BTreeMap::new();
    for img in arr("images") {
        let id = value_key(field(img, "id", "image")?).unwrap_or_default();
        let file = field(img, "file_name", "image")?.as_str().unwrap_or_default().to_string();
        let width = as_usize(field(img, "width", "image")?, "image width")?;
        let height = as_usize(field(img, "height", "image")?, "image height")?;
        let case = match &m.case_field {
            Some(f) => img.get(f).and_then(value_key).ok_or_else(|| Error::Parse {
                what: format!("image `{file}`"),
                message: format!("missing case field `{f}`"),
            })?,
            None => file.clone(),
        };
        let domain = match &m.domain_field {
            Some(f) => img.get(f).and_then(value_key).ok_or_else(|| Error::Parse {
                what: format!("image `{file}`"),
                message: format!("missing domain field `{f}`"),
            })?,
            None => m.domain.clone().unwrap_or_else(|| "A".into()),
        };
        b.manifest.images.insert(file.clone(), ImageInfo { width, height });
        image_meta.insert(id, (file, case, domain));
    }

    for ann in arr("annotations") {
        let id = value_key(field(ann, "id", "annotation")?).unwrap_or_default();
        let cat = value_key(field(ann, "category_id", "annotation")?).unwrap_or_default();
        let cat_name = categories.get(&cat).cloned().unwrap_or_else(|| cat.clone());
        if m.ignore_categories.iter().any(|c| *c == cat_name || *c == cat) {
            b.report.ignored += 1;
            continue;
        }
        let label = *m.category_map.get(&cat_name).or_else(|| m.category_map.get(&cat)).ok_or_else(|| {
            Error::invalid("category", format!("category `{cat_name}` of annotation `{id}` is not mapped"))
        })?;
        let image_id = value_key(field(ann, "image_id", "annotation")?).unwrap_or_default();
        let Some((file, case, domain)) = image_meta.get(&image_id) else {
            b.report.quarantined.push(Quarantined {
                annotation_id: id,
                reason: format!("unknown image id `{image_id}`"),
            });
            continue;
        };
        let (x, y) = if let Some(bbox) = ann.get("bbox").and_then(Value::as_array) {
            let v: Vec<f64> = bbox.iter().filter_map(Value::as_f64).collect();
            if v.len() != 4 {
                return Err(Error::Parse {
                    what: format!("annotation `{id}`"),
                    message: "bbox must hold four numbers".into(),
                });
            }
            (v[0] + v[2] / 2.0, v[1] + v[3] / 2.0)
        } else if let Some(pt) = ann.get("point").and_then(Value::as_array) {
            let v: Vec<f64> = pt.iter().filter_map(Value::as_f64).collect();
            if v.len() != 2 {
                return Err(Error::Parse {
                    what: format!("annotation `{id}`"),
                    message: "point must hold two numbers".into(),
                });
            }
            (v[0], v[1])
        } else {
            return Err(Error::Parse {
                what: format!("annotation `{id}`"),
                message: "needs `bbox` or `point`".into(),
            });
        };
        b.push(AnnotationRecord {
            annotation_id: id,
            case_id: case.clone(),
            domain: domain.clone(),
            image_ref: file.clone(),
            x,
            y,
            label,
        })?;
    }
    b.finish()
}

pub fn import_csv_str(
    text: &str,
    m: &CsvMapping,
    dims: Option<&dyn TileReader>,
    default_name: &str,
) -> Result<(DatasetManifest, ImportReport)> {
    let parse_err = |message: String| Error::Parse {
        what: "tabular source".into(),
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(u8::try_from(m.delimiter).map_err(|_| Error::invalid("delimiter", "must be ASCII"))?)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = rdr.headers().map_err(|e| parse_err(e.to_string()))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::invalid("column mapping", format!("column `{name}` not found")))
    };
    let opt_col = |name: &Option<String>| -> Result<Option<usize>> { name.as_deref().map(col).transpose() };
    let c_id = opt_col(&m.annotation_id)?;
    let c_case = col(&m.case_id)?;
    let c_domain = opt_col(&m.domain)?;
    let c_image = col(&m.image_ref)?;
    let (c_x, c_y, c_label) = (col(&m.x)?, col(&m.y)?, col(&m.label)?);
    let (c_w, c_h) = (opt_col(&m.width)?, opt_col(&m.height)?);
    if (c_w.is_none() || c_h.is_none()) && dims.is_none() {
        return Err(Error::invalid(
            "column mapping",
            "width/height columns are required when no image store is available",
        ));
    }

    let mut b = Builder::new(m.name.clone().unwrap_or_else(|| default_name.into()), m.image_root.clone());
    let mut rows = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        let get = |c: usize| row.get(c).unwrap_or("").to_string();
        let num = |c: usize, what: &str| -> Result<f64> {
            get(c).parse::<f64>().map_err(|_| parse_err(format!("row {}: bad {what} `{}`", i + 1, get(c))))
        };
        let image_ref = get(c_image);
        if let (Some(cw), Some(ch)) = (c_w, c_h) {
            let info = ImageInfo {
                width: num(cw, "width")? as usize,
                height: num(ch, "height")? as usize,
            };
            if let Some(prev) = b.manifest.images.insert(image_ref.clone(), info) {
                if prev != info {
                    return Err(parse_err(format!("row {}: conflicting dimensions for `{image_ref}`", i + 1)));
                }
            }
        } else if !b.manifest.images.contains_key(&image_ref) {
            if let Ok((w, h)) = dims.expect("checked above").dimensions(&image_ref) {
                b.manifest.images.insert(image_ref.clone(), ImageInfo { width: w, height: h });
            }
        }
        let raw_label = get(c_label);
        let label = if m.label_map.is_empty() {
            raw_label.parse::<Label>()?
        } else {
            *m.label_map.get(&raw_label).ok_or_else(|| {
                Error::invalid("category", format!("label value `{raw_label}` on row {} is not mapped", i + 1))
            })?
        };
        let domain = match c_domain {
            Some(c) => get(c),
            None => m.default_domain.clone().unwrap_or_else(|| "A".into()),
        };
        rows.push(AnnotationRecord {
            annotation_id: c_id.map_or_else(|| format!("row{i}"), get),
            case_id: get(c_case),
            domain,
            image_ref,
            x: num(c_x, "x")?,
            y: num(c_y, "y")?,
            label,
        });
    }
    for r in rows {
        b.push(r)?;
    }
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn coco_mapping() -> CocoMapping {
        CocoMapping {
            name: None,
            category_map: [("mitotic figure".to_string(), Label::MitoticFigure), ("hard negative".to_string(), Label::HardNegative)]
                .into_iter()
                .collect(),
            ignore_categories: vec![],
            domain: None,
            domain_field: Some("tumor".into()),
            case_field: None,
            image_root: None,
        }
    }

    #[test]
    fn coco_counts_and_quarantine() {
        let doc = json!({
            "images": [
                {"id": 1, "file_name": "a.tiff", "width": 500, "height": 400, "tumor": "A"},
                {"id": 2, "file_name": "b.tiff", "width": 500, "height": 400, "tumor": "B"}
            ],
            "categories": [{"id": 1, "name": "mitotic figure"}, {"id": 2, "name": "hard negative"}],
            "annotations": [
                {"id": 10, "image_id": 1, "category_id": 1, "bbox": [90, 90, 20, 20]},
                {"id": 11, "image_id": 1, "category_id": 2, "bbox": [10, 10, 20, 20]},
                {"id": 12, "image_id": 2, "category_id": 1, "bbox": [495, 10, 20, 20]},
                {"id": 13, "image_id": 2, "category_id": 2, "point": [30, 40]}
            ]
        });
        let (m, r) = import_coco_str(&doc.to_string(), &coco_mapping(), "d").unwrap();
        assert_eq!(m.records.len(), 3);
        assert_eq!(m.records[0].x, 100.0);
        assert_eq!(r.quarantined.len(), 1);
        assert_eq!(r.quarantined[0].annotation_id, "12");
        assert_eq!(r.totals, LabelCounts { mitotic_figure: 1, hard_negative: 2 });
        assert_eq!(r.per_domain["B"].hard_negative, 1);
    }

    #[test]
    fn coco_errors() {
        let doc = json!({
            "images": [{"id": 1, "file_name": "a", "width": 50, "height": 50, "tumor": "A"}],
            "categories": [{"id": 3, "name": "other"}],
            "annotations": [{"id": 1, "image_id": 1, "category_id": 3, "bbox": [1, 1, 2, 2]}]
        });
        let err = import_coco_str(&doc.to_string(), &coco_mapping(), "d").unwrap_err();
        assert!(err.to_string().contains("not mapped"));
        let mut ignoring = coco_mapping();
        ignoring.ignore_categories.push("other".into());
        let (m, r) = import_coco_str(&doc.to_string(), &ignoring, "d").unwrap();
        assert!(m.records.is_empty());
        assert_eq!(r.ignored, 1);

        let dup = json!({
            "images": [{"id": 1, "file_name": "a", "width": 50, "height": 50, "tumor": "A"}],
            "categories": [{"id": 1, "name": "mitotic figure"}],
            "annotations": [
                {"id": 1, "image_id": 1, "category_id": 1, "bbox": [1, 1, 2, 2]},
                {"id": 1, "image_id": 1, "category_id": 1, "bbox": [3, 3, 2, 2]}
            ]
        });
        assert!(import_coco_str(&dup.to_string(), &coco_mapping(), "d").unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn empty_source_gives_empty_manifest() {
        let (m, r) = import_coco_str("{}", &coco_mapping(), "empty").unwrap();
        assert!(m.records.is_empty());
        assert_eq!(r.totals.total(), 0);
    }

    #[test]
    fn csv_import() {
        let text = "id,slide,x,y,cls,w,h\n1,s1,10,20,mitosis,100,100\n2,s1,30,40,imposter,100,100\n3,s2,150,5,mitosis,100,100\n";
        let mapping = MappingConfig::parse(
            r#"
            format = "csv"
            annotation_id = "id"
            case_id = "slide"
            image_ref = "slide"
            x = "x"
            y = "y"
            label = "cls"
            width = "w"
            height = "h"
            default_domain = "A"
            "#,
        )
        .unwrap();
        let MappingConfig::Csv(m) = mapping else { panic!() };
        let (man, rep) = import_csv_str(text, &m, None, "t").unwrap();
        assert_eq!(man.records.len(), 2);
        assert_eq!(rep.quarantined.len(), 1);
        assert_eq!(rep.per_case["s1"].total(), 2);
    }
}
