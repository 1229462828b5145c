//! Grounding datasets and their on-disk format.
//!
//! A dataset directory holds three files:
//!
//! * `dataset.json`: UTF-8 index with a format version, the raw feature
//!   dimension, per-image region records and per-expression records;
//! * `features.bin`: every subject grid as little-endian `f64`, row-major,
//!   addressed by element offsets stored in the index;
//! * `vocab.txt`: newline-delimited tokens, line `n` holding id `n + 2`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::Vocabulary;
use crate::params::GRID_SLOTS;
use crate::tensor::Tensor;
use crate::visual::{order_neighbors, BBox, ContextRecord, ImageSize, RegionFeatures};

pub const FORMAT_NAME: &str = "mutatt-dataset";
pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "dataset.json";
pub const FEATURES_FILE: &str = "features.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub bbox: BBox,
    pub category: usize,
    /// `49 x d_v`.
    pub grid: Tensor,
    /// Indices of same-category regions in the same list.
    pub context: Vec<usize>,
}

impl Region {
    /// Column mean of the subject grid.
    pub fn pooled_feature(&self) -> Vec<f64> {
        let (rows, cols) = (self.grid.rows(), self.grid.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            out.iter_mut().zip(self.grid.row(r)).for_each(|(o, &v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub id: usize,
    pub size: ImageSize,
    /// Annotated regions.
    pub regions: Vec<Region>,
    /// Detector proposals; may be empty.
    pub detections: Vec<Region>,
}

/// Which region list of an image to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionSet {
    Annotated,
    Detected,
}

impl Image {
    pub fn regions(&self, set: RegionSet) -> &[Region] {
        match set {
            RegionSet::Annotated => &self.regions,
            RegionSet::Detected => &self.detections,
        }
    }

    /// Model inputs for region `index`, with the nearest five context
    /// neighbours resolved.
    pub fn region_features(&self, set: RegionSet, index: usize) -> RegionFeatures {
        let list = self.regions(set);
        let region = &list[index];
        let boxes: Vec<BBox> = region.context.iter().map(|&j| list[j].bbox).collect();
        let context = order_neighbors(&region.bbox, &boxes)
            .into_iter()
            .map(|k| {
                let n = &list[region.context[k]];
                ContextRecord {
                    feature: n.pooled_feature(),
                    bbox: n.bbox,
                    category: n.category,
                }
            })
            .collect();
        RegionFeatures {
            bbox: region.bbox,
            category: region.category,
            grid: region.grid.clone(),
            context,
            image: self.size,
        }
    }

    pub fn all_region_features(&self, set: RegionSet) -> Vec<RegionFeatures> {
        (0..self.regions(set).len())
            .map(|i| self.region_features(set, i))
            .collect()
    }
}

/// Same-category context lists for every region of a list.
pub fn same_category_context(regions: &mut [Region]) {
    let cats: Vec<usize> = regions.iter().map(|r| r.category).collect();
    for (i, r) in regions.iter_mut().enumerate() {
        r.context = (0..cats.len()).filter(|&j| j != i && cats[j] == cats[i]).collect();
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expression {
    pub id: usize,
    pub image_id: usize,
    /// Index into the image's annotated regions.
    pub target: usize,
    pub tokens: Vec<String>,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub visual_dim: usize,
    pub vocab: Vocabulary,
    pub images: Vec<Image>,
    pub expressions: Vec<Expression>,
    image_index: HashMap<usize, usize>,
}

impl Dataset {
    pub fn new(visual_dim: usize, vocab: Vocabulary, images: Vec<Image>, expressions: Vec<Expression>) -> Result<Self> {
        let image_index = images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let ds = Self {
            visual_dim,
            vocab,
            images,
            expressions,
            image_index,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn image(&self, id: usize) -> Option<&Image> {
        self.image_index.get(&id).map(|&i| &self.images[i])
    }

    pub fn image_of(&self, expr: &Expression) -> &Image {
        self.image(expr.image_id).expect("validated image reference")
    }

    /// Expression indices whose split matches `filter` (all when `None`).
    pub fn instances(&self, filter: impl Fn(&str) -> bool) -> Vec<usize> {
        self.expressions
            .iter()
            .enumerate()
            .filter(|(_, e)| filter(&e.split))
            .map(|(i, _)| i)
            .collect()
    }

    /// Splits in order of first appearance.
    pub fn splits(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.expressions {
            if !out.contains(&e.split) {
                out.push(e.split.clone());
            }
        }
        out
    }

    pub fn has_detections(&self) -> bool {
        self.images.iter().any(|im| !im.detections.is_empty())
    }

    /// Checks every invariant; the error kind is that of the first violation
    /// and the message lists all of them.
    pub fn validate(&self) -> Result<()> {
        let mut violations: Vec<Error> = Vec::new();
        if self.image_index.len() != self.images.len() {
            violations.push(Error::Malformed("duplicate image ids".into()));
        }
        for im in &self.images {
            if !(im.size.width > 0.0 && im.size.height > 0.0) {
                violations.push(Error::DegenerateImage {
                    width: im.size.width,
                    height: im.size.height,
                });
            }
            for (set, list) in [("region", &im.regions), ("detection", &im.detections)] {
                for (r, region) in list.iter().enumerate() {
                    if region.grid.shape() != [GRID_SLOTS, self.visual_dim] {
                        violations.push(Error::DimensionMismatch(format!(
                            "image {} {set} {r}: grid shape {:?}, expected [{GRID_SLOTS}, {}]",
                            im.id,
                            region.grid.shape(),
                            self.visual_dim
                        )));
                    }
                    if !region.bbox.is_valid() {
                        violations.push(Error::InvalidBox(format!("image {} {set} {r}: {}", im.id, region.bbox)));
                    }
                    for &c in &region.context {
                        if c >= list.len() || c == r {
                            violations.push(Error::DanglingReference(format!(
                                "image {} {set} {r}: context reference {c}",
                                im.id
                            )));
                        }
                    }
                }
            }
        }
        for e in &self.expressions {
            match self.image(e.image_id) {
                None => violations.push(Error::DanglingReference(format!(
                    "expression {} refers to missing image {}",
                    e.id, e.image_id
                ))),
                Some(im) if e.target >= im.regions.len() => {
                    violations.push(Error::DanglingReference(format!(
                        "expression {} targets region {} but image {} has {} regions",
                        e.id,
                        e.target,
                        im.id,
                        im.regions.len()
                    )))
                }
                _ => {}
            }
            if e.tokens.is_empty() {
                violations.push(Error::Malformed(format!("expression {} has no tokens", e.id)));
            }
        }
        if violations.is_empty() {
            return Ok(());
        }
        let summary = violations.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        let first = violations.swap_remove(0);
        Err(match first {
            Error::DanglingReference(_) => Error::DanglingReference(summary),
            Error::DimensionMismatch(_) => Error::DimensionMismatch(summary),
            Error::InvalidBox(_) => Error::InvalidBox(summary),
            _ => Error::Malformed(summary),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        let mut record = |r: &Region| {
            for v in r.grid.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let rec = RegionRecord {
                bbox: [r.bbox.x_tl, r.bbox.y_tl, r.bbox.x_br, r.bbox.y_br],
                category: r.category,
                offset,
                context: r.context.clone(),
            };
            offset += r.grid.len();
            rec
        };
        let images = self
            .images
            .iter()
            .map(|im| ImageRecord {
                id: im.id,
                width: im.size.width,
                height: im.size.height,
                regions: im.regions.iter().map(&mut record).collect(),
                detections: im.detections.iter().map(&mut record).collect(),
            })
            .collect();
        let index = IndexFile {
            format: FORMAT_NAME.into(),
            version: FORMAT_VERSION,
            d_v: self.visual_dim,
            image_count: self.images.len(),
            vocabulary: VOCAB_FILE.into(),
            features: FEATURES_FILE.into(),
            images,
            expressions: self.expressions.clone(),
        };
        fs::write(dir.join(FEATURES_FILE), &blob)?;
        fs::write(dir.join(INDEX_FILE), serde_json::to_string_pretty(&index)? + "\n")?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        if !index_path.exists() {
            return Err(Error::MissingFile(index_path));
        }
        let text = fs::read_to_string(&index_path)?;
        let raw: serde_json::Value = serde_json::from_str(&text)?;
        if raw.get("format").and_then(|v| v.as_str()) != Some(FORMAT_NAME) {
            return Err(Error::Malformed(format!("{} is not a {FORMAT_NAME} index", index_path.display())));
        }
        let version = raw.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let index: IndexFile = serde_json::from_value(raw)?;
        if index.image_count != index.images.len() {
            return Err(Error::Malformed(format!(
                "header declares {} images, body has {}",
                index.image_count,
                index.images.len()
            )));
        }
        let vocab = Vocabulary::load(&dir.join(&index.vocabulary))?;
        let blob_path = dir.join(&index.features);
        if !blob_path.exists() {
            return Err(Error::MissingFile(blob_path));
        }
        let bytes = fs::read(&blob_path)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::DimensionMismatch(format!(
                "feature blob length {} is not a multiple of 8 bytes",
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let block = GRID_SLOTS * index.d_v;
        let read = |im: usize, kind: &str, i: usize, rec: &RegionRecord| -> Result<Region> {
            let end = rec.offset.checked_add(block).filter(|&e| e <= values.len()).ok_or_else(|| {
                Error::DimensionMismatch(format!(
                    "image {im} {kind} {i}: feature block at offset {} needs {block} values, blob holds {}",
                    rec.offset,
                    values.len()
                ))
            })?;
            Ok(Region {
                bbox: BBox::new(rec.bbox[0], rec.bbox[1], rec.bbox[2], rec.bbox[3]),
                category: rec.category,
                grid: Tensor::matrix(GRID_SLOTS, index.d_v, values[rec.offset..end].to_vec()),
                context: rec.context.clone(),
            })
        };
        let mut images = Vec::with_capacity(index.images.len());
        for im in &index.images {
            let regions = im
                .regions
                .iter()
                .enumerate()
                .map(|(i, r)| read(im.id, "region", i, r))
                .collect::<Result<_>>()?;
            let detections = im
                .detections
                .iter()
                .enumerate()
                .map(|(i, r)| read(im.id, "detection", i, r))
                .collect::<Result<_>>()?;
            images.push(Image {
                id: im.id,
                size: ImageSize::new(im.width, im.height),
                regions,
                detections,
            });
        }
        Self::new(index.d_v, vocab, images, index.expressions)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionRecord {
    bbox: [f64; 4],
    category: usize,
    offset: usize,
    #[serde(default)]
    context: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageRecord {
    id: usize,
    width: f64,
    height: f64,
    regions: Vec<RegionRecord>,
    #[serde(default)]
    detections: Vec<RegionRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexFile {
    format: String,
    version: u32,
    d_v: usize,
    image_count: usize,
    vocabulary: String,
    features: String,
    images: Vec<ImageRecord>,
    expressions: Vec<Expression>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(x: f64, category: usize, fill: f64) -> Region {
        Region {
            bbox: BBox::new(x, 10.0, x + 20.0, 40.0),
            category,
            grid: Tensor::matrix(GRID_SLOTS, 2, vec![fill; GRID_SLOTS * 2]),
            context: Vec::new(),
        }
    }

    fn tiny() -> Dataset {
        let mut regions = vec![region(0.0, 1, 0.5), region(30.0, 1, -0.25), region(60.0, 2, 1.0)];
        same_category_context(&mut regions);
        let images = vec![Image {
            id: 7,
            size: ImageSize::new(100.0, 80.0),
            regions,
            detections: vec![region(1.0, 1, 0.5)],
        }];
        let expressions = vec![Expression {
            id: 0,
            image_id: 7,
            target: 1,
            tokens: vec!["red".into(), "cup".into()],
            split: "train".into(),
        }];
        Dataset::new(2, Vocabulary::from_tokens(["cup", "red"]), images, expressions).unwrap()
    }

    #[test]
    fn context_is_same_category() {
        let ds = tiny();
        assert_eq!(ds.images[0].regions[0].context, vec![1]);
        assert_eq!(ds.images[0].regions[2].context, Vec::<usize>::new());
        let f = ds.images[0].region_features(RegionSet::Annotated, 0);
        assert_eq!(f.context.len(), 1);
        assert_eq!(f.context[0].feature, vec![-0.25, -0.25]);
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
    }

    #[test]
    fn dangling_target_names_expression() {
        let mut ds = tiny();
        ds.expressions[0].target = 9;
        match ds.validate() {
            Err(Error::DanglingReference(msg)) => assert!(msg.contains("expression 0")),
            other => panic!("expected dangling reference, got {other:?}"),
        }
    }

    #[test]
    fn truncated_blob_reports_offsets() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let blob = dir.path().join(FEATURES_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8 * 10]).unwrap();
        match Dataset::load(dir.path()) {
            Err(Error::DimensionMismatch(msg)) => assert!(msg.contains("offset"), "{msg}"),
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn version_and_missing_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingFile(_))));
        tiny().save(dir.path()).unwrap();
        let path = dir.path().join(INDEX_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"version\": 1", "\"version\": 2");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            Dataset::load(dir.path()),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
