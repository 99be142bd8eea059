//! Annotated images, detector outputs and their JSON Lines file formats.
//!
//! Annotation files carry one image per line:
//!
//! ```text
//! {"image_id":"img_001","width":1024,"height":800,"source":"dashcam","boxes":[{"x_min":100,"y_min":200,"x_max":150,"y_max":240}]}
//! ```
//!
//! Detection files carry one scored box per line:
//!
//! ```text
//! {"image_id":"img_001","x_min":98.5,"y_min":201,"x_max":151,"y_max":239,"score":0.87}
//! ```
//!
//! Unknown keys are ignored and blank lines skipped. There is a single class
//! (pothole), so neither format carries a class field.
//!
//! Annotation guideline: a pothole is a bowl-shaped hole in the pavement larger
//! than roughly 175 cm² (about 15 cm across). Smaller surface defects are not
//! annotated, so ground truth never contains them.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub source_tag: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Annotation {
    pub image_id: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Detection {
    pub image_id: String,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// A problem found while reading a file. `line` is 1-based; 0 means the
/// problem is not tied to a line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub line: usize,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Parse,
    Validation,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            IssueKind::Parse => "parse error",
            IssueKind::Validation => "validation error",
        };
        if self.line > 0 {
            write!(f, "line {}: {}: {}", self.line, kind, self.message)
        } else {
            write!(f, "{}: {}", kind, self.message)
        }
    }
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{} ({} problem(s) in total)", .0[0], .0.len())]
    Invalid(Vec<Issue>),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("conversion error: {0}")]
    Conversion(String),
}

impl DatasetError {
    pub fn issues(&self) -> &[Issue] {
        match self {
            DatasetError::Invalid(issues) => issues,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    images: Vec<ImageRecord>,
    annotations: Vec<Annotation>,
    index: HashMap<String, usize>,
    pub split_tag: String,
}

impl Dataset {
    /// Builds a dataset, checking id uniqueness, image sizes and box bounds.
    pub fn new(
        images: Vec<ImageRecord>,
        annotations: Vec<Annotation>,
        split_tag: impl Into<String>,
    ) -> Result<Self, DatasetError> {
        let mut issues = Vec::new();
        let mut index = HashMap::with_capacity(images.len());
        for (i, img) in images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                issues.push(validation(
                    0,
                    format!("image {:?} has zero size", img.image_id),
                ));
            }
            if index.insert(img.image_id.clone(), i).is_some() {
                issues.push(validation(
                    0,
                    format!("duplicate image_id {:?}", img.image_id),
                ));
            }
        }
        for ann in &annotations {
            match index.get(&ann.image_id) {
                None => issues.push(validation(
                    0,
                    format!("annotation refers to unknown image_id {:?}", ann.image_id),
                )),
                Some(&i) => {
                    let img = &images[i];
                    if !ann.bbox.within(img.width as f64, img.height as f64) {
                        issues.push(validation(0, out_of_bounds(img, &ann.bbox)));
                    }
                }
            }
        }
        if !issues.is_empty() {
            return Err(DatasetError::Invalid(issues));
        }
        Ok(Self {
            images,
            annotations,
            index,
            split_tag: split_tag.into(),
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.index.get(image_id).map(|&i| &self.images[i])
    }

    /// Position of the image in load order.
    pub fn image_index(&self, image_id: &str) -> Option<usize> {
        self.index.get(image_id).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Uniformly rescales every image and box; image sizes are rounded.
    /// Intended for invariance checks with factors that keep sizes integral.
    pub fn scaled(&self, factor: f64) -> Result<Self, DatasetError> {
        let images = self
            .images
            .iter()
            .map(|img| ImageRecord {
                width: (img.width as f64 * factor).round() as u32,
                height: (img.height as f64 * factor).round() as u32,
                ..img.clone()
            })
            .collect();
        let annotations = self
            .annotations
            .iter()
            .map(|a| {
                a.bbox
                    .scaled(factor)
                    .map(|bbox| Annotation {
                        image_id: a.image_id.clone(),
                        bbox,
                    })
                    .map_err(|e| DatasetError::Conversion(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Dataset::new(images, annotations, self.split_tag.clone())
    }
}

fn validation(line: usize, message: String) -> Issue {
    Issue {
        line,
        kind: IssueKind::Validation,
        message,
    }
}

fn parse_issue(line: usize, message: String) -> Issue {
    Issue {
        line,
        kind: IssueKind::Parse,
        message,
    }
}

fn out_of_bounds(img: &ImageRecord, b: &BoundingBox) -> String {
    format!(
        "box ({}, {}, {}, {}) lies outside image {:?} ({}x{})",
        b.x_min(),
        b.y_min(),
        b.x_max(),
        b.y_max(),
        img.image_id,
        img.width,
        img.height
    )
}

/// Box coordinates as they appear on disk, before any validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl RawBox {
    pub fn to_box(self) -> Result<BoundingBox, crate::geometry::GeometryError> {
        BoundingBox::new(self.x_min, self.y_min, self.x_max, self.y_max)
    }
}

impl From<BoundingBox> for RawBox {
    fn from(b: BoundingBox) -> Self {
        Self {
            x_min: b.x_min(),
            y_min: b.y_min(),
            x_max: b.x_max(),
            y_max: b.y_max(),
        }
    }
}

/// One line of an annotation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationLine {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub source: String,
    #[serde(default)]
    pub boxes: Vec<RawBox>,
}

/// One line of a detection file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionLine {
    pub image_id: String,
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub score: f64,
}

impl DetectionLine {
    pub fn raw_box(&self) -> RawBox {
        RawBox {
            x_min: self.x_min,
            y_min: self.y_min,
            x_max: self.x_max,
            y_max: self.y_max,
        }
    }

    fn set_box(&mut self, b: RawBox) {
        self.x_min = b.x_min;
        self.y_min = b.y_min;
        self.x_max = b.x_max;
        self.y_max = b.y_max;
    }
}

impl From<&Detection> for DetectionLine {
    fn from(d: &Detection) -> Self {
        Self {
            image_id: d.image_id.clone(),
            x_min: d.bbox.x_min(),
            y_min: d.bbox.y_min(),
            x_max: d.bbox.x_max(),
            y_max: d.bbox.y_max(),
            score: d.score,
        }
    }
}

/// Records with their 1-based line numbers, plus the lines that failed to parse.
pub type ParsedLines<T> = (Vec<(usize, T)>, Vec<Issue>);

/// Reads JSON Lines records, skipping blank lines. Malformed lines become
/// parse issues; the rest are returned with their 1-based line numbers.
pub fn read_json_lines<T, R>(reader: R) -> Result<ParsedLines<T>, io::Error>
where
    T: for<'de> Deserialize<'de>,
    R: BufRead,
{
    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(rec) => records.push((lineno, rec)),
            Err(e) => issues.push(parse_issue(lineno, e.to_string())),
        }
    }
    Ok((records, issues))
}

/// Parses an annotation stream, collecting every problem rather than stopping
/// at the first one.
pub fn parse_annotations<R: BufRead>(reader: R) -> Result<(Dataset, Vec<Issue>), io::Error> {
    let (lines, mut issues) = read_json_lines::<AnnotationLine, _>(reader)?;
    let mut images = Vec::with_capacity(lines.len());
    let mut annotations = Vec::new();
    let mut seen: HashSet<String> = HashSet::with_capacity(lines.len());

    for (lineno, rec) in lines {
        if rec.image_id.is_empty() {
            issues.push(validation(lineno, "empty image_id".into()));
            continue;
        }
        if !seen.insert(rec.image_id.clone()) {
            issues.push(validation(
                lineno,
                format!("duplicate image_id {:?}", rec.image_id),
            ));
            continue;
        }
        if rec.width == 0 || rec.height == 0 {
            issues.push(validation(
                lineno,
                format!(
                    "image {:?} must have positive size, got {}x{}",
                    rec.image_id, rec.width, rec.height
                ),
            ));
            continue;
        }
        let img = ImageRecord {
            image_id: rec.image_id.clone(),
            width: rec.width,
            height: rec.height,
            source_tag: rec.source,
        };
        for raw in rec.boxes {
            match raw.to_box() {
                Err(e) => issues.push(validation(
                    lineno,
                    format!("image {:?}: {}", rec.image_id, e),
                )),
                Ok(b) if !b.within(img.width as f64, img.height as f64) => {
                    issues.push(validation(lineno, out_of_bounds(&img, &b)))
                }
                Ok(b) => annotations.push(Annotation {
                    image_id: rec.image_id.clone(),
                    bbox: b,
                }),
            }
        }
        images.push(img);
    }
    issues.sort_by_key(|i| i.line);
    let dataset =
        Dataset::new(images, annotations, "").expect("records were validated while parsing");
    Ok((dataset, issues))
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let (dataset, issues) = parse_annotations(reader)?;
    if issues.is_empty() {
        Ok(dataset)
    } else {
        Err(DatasetError::Invalid(issues))
    }
}

/// Writes the dataset in the annotation format. Annotations are grouped under
/// their image in image order; relative order within an image is kept.
pub fn write_annotations<W: Write>(dataset: &Dataset, mut out: W) -> Result<(), DatasetError> {
    let mut grouped: Vec<Vec<RawBox>> = vec![Vec::new(); dataset.images.len()];
    for a in &dataset.annotations {
        let i = dataset.index[&a.image_id];
        grouped[i].push(a.bbox.into());
    }
    for (img, boxes) in dataset.images.iter().zip(grouped) {
        let line = AnnotationLine {
            image_id: img.image_id.clone(),
            width: img.width,
            height: img.height,
            source: img.source_tag.clone(),
            boxes,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_annotations(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_annotations(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Detections that passed validation, plus notes about boxes that had to be
/// clamped to their image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadedDetections {
    pub detections: Vec<Detection>,
    pub warnings: Vec<Issue>,
}

/// Validates detection lines against a dataset.
///
/// Boxes reaching past the image edge are clamped and reported as warnings;
/// a box with nothing left inside the image is an error.
pub fn parse_detections<R: BufRead>(
    reader: R,
    dataset: &Dataset,
) -> Result<(LoadedDetections, Vec<Issue>), io::Error> {
    let (lines, mut issues) = read_json_lines::<DetectionLine, _>(reader)?;
    let mut loaded = LoadedDetections::default();
    for (lineno, rec) in lines {
        let Some(img) = dataset.image(&rec.image_id) else {
            issues.push(validation(
                lineno,
                format!("detection refers to unknown image_id {:?}", rec.image_id),
            ));
            continue;
        };
        if !(0.0..=1.0).contains(&rec.score) {
            issues.push(validation(
                lineno,
                format!("score {} outside [0, 1]", rec.score),
            ));
            continue;
        }
        let bbox = match rec.raw_box().to_box() {
            Ok(b) => b,
            Err(e) => {
                issues.push(validation(lineno, e.to_string()));
                continue;
            }
        };
        let (w, h) = (img.width as f64, img.height as f64);
        let bbox = if bbox.within(w, h) {
            bbox
        } else {
            match bbox.clamp_to(w, h) {
                Ok(clamped) => {
                    loaded.warnings.push(validation(
                        lineno,
                        format!(
                            "box ({}, {}, {}, {}) clamped to ({}, {}, {}, {}) for image {:?}",
                            bbox.x_min(),
                            bbox.y_min(),
                            bbox.x_max(),
                            bbox.y_max(),
                            clamped.x_min(),
                            clamped.y_min(),
                            clamped.x_max(),
                            clamped.y_max(),
                            img.image_id
                        ),
                    ));
                    clamped
                }
                Err(_) => {
                    issues.push(validation(lineno, out_of_bounds(img, &bbox)));
                    continue;
                }
            }
        };
        loaded.detections.push(Detection {
            image_id: rec.image_id,
            bbox,
            score: rec.score,
        });
    }
    issues.sort_by_key(|i| i.line);
    Ok((loaded, issues))
}

pub fn load_detections(
    path: impl AsRef<Path>,
    dataset: &Dataset,
) -> Result<LoadedDetections, DatasetError> {
    let reader = BufReader::new(File::open(path)?);
    let (loaded, issues) = parse_detections(reader, dataset)?;
    if issues.is_empty() {
        Ok(loaded)
    } else {
        Err(DatasetError::Invalid(issues))
    }
}

pub fn write_detections<'a, W, I>(detections: I, mut out: W) -> Result<(), DatasetError>
where
    W: Write,
    I: IntoIterator<Item = &'a Detection>,
{
    for d in detections {
        serde_json::to_writer(&mut out, &DetectionLine::from(d))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConversionMode {
    InclusiveToHalfOpen,
    HalfOpenToInclusive,
}

/// Shifts `x_max`/`y_max` between inclusive and half-open pixel bounds.
///
/// Inclusive `(5, 5, 5, 5)` is a single pixel and becomes half-open
/// `(5, 5, 6, 6)`. Coordinates must be integers in either direction.
pub fn convert_box(b: RawBox, mode: ConversionMode) -> Result<RawBox, DatasetError> {
    let coords = [b.x_min, b.y_min, b.x_max, b.y_max];
    if coords.iter().any(|c| !c.is_finite() || c.fract() != 0.0) {
        return Err(DatasetError::Conversion(format!(
            "inclusive conversion needs integer coordinates, got {coords:?}"
        )));
    }
    let delta = match mode {
        ConversionMode::InclusiveToHalfOpen => 1.0,
        ConversionMode::HalfOpenToInclusive => -1.0,
    };
    let out = RawBox {
        x_max: b.x_max + delta,
        y_max: b.y_max + delta,
        ..b
    };
    if out.x_max < out.x_min || out.y_max < out.y_min {
        return Err(DatasetError::Conversion(format!(
            "box {coords:?} is empty in the source convention"
        )));
    }
    Ok(out)
}

pub fn convert_inclusive(
    records: &[RawBox],
    mode: ConversionMode,
) -> Result<Vec<RawBox>, DatasetError> {
    records.iter().map(|&b| convert_box(b, mode)).collect()
}

pub fn convert_annotation_line(
    mut line: AnnotationLine,
    mode: ConversionMode,
) -> Result<AnnotationLine, DatasetError> {
    line.boxes = convert_inclusive(&line.boxes, mode)?;
    Ok(line)
}

pub fn convert_detection_line(
    mut line: DetectionLine,
    mode: ConversionMode,
) -> Result<DetectionLine, DatasetError> {
    let b = convert_box(line.raw_box(), mode)?;
    line.set_box(b);
    Ok(line)
}

/// Groups detections by image, in dataset image order. Images without
/// detections get an empty slot.
pub fn group_by_image<'a>(
    dataset: &Dataset,
    detections: &'a [Detection],
) -> Vec<Vec<&'a Detection>> {
    let mut groups = vec![Vec::new(); dataset.images().len()];
    for d in detections {
        if let Some(i) = dataset.image_index(&d.image_id) {
            groups[i].push(d);
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn parse(s: &str) -> (Dataset, Vec<Issue>) {
        parse_annotations(Cursor::new(s)).unwrap()
    }

    const ONE: &str = r#"{"image_id":"a","width":1024,"height":800,"source":"dash","boxes":[{"x_min":100,"y_min":200,"x_max":150,"y_max":240}]}"#;

    #[test]
    fn empty_file_gives_empty_dataset() {
        let (ds, issues) = parse("");
        assert!(ds.is_empty());
        assert!(ds.annotations().is_empty());
        assert!(issues.is_empty());
    }

    #[test]
    fn minimal_record() {
        let (ds, issues) = parse(ONE);
        assert!(issues.is_empty());
        assert_eq!(ds.images().len(), 1);
        assert_eq!(ds.annotations().len(), 1);
        assert_eq!(ds.images()[0].source_tag, "dash");
        assert_eq!(
            ds.annotations()[0].bbox.coords(),
            [100.0, 200.0, 150.0, 240.0]
        );
    }

    #[test]
    fn box_past_width_names_image() {
        let (_, issues) = parse(
            r#"{"image_id":"wide","width":100,"height":100,"boxes":[{"x_min":10,"y_min":10,"x_max":101,"y_max":20}]}"#,
        );
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].line, 1);
        assert_eq!(issues[0].kind, IssueKind::Validation);
        assert!(issues[0].message.contains("\"wide\""));
    }

    #[test]
    fn duplicate_ids_and_bad_lines_carry_line_numbers() {
        let text = format!("{ONE}\n\nnot json\n{ONE}\n");
        let (ds, issues) = parse(&text);
        assert_eq!(ds.images().len(), 1);
        let lines: Vec<_> = issues.iter().map(|i| (i.line, i.kind)).collect();
        assert_eq!(
            lines,
            vec![(3, IssueKind::Parse), (4, IssueKind::Validation)]
        );
    }

    #[test]
    fn unknown_keys_ignored() {
        let (ds, issues) = parse(
            r#"{"image_id":"a","width":10,"height":10,"extra":{"x":1},"boxes":[{"x_min":0,"y_min":0,"x_max":5,"y_max":5,"label":"pothole"}]}"#,
        );
        assert!(issues.is_empty());
        assert_eq!(ds.annotations().len(), 1);
    }

    fn dataset_one() -> Dataset {
        parse(ONE).0
    }

    fn dets(s: &str) -> (LoadedDetections, Vec<Issue>) {
        parse_detections(Cursor::new(s), &dataset_one()).unwrap()
    }

    #[test]
    fn detection_for_unknown_image_rejected() {
        let (_, issues) =
            dets(r#"{"image_id":"zzz","x_min":0,"y_min":0,"x_max":5,"y_max":5,"score":0.5}"#);
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.contains("unknown image_id"));
    }

    #[test]
    fn score_bounds() {
        let (ok, issues) =
            dets(r#"{"image_id":"a","x_min":0,"y_min":0,"x_max":5,"y_max":5,"score":1.0}"#);
        assert!(issues.is_empty());
        assert_eq!(ok.detections[0].score, 1.0);
        let (_, issues) =
            dets(r#"{"image_id":"a","x_min":0,"y_min":0,"x_max":5,"y_max":5,"score":1.01}"#);
        assert_eq!(issues.len(), 1);
    }

    #[test]
    fn slightly_outside_box_is_clamped_with_warning() {
        // 1024x800 image; box reaches 3 px past the right and bottom edges.
        let (ok, issues) = dets(
            r#"{"image_id":"a","x_min":1000,"y_min":780,"x_max":1027,"y_max":803,"score":0.7}"#,
        );
        assert!(issues.is_empty());
        assert_eq!(ok.warnings.len(), 1);
        assert_eq!(
            ok.detections[0].bbox.coords(),
            [1000.0, 780.0, 1024.0, 800.0]
        );

        let (ok, _) =
            dets(r#"{"image_id":"a","x_min":-3,"y_min":-3,"x_max":10,"y_max":10,"score":0.7}"#);
        assert_eq!(ok.detections[0].bbox.coords(), [0.0, 0.0, 10.0, 10.0]);
    }

    #[test]
    fn box_entirely_outside_is_an_error() {
        let (ok, issues) =
            dets(r#"{"image_id":"a","x_min":1030,"y_min":10,"x_max":1040,"y_max":20,"score":0.7}"#);
        assert!(ok.detections.is_empty());
        assert_eq!(issues.len(), 1);
    }

    #[test]
    fn inclusive_conversion_examples() {
        let inc = RawBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 9.0,
            y_max: 9.0,
        };
        let half = convert_box(inc, ConversionMode::InclusiveToHalfOpen).unwrap();
        assert_eq!(
            half,
            RawBox {
                x_min: 0.0,
                y_min: 0.0,
                x_max: 10.0,
                y_max: 10.0
            }
        );
        assert_eq!(
            convert_box(half, ConversionMode::HalfOpenToInclusive).unwrap(),
            inc
        );

        let pixel = RawBox {
            x_min: 5.0,
            y_min: 5.0,
            x_max: 5.0,
            y_max: 5.0,
        };
        let half = convert_box(pixel, ConversionMode::InclusiveToHalfOpen).unwrap();
        assert_eq!(half.to_box().unwrap().area(), 1.0);
        assert_eq!(half.x_max, 6.0);
    }

    #[test]
    fn non_integer_inclusive_rejected() {
        let b = RawBox {
            x_min: 0.5,
            y_min: 0.0,
            x_max: 9.0,
            y_max: 9.0,
        };
        assert!(convert_box(b, ConversionMode::InclusiveToHalfOpen).is_err());
        assert!(convert_box(b, ConversionMode::HalfOpenToInclusive).is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        let image = (1u32..2000, 1u32..2000, "[a-z]{0,5}");
        prop::collection::vec(image, 0..6)
            .prop_flat_map(|imgs| {
                let n = imgs.len();
                let boxes = prop::collection::vec(
                    (
                        0..n.max(1),
                        0.0..1.0f64,
                        0.0..1.0f64,
                        0.01..1.0f64,
                        0.01..1.0f64,
                    ),
                    0..if n == 0 { 1 } else { 12 },
                );
                (Just(imgs), boxes)
            })
            .prop_map(|(imgs, boxes)| {
                let images: Vec<ImageRecord> = imgs
                    .iter()
                    .enumerate()
                    .map(|(i, (w, h, s))| ImageRecord {
                        image_id: format!("img{i}"),
                        width: *w,
                        height: *h,
                        source_tag: s.clone(),
                    })
                    .collect();
                let mut annotations = Vec::new();
                if !images.is_empty() {
                    for (i, fx, fy, fw, fh) in boxes {
                        let img = &images[i];
                        let (w, h) = (img.width as f64, img.height as f64);
                        let x0 = fx * w * 0.9;
                        let y0 = fy * h * 0.9;
                        let x1 = (x0 + fw * (w - x0)).min(w);
                        let y1 = (y0 + fh * (h - y0)).min(h);
                        if let Ok(bbox) = BoundingBox::new(x0, y0, x1, y1) {
                            annotations.push(Annotation {
                                image_id: img.image_id.clone(),
                                bbox,
                            });
                        }
                    }
                }
                // Canonical order: grouped by image, as the file format stores them.
                annotations.sort_by_key(|a| a.image_id[3..].parse::<usize>().unwrap());
                Dataset::new(images, annotations, "").unwrap()
            })
    }

    proptest! {
        #[test]
        fn save_then_load_round_trips(ds in arb_dataset()) {
            let mut buf = Vec::new();
            write_annotations(&ds, &mut buf).unwrap();
            let (back, issues) = parse_annotations(Cursor::new(buf)).unwrap();
            prop_assert!(issues.is_empty());
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn inclusive_round_trip(x in 0i32..500, y in 0i32..500, w in 0i32..50, h in 0i32..50) {
            let inc = RawBox { x_min: x as f64, y_min: y as f64, x_max: (x + w) as f64, y_max: (y + h) as f64 };
            let half = convert_box(inc, ConversionMode::InclusiveToHalfOpen).unwrap();
            prop_assert_eq!(half.to_box().unwrap().area(), ((w + 1) * (h + 1)) as f64);
            prop_assert_eq!(convert_box(half, ConversionMode::HalfOpenToInclusive).unwrap(), inc);
        }

        /// Each generated record is either valid or breaks exactly one rule;
        /// validation must flag exactly the broken ones.
        #[test]
        fn validation_flags_exactly_the_bad_records(
            kinds in prop::collection::vec(0u8..5, 1..20),
        ) {
            let mut text = String::new();
            let mut expected_bad = Vec::new();
            for (i, kind) in kinds.iter().enumerate() {
                let line = i + 1;
                let rec = match kind {
                    0 => format!(r#"{{"image_id":"i{i}","width":50,"height":40,"boxes":[{{"x_min":1,"y_min":2,"x_max":49,"y_max":40}}]}}"#),
                    1 => format!(r#"{{"image_id":"i{i}","width":50,"height":40,"boxes":[{{"x_min":1,"y_min":2,"x_max":51,"y_max":40}}]}}"#),
                    2 => format!(r#"{{"image_id":"i{i}","width":0,"height":40,"boxes":[]}}"#),
                    3 => format!(r#"{{"image_id":"i{i}","width":50,"height":40,"boxes":[{{"x_min":3,"y_min":2,"x_max":3,"y_max":9}}]}}"#),
                    _ => "{\"image_id\": broken".to_string(),
                };
                if *kind != 0 {
                    expected_bad.push(line);
                }
                text.push_str(&rec);
                text.push('\n');
            }
            let (_, issues) = parse_annotations(Cursor::new(text)).unwrap();
            let flagged: Vec<usize> = issues.iter().map(|i| i.line).collect();
            prop_assert_eq!(flagged, expected_bad);
        }
    }
}
