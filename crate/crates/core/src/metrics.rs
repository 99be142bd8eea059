//! Detection-to-ground-truth matching, precision/recall accumulation and
//! 11-point interpolated average precision.
//!
//! AP is the mean, over the recall samples `r ∈ {0, 0.1, …, 1}`, of the best
//! precision reached at any recall `≥ r`. PASCAL-style results report it at a
//! single IoU threshold (0.5, and the relaxed 0.4); COCO-style results average
//! it over IoU `0.50, 0.55, …, 0.95`. The COCO average here uses the same
//! 11-point rule at every threshold, not the 101-point variant of the official
//! COCO tooling.

use std::fmt;
use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::dataset::{Annotation, Dataset, Detection};
use crate::geometry::{score_order, BoundingBox};

pub const RECALL_SAMPLES: usize = 11;
pub const PASCAL_IOU: f64 = 0.5;
pub const RELAXED_PASCAL_IOU: f64 = 0.4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("records span several images ({0:?} and {1:?})")]
    MixedImages(String, String),
    #[error("dataset has no annotations, recall is undefined")]
    NoAnnotations,
    #[error("IoU threshold {0} outside (0, 1]")]
    InvalidThreshold(f64),
    #[error("detection refers to unknown image_id {0:?}")]
    UnknownImage(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed curve file: {0}")]
    MalformedCurve(String),
}

/// The ten COCO thresholds `0.50, 0.55, …, 0.95`.
pub fn coco_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// Recall sample `i` of the 11-point rule, `i / 10`.
pub fn recall_sample(i: usize) -> f64 {
    i as f64 / 10.0
}

fn check_threshold(t: f64) -> Result<(), MetricsError> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MetricsError::InvalidThreshold(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    TruePositive { annotation: usize, iou: f64 },
    FalsePositive,
}

impl Verdict {
    pub fn is_tp(&self) -> bool {
        matches!(self, Verdict::TruePositive { .. })
    }
}

/// Outcome of matching one image's detections against its ground truth.
/// `verdicts` follows detection input order; annotation indices refer to
/// annotation input order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatchResult {
    pub iou_threshold: f64,
    pub verdicts: Vec<Verdict>,
    pub annotation_matched: Vec<bool>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    fn from_verdicts(iou_threshold: f64, verdicts: Vec<Verdict>, n_annotations: usize) -> Self {
        let mut annotation_matched = vec![false; n_annotations];
        for v in &verdicts {
            if let Verdict::TruePositive { annotation, .. } = v {
                annotation_matched[*annotation] = true;
            }
        }
        let tp = verdicts.iter().filter(|v| v.is_tp()).count();
        Self {
            iou_threshold,
            fp: verdicts.len() - tp,
            fn_: n_annotations - tp,
            tp,
            verdicts,
            annotation_matched,
        }
    }

    /// Demotes pairs whose IoU falls below a stricter threshold to false
    /// positives, without re-running the matching.
    pub fn refilter(&self, iou_threshold: f64) -> MatchResult {
        let verdicts = self
            .verdicts
            .iter()
            .map(|v| match *v {
                Verdict::TruePositive { iou, .. } if iou < iou_threshold => Verdict::FalsePositive,
                other => other,
            })
            .collect();
        Self::from_verdicts(iou_threshold, verdicts, self.annotation_matched.len())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Greedy matching on bare boxes.
///
/// Detections are visited by descending score (ties: box lexicographic order,
/// then input order). Each takes the still-unmatched annotation with the
/// highest IoU (ties: lower annotation index) and is a true positive iff that
/// IoU is at least `iou_threshold`.
pub fn match_boxes(
    annotations: &[BoundingBox],
    detections: &[(BoundingBox, f64)],
    iou_threshold: f64,
) -> MatchResult {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&detections[i], &detections[j]);
        score_order((&a.0, a.1), (&b.0, b.1)).then(i.cmp(&j))
    });

    let mut taken = vec![false; annotations.len()];
    let mut verdicts = vec![Verdict::FalsePositive; detections.len()];
    for idx in order {
        let det = &detections[idx].0;
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in annotations.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let overlap = det.iou(gt);
            if best.is_none_or(|(_, b)| overlap > b) {
                best = Some((j, overlap));
            }
        }
        if let Some((j, overlap)) = best {
            if overlap > 0.0 && overlap >= iou_threshold {
                taken[j] = true;
                verdicts[idx] = Verdict::TruePositive {
                    annotation: j,
                    iou: overlap,
                };
            }
        }
    }
    MatchResult::from_verdicts(iou_threshold, verdicts, annotations.len())
}

pub fn match_image(
    annotations: &[Annotation],
    detections: &[Detection],
    iou_threshold: f64,
) -> Result<MatchResult, MetricsError> {
    check_threshold(iou_threshold)?;
    let mut ids = annotations
        .iter()
        .map(|a| &a.image_id)
        .chain(detections.iter().map(|d| &d.image_id));
    if let Some(first) = ids.next() {
        if let Some(other) = ids.find(|id| *id != first) {
            return Err(MetricsError::MixedImages(first.clone(), other.clone()));
        }
    }
    let gts: Vec<BoundingBox> = annotations.iter().map(|a| a.bbox).collect();
    let dets: Vec<(BoundingBox, f64)> = detections.iter().map(|d| (d.bbox, d.score)).collect();
    Ok(match_boxes(&gts, &dets, iou_threshold))
}

/// One prefix of the score-ranked detection pool.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub score: f64,
    pub tp_cum: usize,
    pub fp_cum: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub total_annotations: usize,
    pub points: Vec<PrPoint>,
    /// Interpolated precision at recall `0, 0.1, …, 1`.
    pub interpolated: [f64; RECALL_SAMPLES],
}

impl PrCurve {
    /// Builds a curve from per-detection TP flags already in ranked order.
    pub fn from_ranked(
        iou_threshold: f64,
        total_annotations: usize,
        ranked: impl IntoIterator<Item = (f64, bool)>,
    ) -> Self {
        let mut points = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for (score, is_tp) in ranked {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            points.push(PrPoint {
                score,
                tp_cum: tp,
                fp_cum: fp,
                precision: tp as f64 / (tp + fp) as f64,
                recall: ratio(tp, total_annotations),
            });
        }
        let interpolated = interpolate(&points);
        Self {
            iou_threshold,
            total_annotations,
            points,
            interpolated,
        }
    }

    pub fn tp(&self) -> usize {
        self.points.last().map_or(0, |p| p.tp_cum)
    }

    pub fn fp(&self) -> usize {
        self.points.last().map_or(0, |p| p.fp_cum)
    }

    pub fn fn_count(&self) -> usize {
        self.total_annotations - self.tp()
    }

    /// The score cut-off maximizing F1. Only cut-offs that fall between
    /// distinct scores are considered; ties keep the higher score.
    pub fn operating_point(&self) -> Option<OperatingPoint> {
        let mut best: Option<OperatingPoint> = None;
        for (i, p) in self.points.iter().enumerate() {
            if self
                .points
                .get(i + 1)
                .is_some_and(|next| next.score == p.score)
            {
                continue;
            }
            let f1 = if p.precision + p.recall > 0.0 {
                2.0 * p.precision * p.recall / (p.precision + p.recall)
            } else {
                0.0
            };
            if best.as_ref().is_none_or(|b| f1 > b.f1) {
                best = Some(OperatingPoint {
                    score_threshold: p.score,
                    precision: p.precision,
                    recall: p.recall,
                    f1,
                    tp: p.tp_cum,
                    fp: p.fp_cum,
                    fn_: self.total_annotations - p.tp_cum,
                });
            }
        }
        best
    }
}

/// Max-over-suffix precision at each recall sample; 0 where the recall is
/// never reached.
fn interpolate(points: &[PrPoint]) -> [f64; RECALL_SAMPLES] {
    let mut suffix_max = vec![0.0f64; points.len() + 1];
    for i in (0..points.len()).rev() {
        suffix_max[i] = suffix_max[i + 1].max(points[i].precision);
    }
    std::array::from_fn(|k| {
        let r = recall_sample(k);
        // recall is non-decreasing along the curve
        let first = points.partition_point(|p| p.recall < r);
        suffix_max[first]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatingPoint {
    pub score_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Pascal,
    Coco,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub protocol: Protocol,
    pub iou_thresholds: Vec<f64>,
    pub ap: f64,
}

impl fmt::Display for ApResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.protocol {
            Protocol::Pascal => write!(f, "PASCAL@{}", self.iou_thresholds[0])?,
            Protocol::Coco => write!(f, "COCO")?,
        }
        write!(f, " AP={:.6}", self.ap)
    }
}

/// Pools detections over all images and ranks them: descending score, then
/// box order, image order and input order.
pub fn pr_curve(
    dataset: &Dataset,
    detections: &[Detection],
    iou_threshold: f64,
) -> Result<PrCurve, MetricsError> {
    check_threshold(iou_threshold)?;
    let total = dataset.annotations().len();
    if total == 0 {
        return Err(MetricsError::NoAnnotations);
    }
    let n_images = dataset.images().len();
    let mut gts: Vec<Vec<BoundingBox>> = vec![Vec::new(); n_images];
    for a in dataset.annotations() {
        let i = dataset
            .image_index(&a.image_id)
            .expect("dataset invariant: annotation image exists");
        gts[i].push(a.bbox);
    }
    let mut per_image: Vec<Vec<(usize, (BoundingBox, f64))>> = vec![Vec::new(); n_images];
    for (k, d) in detections.iter().enumerate() {
        let i = dataset
            .image_index(&d.image_id)
            .ok_or_else(|| MetricsError::UnknownImage(d.image_id.clone()))?;
        per_image[i].push((k, (d.bbox, d.score)));
    }

    struct Ranked {
        score: f64,
        bbox: BoundingBox,
        image: usize,
        input: usize,
        tp: bool,
    }
    let mut pool = Vec::with_capacity(detections.len());
    for (image, dets) in per_image.iter().enumerate() {
        if dets.is_empty() {
            continue;
        }
        let boxes: Vec<(BoundingBox, f64)> = dets.iter().map(|(_, d)| *d).collect();
        let result = match_boxes(&gts[image], &boxes, iou_threshold);
        for ((input, (bbox, score)), verdict) in dets.iter().zip(&result.verdicts) {
            pool.push(Ranked {
                score: *score,
                bbox: *bbox,
                image,
                input: *input,
                tp: verdict.is_tp(),
            });
        }
    }
    pool.sort_by(|a, b| {
        score_order((&a.bbox, a.score), (&b.bbox, b.score))
            .then(a.image.cmp(&b.image))
            .then(a.input.cmp(&b.input))
    });
    Ok(PrCurve::from_ranked(
        iou_threshold,
        total,
        pool.iter().map(|r| (r.score, r.tp)),
    ))
}

/// Mean interpolated precision over the 11 recall samples.
pub fn average_precision(curve: &PrCurve) -> ApResult {
    let sum: f64 = curve.interpolated.iter().sum();
    ApResult {
        protocol: Protocol::Pascal,
        iou_thresholds: vec![curve.iou_threshold],
        ap: sum / RECALL_SAMPLES as f64,
    }
}

/// Full evaluation at one IoU threshold.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub result: ApResult,
    pub curve: PrCurve,
}

/// Single class, so mAP is the AP of the pothole class.
pub fn pascal_map(
    dataset: &Dataset,
    detections: &[Detection],
    iou_threshold: f64,
) -> Result<Evaluation, MetricsError> {
    let curve = pr_curve(dataset, detections, iou_threshold)?;
    Ok(Evaluation {
        result: average_precision(&curve),
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CocoEvaluation {
    pub result: ApResult,
    pub per_threshold: Vec<Evaluation>,
}

pub fn coco_map(
    dataset: &Dataset,
    detections: &[Detection],
) -> Result<CocoEvaluation, MetricsError> {
    let per_threshold = coco_thresholds()
        .iter()
        .map(|&t| pascal_map(dataset, detections, t))
        .collect::<Result<Vec<_>, _>>()?;
    let ap = per_threshold.iter().map(|e| e.result.ap).sum::<f64>() / per_threshold.len() as f64;
    Ok(CocoEvaluation {
        result: ApResult {
            protocol: Protocol::Coco,
            iou_thresholds: coco_thresholds().to_vec(),
            ap,
        },
        per_threshold,
    })
}

const CURVE_HEADER: [&str; 5] = ["score", "tp_cum", "fp_cum", "precision", "recall"];

/// Writes the curve as CSV: one row per ranked detection, followed by the 11
/// interpolated samples (score and counts left empty). An empty curve is just
/// the header. Reals use the shortest representation that parses back to the
/// same `f64`.
pub fn write_curve<W: Write>(curve: &PrCurve, out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CURVE_HEADER)?;
    for p in &curve.points {
        w.write_record([
            p.score.to_string(),
            p.tp_cum.to_string(),
            p.fp_cum.to_string(),
            p.precision.to_string(),
            p.recall.to_string(),
        ])?;
    }
    if !curve.points.is_empty() {
        for (k, precision) in curve.interpolated.iter().enumerate() {
            w.write_record([
                String::new(),
                String::new(),
                String::new(),
                precision.to_string(),
                recall_sample(k).to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn export_curve(curve: &PrCurve, path: impl AsRef<Path>) -> Result<(), MetricsError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_curve(curve, &mut out)?;
    out.flush()?;
    Ok(())
}

/// Contents of a curve CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveTable {
    pub points: Vec<PrPoint>,
    /// `(recall sample, interpolated precision)` rows.
    pub interpolated: Vec<(f64, f64)>,
}

pub fn read_curve<R: Read>(input: R) -> Result<CurveTable, MetricsError> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.clone();
    if header.iter().ne(CURVE_HEADER.iter().copied()) {
        return Err(MetricsError::MalformedCurve(format!(
            "unexpected header {header:?}"
        )));
    }
    let real = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| MetricsError::MalformedCurve(format!("{s:?}: {e}")))
    };
    let count = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| MetricsError::MalformedCurve(format!("{s:?}: {e}")))
    };
    let mut table = CurveTable {
        points: Vec::new(),
        interpolated: Vec::new(),
    };
    for row in r.records() {
        let row = row?;
        if row[0].is_empty() {
            table.interpolated.push((real(&row[4])?, real(&row[3])?));
        } else {
            table.points.push(PrPoint {
                score: real(&row[0])?,
                tp_cum: count(&row[1])?,
                fp_cum: count(&row[2])?,
                precision: real(&row[3])?,
                recall: real(&row[4])?,
            });
        }
    }
    Ok(table)
}

pub fn read_curve_file(path: impl AsRef<Path>) -> Result<CurveTable, MetricsError> {
    read_curve(File::open(path)?)
}
