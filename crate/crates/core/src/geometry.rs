//! Axis-aligned box arithmetic.
//!
//! Boxes use a half-open pixel convention: a pixel `(px, py)` lies inside iff
//! `x_min <= px < x_max` and `y_min <= py < y_max`, so width is `x_max - x_min`
//! with no `+1`. Inclusive-bound sources are converted in [`crate::dataset`].

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("box coordinates must be finite, got ({0}, {1}, {2}, {3})")]
    NonFinite(f64, f64, f64, f64),
    #[error("box must have positive width and height, got ({0}, {1}, {2}, {3})")]
    Degenerate(f64, f64, f64, f64),
}

/// A validated axis-aligned rectangle in pixel space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, GeometryError> {
        if ![x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite(x_min, y_min, x_max, y_max));
        }
        if !(x_max > x_min && y_max > y_min) {
            return Err(GeometryError::Degenerate(x_min, y_min, x_max, y_max));
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Builds a box from its center and size.
    pub fn from_center(cx: f64, cy: f64, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            cx - width / 2.0,
            cy - height / 2.0,
            cx + width / 2.0,
            cy + height / 2.0,
        )
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`; zero when the boxes are disjoint or only touch.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let h = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        w * h
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x_min >= 0.0 && self.y_min >= 0.0 && self.x_max <= width && self.y_max <= height
    }

    /// Clamps the box to `[0, width] x [0, height]`. Fails if nothing is left.
    pub fn clamp_to(&self, width: f64, height: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(
            self.x_min * factor,
            self.y_min * factor,
            self.x_max * factor,
            self.y_max * factor,
        )
    }

    /// Lexicographic order on `(x_min, y_min, x_max, y_max)`, used to break score ties.
    pub fn lex_cmp(&self, other: &Self) -> Ordering {
        self.coords()
            .iter()
            .zip(other.coords().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        #[derive(Deserialize)]
        struct Raw {
            x_min: f64,
            y_min: f64,
            x_max: f64,
            y_max: f64,
        }
        let raw = Raw::deserialize(deserializer)?;
        BoundingBox::new(raw.x_min, raw.y_min, raw.x_max, raw.y_max)
            .map_err(serde::de::Error::custom)
    }
}

pub fn area(b: &BoundingBox) -> f64 {
    b.area()
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.iou(b)
}

/// Descending score; equal scores fall back to [`BoundingBox::lex_cmp`].
pub fn score_order(a: (&BoundingBox, f64), b: (&BoundingBox, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.lex_cmp(b.0))
}

/// Greedy non-maximum suppression.
///
/// Repeatedly keeps the highest-scoring remaining box and drops every box whose
/// IoU with it is at least `iou_threshold`. Boxes that do not overlap at all are
/// never suppressed, even at threshold 0. The result is sorted by descending
/// score.
pub fn nms(detections: &[(BoundingBox, f64)], iou_threshold: f64) -> Vec<(BoundingBox, f64)> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| {
        let (a, b) = (&detections[i], &detections[j]);
        score_order((&a.0, a.1), (&b.0, b.1)).then(i.cmp(&j))
    });

    let mut kept: Vec<(BoundingBox, f64)> = Vec::new();
    for idx in order {
        let (candidate, score) = detections[idx];
        let suppressed = kept.iter().any(|(k, _)| {
            let overlap = k.iou(&candidate);
            overlap > 0.0 && overlap >= iou_threshold
        });
        if !suppressed {
            kept.push((candidate, score));
        }
    }
    kept
}
