//! Evaluation and reporting toolkit for single-class road pothole detectors.
//!
//! * [`geometry`]: half-open boxes, IoU and non-maximum suppression.
//! * [`dataset`]: annotation/detection JSON Lines formats and validation.
//! * [`stats`]: box-shape distributions, box plots and anchor/input-size recommendations.
//! * [`metrics`]: greedy matching, precision-recall curves, 11-point AP, PASCAL and COCO-style mAP.
//! * [`losses`]: reference region-proposal and single-shot detector losses with gradient checks.
//! * [`hazard`]: geolocated hazard events, map-cell confidence and warning replay.
//! * [`output`]: byte-stable JSON rendering.

pub mod dataset;
pub mod geometry;
pub mod hazard;
pub mod losses;
pub mod metrics;
pub mod output;
pub mod stats;

pub use dataset::{Annotation, Dataset, Detection, ImageRecord};
pub use geometry::BoundingBox;
