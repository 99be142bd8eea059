//! Box-shape statistics of an annotated dataset and the anchor/input-size
//! recommendations derived from them.

use serde::Serialize;
use thiserror::Error;

use crate::dataset::Dataset;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no samples to summarize")]
    Empty,
    #[error("sample values must be finite")]
    NonFinite,
}

/// Tukey box plot of a scalar sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoxplotSummary {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    /// Smallest sample at or above `lower_limit`.
    pub lower_whisker: f64,
    /// Largest sample at or below `upper_limit`.
    pub upper_whisker: f64,
    /// Samples outside the limits, ascending.
    pub outliers: Vec<f64>,
}

/// Linear interpolation between order statistics at zero-based position
/// `(n - 1) * p`. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

fn sorted_copy(values: &[f64]) -> Result<Vec<f64>, StatsError> {
    if values.is_empty() {
        return Err(StatsError::Empty);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted)
}

pub fn median(values: &[f64]) -> Result<f64, StatsError> {
    Ok(quantile_sorted(&sorted_copy(values)?, 0.5))
}

pub fn boxplot(values: &[f64]) -> Result<BoxplotSummary, StatsError> {
    let sorted = sorted_copy(values)?;
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower_limit = q1 - 1.5 * iqr;
    let upper_limit = q3 + 1.5 * iqr;

    let inside = |v: &f64| *v >= lower_limit && *v <= upper_limit;
    // q1..=q3 always lies inside the limits, so both whiskers exist.
    let lower_whisker = *sorted.iter().find(|v| inside(v)).expect("q1 is inside");
    let upper_whisker = *sorted
        .iter()
        .rev()
        .find(|v| inside(v))
        .expect("q3 is inside");
    let outliers = sorted.iter().copied().filter(|v| !inside(v)).collect();

    Ok(BoxplotSummary {
        n: sorted.len(),
        q1,
        median,
        q3,
        iqr,
        lower_limit,
        upper_limit,
        lower_whisker,
        upper_whisker,
        outliers,
    })
}

/// Width over height of every annotation, in annotation order.
pub fn aspect_ratios(dataset: &Dataset) -> Result<Vec<f64>, StatsError> {
    non_empty(dataset)?;
    Ok(dataset
        .annotations()
        .iter()
        .map(|a| a.bbox.width() / a.bbox.height())
        .collect())
}

/// Pixel area of every annotation.
pub fn areas(dataset: &Dataset) -> Result<Vec<f64>, StatsError> {
    non_empty(dataset)?;
    Ok(dataset
        .annotations()
        .iter()
        .map(|a| a.bbox.area())
        .collect())
}

/// Annotation area divided by the area of its own image.
pub fn area_fractions(dataset: &Dataset) -> Result<Vec<f64>, StatsError> {
    non_empty(dataset)?;
    Ok(dataset
        .annotations()
        .iter()
        .map(|a| {
            let img = dataset
                .image(&a.image_id)
                .expect("dataset invariant: annotation image exists");
            a.bbox.area() / (img.width as f64 * img.height as f64)
        })
        .collect())
}

fn non_empty(dataset: &Dataset) -> Result<(), StatsError> {
    if dataset.annotations().is_empty() {
        Err(StatsError::Empty)
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectedArea {
    pub width: u32,
    pub height: u32,
    pub median_area_px: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TuningRecommendation {
    /// Anchor aspect ratios (width/height), ascending.
    pub aspect_ratio_set: Vec<f64>,
    pub median_area_px: f64,
    pub median_area_fraction: f64,
    /// Median box area expected after resizing images to each candidate input size.
    pub projected_area_at: Vec<ProjectedArea>,
}

const BASE_ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
const MAX_EXTENDED_RATIO: i64 = 4;

/// Base ratios `{0.5, 1, 2}` extended with the integer ratios in `3..=top`,
/// where `top` is the larger of `round(q3)` and `round(upper_whisker)`,
/// capped at 4.
pub fn anchor_ratio_set(ratio_summary: &BoxplotSummary) -> Vec<f64> {
    let top = (ratio_summary.q3.round() as i64)
        .max(ratio_summary.upper_whisker.round() as i64)
        .min(MAX_EXTENDED_RATIO);
    let mut set = BASE_ASPECT_RATIOS.to_vec();
    set.extend((3..=top).map(|r| r as f64));
    set
}

pub fn recommend_tuning(
    dataset: &Dataset,
    candidate_resolutions: &[(u32, u32)],
) -> Result<TuningRecommendation, StatsError> {
    let ratios = boxplot(&aspect_ratios(dataset)?)?;
    let median_area_px = median(&areas(dataset)?)?;
    let median_area_fraction = median(&area_fractions(dataset)?)?;
    let projected_area_at = candidate_resolutions
        .iter()
        .map(|&(width, height)| ProjectedArea {
            width,
            height,
            median_area_px: median_area_fraction * width as f64 * height as f64,
        })
        .collect();
    Ok(TuningRecommendation {
        aspect_ratio_set: anchor_ratio_set(&ratios),
        median_area_px,
        median_area_fraction,
        projected_area_at,
    })
}
