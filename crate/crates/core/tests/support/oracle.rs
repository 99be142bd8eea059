//! Brute-force reference for IoU, greedy matching and 11-point AP.
//!
//! Works on integer boxes and integer scores (hundredths) with exact rational
//! arithmetic; only the final AP is converted to floating point. Shared by
//! the core integration tests and the CLI acceptance suite.

#![allow(dead_code)]

use std::cmp::Ordering;

use pothole_core::dataset::{Annotation, Dataset, Detection, ImageRecord};
use pothole_core::geometry::BoundingBox;
use rand::Rng;

/// Half-open `[x0, y0, x1, y1]`.
pub type IntBox = [i64; 4];

/// Exact threshold `num / den`.
pub type Ratio = (i64, i64);

#[derive(Debug, Clone)]
pub struct ImageCase {
    pub width: i64,
    pub height: i64,
    pub gts: Vec<IntBox>,
    /// Box and score in hundredths.
    pub dets: Vec<(IntBox, i64)>,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub images: Vec<ImageCase>,
}

/// IoU by counting pixels in both sets.
pub fn pixel_iou(a: IntBox, b: IntBox) -> f64 {
    let (lo_x, hi_x) = (a[0].min(b[0]), a[2].max(b[2]));
    let (lo_y, hi_y) = (a[1].min(b[1]), a[3].max(b[3]));
    let inside = |r: IntBox, x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (mut both, mut either) = (0u64, 0u64);
    for x in lo_x..hi_x {
        for y in lo_y..hi_y {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

/// `(intersection, union)` as integers.
pub fn rational_iou(a: IntBox, b: IntBox) -> Ratio {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = w * h;
    let area = |r: IntBox| (r[2] - r[0]) * (r[3] - r[1]);
    (inter, area(a) + area(b) - inter)
}

fn cmp_ratio(a: Ratio, b: Ratio) -> Ordering {
    (a.0 as i128 * b.1 as i128).cmp(&(b.0 as i128 * a.1 as i128))
}

/// Higher score first, then box coordinates.
fn rank(a: (IntBox, i64), b: (IntBox, i64)) -> Ordering {
    b.1.cmp(&a.1).then(a.0.cmp(&b.0))
}

/// True-positive flag per detection, in input order.
pub fn match_image(gts: &[IntBox], dets: &[(IntBox, i64)], thr: Ratio) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| rank(dets[i], dets[j]).then(i.cmp(&j)));
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, Ratio)> = None;
        for (j, &g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let r = rational_iou(dets[i].0, g);
            match best {
                Some((_, b)) if cmp_ratio(r, b) != Ordering::Greater => {}
                _ => best = Some((j, r)),
            }
        }
        if let Some((j, r)) = best {
            if r.0 > 0 && cmp_ratio(r, thr) != Ordering::Less {
                taken[j] = true;
                tp[i] = true;
            }
        }
    }
    tp
}

/// Dataset-level 11-point AP: pool, rank, recount every prefix, interpolate.
pub fn average_precision(inst: &Instance, thr: Ratio) -> f64 {
    let total: i64 = inst.images.iter().map(|im| im.gts.len() as i64).sum();
    assert!(total > 0, "oracle needs at least one ground-truth box");
    // (box, score, image, input index, tp)
    let mut pool = Vec::new();
    for (k, im) in inst.images.iter().enumerate() {
        let flags = match_image(&im.gts, &im.dets, thr);
        for (i, (&d, tp)) in im.dets.iter().zip(flags).enumerate() {
            pool.push((d, k, i, tp));
        }
    }
    pool.sort_by(|a, b| rank(a.0, b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    // (tp, n) for each prefix length n, recounted from scratch
    let prefixes: Vec<(i64, i64)> = (1..=pool.len())
        .map(|n| (pool[..n].iter().filter(|p| p.3).count() as i64, n as i64))
        .collect();
    let mut sum = 0.0;
    for step in 0..=10i64 {
        // recall tp/total >= step/10
        let best = prefixes
            .iter()
            .filter(|&&(tp, _)| 10 * tp >= step * total)
            .map(|&(tp, n)| (tp, n))
            .max_by(|&a, &b| cmp_ratio(a, b));
        if let Some((tp, n)) = best {
            sum += tp as f64 / n as f64;
        }
    }
    sum / 11.0
}

pub fn random_box(rng: &mut impl Rng, w: i64, h: i64) -> IntBox {
    let x0 = rng.gen_range(0..w);
    let y0 = rng.gen_range(0..h);
    let x1 = rng.gen_range(x0 + 1..=w);
    let y1 = rng.gen_range(y0 + 1..=h);
    [x0, y0, x1, y1]
}

/// A box near `b`, so random instances contain plenty of true positives.
fn jitter(rng: &mut impl Rng, b: IntBox, w: i64, h: i64) -> IntBox {
    let mut d = [0i64; 4];
    for (k, v) in d.iter_mut().enumerate() {
        let limit = if k % 2 == 0 { w } else { h };
        *v = (b[k] + rng.gen_range(-3..=3)).clamp(0, limit);
    }
    if d[2] <= d[0] {
        d[2] = (d[0] + 1).min(w);
        d[0] = d[2] - 1;
    }
    if d[3] <= d[1] {
        d[3] = (d[1] + 1).min(h);
        d[1] = d[3] - 1;
    }
    d
}

/// Up to 5 images of at most 100×100 px, up to 10 GT and 15 detections each,
/// at least one GT overall. Scores come from a coarse grid so ties occur.
pub fn random_instance(rng: &mut impl Rng) -> Instance {
    loop {
        let n_images = rng.gen_range(1..=5);
        let images: Vec<ImageCase> = (0..n_images)
            .map(|_| {
                let (w, h) = (rng.gen_range(20..=100), rng.gen_range(20..=100));
                let gts: Vec<IntBox> = (0..rng.gen_range(0..=10))
                    .map(|_| random_box(rng, w, h))
                    .collect();
                let dets = (0..rng.gen_range(0..=15))
                    .map(|_| {
                        let b = if !gts.is_empty() && rng.gen_bool(0.6) {
                            let g = gts[rng.gen_range(0..gts.len())];
                            jitter(rng, g, w, h)
                        } else {
                            random_box(rng, w, h)
                        };
                        (b, rng.gen_range(0..=20) * 5)
                    })
                    .collect();
                ImageCase {
                    width: w,
                    height: h,
                    gts,
                    dets,
                }
            })
            .collect();
        if images.iter().any(|im| !im.gts.is_empty()) {
            return Instance { images };
        }
    }
}

pub fn to_bbox(b: IntBox) -> BoundingBox {
    BoundingBox::new(b[0] as f64, b[1] as f64, b[2] as f64, b[3] as f64).unwrap()
}

/// The instance as library inputs; images are named `img0`, `img1`, …
pub fn to_library(inst: &Instance) -> (Dataset, Vec<Detection>) {
    let mut images = Vec::new();
    let mut annotations = Vec::new();
    let mut detections = Vec::new();
    for (k, im) in inst.images.iter().enumerate() {
        let id = format!("img{k}");
        images.push(ImageRecord {
            image_id: id.clone(),
            width: im.width as u32,
            height: im.height as u32,
            source_tag: "synthetic".into(),
        });
        annotations.extend(im.gts.iter().map(|&g| Annotation {
            image_id: id.clone(),
            bbox: to_bbox(g),
        }));
        detections.extend(im.dets.iter().map(|&(b, s)| Detection {
            image_id: id.clone(),
            bbox: to_bbox(b),
            score: s as f64 / 100.0,
        }));
    }
    let ds = Dataset::new(images, annotations, "test").unwrap();
    (ds, detections)
}
