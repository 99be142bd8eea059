//! Central finite-difference checks of the analytic loss gradients, and the
//! self-check suite behind `pothole loss-check`.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use super::{
    decode_box, encode_box, rpn_loss, rpn_loss_grad, rpn_loss_terms, smooth_l1, smooth_l1_grad,
    ssd_loss, ssd_loss_grad, AnchorPrediction, LossError, RpnLossConfig, SsdBatch, PROB_EPSILON,
};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GradCheckError {
    #[error("point lies within {distance:e} of a non-differentiable point (step {step:e})")]
    NearKink { distance: f64, step: f64 },
    #[error("step must be positive and finite, got {0}")]
    BadStep(f64),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// A scalar function of a flat parameter vector with a known gradient.
pub trait Objective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError>;
    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError>;
    /// Distance from `x` to the nearest point where the function is not
    /// differentiable, measured along any single coordinate.
    fn kink_distance(&self, x: &[f64]) -> f64;
}

/// Largest relative error between the analytic gradient and central
/// differences `(f(x + h) − f(x − h)) / 2h`, over all coordinates.
///
/// Relative error is `|a − n| / max(|a|, |n|, 1e-8)`. Points closer than `step`
/// to a kink are refused rather than reported as passing.
pub fn numeric_gradient_check(
    f: &impl Objective,
    point: &[f64],
    step: f64,
) -> Result<f64, GradCheckError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(GradCheckError::BadStep(step));
    }
    let distance = f.kink_distance(point);
    if distance <= step {
        return Err(GradCheckError::NearKink { distance, step });
    }
    let analytic = f.gradient(point)?;
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let orig = x[k];
        x[k] = orig + step;
        let up = f.value(&x)?;
        x[k] = orig - step;
        let down = f.value(&x)?;
        x[k] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[k];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// `Σ smooth_l1(x_k)`; kinks at `|x_k| = 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct SmoothL1Objective;

impl Objective for SmoothL1Objective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        Ok(x.iter().map(|&v| smooth_l1(v)).sum())
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        Ok(x.iter().map(|&v| smooth_l1_grad(v)).collect())
    }

    fn kink_distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .map(|v| (v.abs() - 1.0).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Region-proposal loss as a function of `[p_0, t_0.., p_1, t_1.., …]`
/// with fixed targets.
#[derive(Debug, Clone)]
pub struct RpnObjective {
    pub positive: Vec<bool>,
    pub t_star: Vec<[f64; 4]>,
    pub config: RpnLossConfig,
}

impl RpnObjective {
    fn batch(&self, x: &[f64]) -> Result<Vec<AnchorPrediction>, LossError> {
        self.positive
            .iter()
            .zip(&self.t_star)
            .zip(x.chunks_exact(5))
            .map(|((&pos, ts), c)| AnchorPrediction::new(c[0], pos, [c[1], c[2], c[3], c[4]], *ts))
            .collect()
    }

    pub fn point(batch: &[AnchorPrediction]) -> Vec<f64> {
        batch
            .iter()
            .flat_map(|a| std::iter::once(a.p()).chain(a.t()))
            .collect()
    }
}

impl Objective for RpnObjective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        rpn_loss(&self.batch(x)?, &self.config)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        Ok(rpn_loss_grad(&self.batch(x)?, &self.config)?
            .into_iter()
            .flat_map(|g| std::iter::once(g.d_p).chain(g.d_t))
            .collect())
    }

    fn kink_distance(&self, x: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for ((&pos, ts), c) in self
            .positive
            .iter()
            .zip(&self.t_star)
            .zip(x.chunks_exact(5))
        {
            // Clamp corners, and the edges of the valid probability range.
            for edge in [0.0, PROB_EPSILON, 1.0 - PROB_EPSILON, 1.0] {
                d = d.min((c[0] - edge).abs());
            }
            if pos {
                for k in 0..4 {
                    d = d.min(((c[k + 1] - ts[k]).abs() - 1.0).abs());
                }
            }
        }
        d
    }
}

/// Single-shot detector loss as a function of `[logits_0(2), loc_0(4), …]`.
#[derive(Debug, Clone)]
pub struct SsdObjective {
    pub matches: Vec<Option<usize>>,
    pub targets: Vec<[f64; 4]>,
}

impl SsdObjective {
    fn batch(&self, x: &[f64]) -> Result<SsdBatch, LossError> {
        let (logits, loc) = x
            .chunks_exact(6)
            .map(|c| ([c[0], c[1]], [c[2], c[3], c[4], c[5]]))
            .unzip();
        SsdBatch::new(self.matches.clone(), logits, loc, self.targets.clone())
    }

    pub fn point(batch: &SsdBatch) -> Vec<f64> {
        batch
            .logits()
            .iter()
            .zip(batch.loc())
            .flat_map(|(c, l)| c.iter().chain(l).copied().collect::<Vec<_>>())
            .collect()
    }
}

impl Objective for SsdObjective {
    fn value(&self, x: &[f64]) -> Result<f64, LossError> {
        ssd_loss(&self.batch(x)?)
    }

    fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, LossError> {
        let g = ssd_loss_grad(&self.batch(x)?)?;
        Ok(g.d_logits
            .iter()
            .zip(&g.d_loc)
            .flat_map(|(c, l)| c.iter().chain(l).copied().collect::<Vec<_>>())
            .collect())
    }

    fn kink_distance(&self, x: &[f64]) -> f64 {
        let mut d = f64::INFINITY;
        for (m, c) in self.matches.iter().zip(x.chunks_exact(6)) {
            if let Some(j) = m {
                for k in 0..4 {
                    d = d.min(((c[k + 2] - self.targets[*j][k]).abs() - 1.0).abs());
                }
            }
        }
        d
    }
}

pub const GRAD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Random points closer than this to a kink are redrawn.
const KINK_MARGIN: f64 = 1e-3;

/// Draws a random region-proposal problem away from kinks.
pub fn random_rpn_problem(rng: &mut impl Rng) -> (RpnObjective, Vec<f64>) {
    loop {
        let n = rng.gen_range(1..6);
        let positive: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let t_star: Vec<[f64; 4]> = (0..n)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
            .collect();
        let config = RpnLossConfig {
            lambda: rng.gen_range(0.1..10.0),
            n_cls: rng.gen_range(1..300),
            n_reg: rng.gen_range(1..300),
        };
        let x: Vec<f64> = (0..n)
            .flat_map(|_| {
                let p = rng.gen_range(0.02..0.98);
                let t: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
                std::iter::once(p).chain(t).collect::<Vec<_>>()
            })
            .collect();
        let f = RpnObjective {
            positive,
            t_star,
            config,
        };
        if f.kink_distance(&x) > KINK_MARGIN {
            return (f, x);
        }
    }
}

/// Draws a random single-shot detector problem (at least one match) away from kinks.
pub fn random_ssd_problem(rng: &mut impl Rng) -> (SsdObjective, Vec<f64>) {
    loop {
        let n_gt = rng.gen_range(1..4);
        let n_boxes = rng.gen_range(1..8);
        let mut matches: Vec<Option<usize>> = (0..n_boxes)
            .map(|_| rng.gen_bool(0.5).then(|| rng.gen_range(0..n_gt)))
            .collect();
        matches[0] = Some(rng.gen_range(0..n_gt));
        let targets: Vec<[f64; 4]> = (0..n_gt)
            .map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))
            .collect();
        let x: Vec<f64> = (0..n_boxes * 6).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let f = SsdObjective { matches, targets };
        if f.kink_distance(&x) > KINK_MARGIN {
            return (f, x);
        }
    }
}

fn random_smooth_l1_point(rng: &mut impl Rng) -> Vec<f64> {
    loop {
        let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-4.0..4.0)).collect();
        if SmoothL1Objective.kink_distance(&x) > KINK_MARGIN {
            return x;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
    }
}

fn close(name: &str, got: f64, want: f64, tol: f64) -> CheckOutcome {
    outcome(
        name,
        (got - want).abs() <= tol,
        format!("got {got:.12}, want {want:.12} ± {tol:e}"),
    )
}

fn gradient_suite<F: Objective>(
    name: &str,
    points: usize,
    mut draw: impl FnMut() -> (F, Vec<f64>),
) -> CheckOutcome {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let (f, x) = draw();
        match numeric_gradient_check(&f, &x, GRAD_STEP) {
            Ok(err) => worst = worst.max(err),
            Err(e) => return outcome(name, false, e.to_string()),
        }
    }
    outcome(
        name,
        worst <= GRAD_TOLERANCE,
        format!("max relative error {worst:.3e} over {points} points (limit {GRAD_TOLERANCE:e})"),
    )
}

/// Runs the loss examples, invariants and gradient checks. Deterministic for a
/// given seed.
pub fn run_self_check(seed: u64, points: usize) -> Vec<CheckOutcome> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut out = vec![
        close("smooth_l1(0)", smooth_l1(0.0), 0.0, 0.0),
        close("smooth_l1(0.5)", smooth_l1(0.5), 0.125, 1e-15),
        close("smooth_l1(2)", smooth_l1(2.0), 1.5, 1e-15),
        close("smooth_l1'(0.5)", smooth_l1_grad(0.5), 0.5, 1e-15),
        close("smooth_l1'(3)", smooth_l1_grad(3.0), 1.0, 0.0),
        close("smooth_l1'(0)", smooth_l1_grad(0.0), 0.0, 0.0),
    ];

    let junction = [1.0f64, -1.0].iter().all(|&s| {
        (0.5 * s * s - (s.abs() - 0.5)).abs() <= 1e-12 && (s - s.signum()).abs() <= 1e-12
    });
    out.push(outcome(
        "smooth_l1 C1 at |x| = 1",
        junction,
        "value and slope of both branches agree".into(),
    ));

    let kink = numeric_gradient_check(&SmoothL1Objective, &[1.0], GRAD_STEP);
    out.push(outcome(
        "gradient check refuses kink",
        matches!(kink, Err(GradCheckError::NearKink { .. })),
        format!("{kink:?}"),
    ));

    let hand = AnchorPrediction::new(0.5, true, [0.5; 4], [0.0; 4]).expect("valid anchor");
    let unit = RpnLossConfig {
        lambda: 1.0,
        n_cls: 1,
        n_reg: 1,
    };
    out.push(match rpn_loss(&[hand], &unit) {
        Ok(v) => close("rpn_loss hand case", v, 1.19315, 1e-5),
        Err(e) => outcome("rpn_loss hand case", false, e.to_string()),
    });

    let mut lambda_ok = true;
    for _ in 0..points {
        let (f, x) = random_rpn_problem(&mut rng);
        let batch = f.batch(&x).expect("valid batch");
        let doubled = RpnLossConfig {
            lambda: 2.0 * f.config.lambda,
            ..f.config
        };
        let (Ok(base), Ok(twice), Ok(terms)) = (
            rpn_loss(&batch, &f.config),
            rpn_loss(&batch, &doubled),
            rpn_loss_terms(&batch, &f.config),
        ) else {
            lambda_ok = false;
            break;
        };
        let reg = f.config.lambda * terms.regression;
        lambda_ok &= base >= 0.0 && ((twice - base) - reg).abs() <= 1e-12 * (1.0 + reg);
    }
    out.push(outcome(
        "rpn_loss non-negative and linear in lambda",
        lambda_ok,
        format!("{points} random batches"),
    ));

    let uniform = SsdBatch::new(
        vec![Some(0)],
        vec![[0.0, 0.0]],
        vec![[0.0; 4]],
        vec![[0.0; 4]],
    )
    .and_then(|b| ssd_loss(&b));
    out.push(match uniform {
        Ok(v) => close("ssd_loss uniform logits", v, 2f64.ln(), 1e-9),
        Err(e) => outcome("ssd_loss uniform logits", false, e.to_string()),
    });
    let offset = SsdBatch::new(
        vec![Some(0)],
        vec![[-10.0, 10.0]],
        vec![[2.0; 4]],
        vec![[0.0; 4]],
    )
    .and_then(|b| ssd_loss(&b));
    out.push(match offset {
        Ok(v) => close("ssd_loss location offset 2", v, 6.0, 1e-6),
        Err(e) => outcome("ssd_loss location offset 2", false, e.to_string()),
    });

    let mut worst_roundtrip = 0.0f64;
    for _ in 0..points {
        let b = random_box(&mut rng);
        let anchor = random_box(&mut rng);
        if let Ok(back) = decode_box(&encode_box(&b, &anchor), &anchor) {
            for (x, y) in back.coords().iter().zip(b.coords()) {
                worst_roundtrip = worst_roundtrip.max((x - y).abs());
            }
        } else {
            worst_roundtrip = f64::INFINITY;
        }
    }
    out.push(outcome(
        "decode(encode(box)) = box",
        worst_roundtrip <= 1e-12,
        format!("max coordinate error {worst_roundtrip:.3e}"),
    ));

    out.push(gradient_suite("smooth_l1 gradient", points, || {
        (SmoothL1Objective, random_smooth_l1_point(&mut rng))
    }));
    let mut rng_rpn = StdRng::seed_from_u64(seed.wrapping_add(1));
    out.push(gradient_suite("rpn_loss gradient", points, || {
        random_rpn_problem(&mut rng_rpn)
    }));
    let mut rng_ssd = StdRng::seed_from_u64(seed.wrapping_add(2));
    out.push(gradient_suite("ssd_loss gradient", points, || {
        random_ssd_problem(&mut rng_ssd)
    }));
    out
}

fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let x = rng.gen_range(0.0..1000.0);
    let y = rng.gen_range(0.0..1000.0);
    let w = rng.gen_range(0.5..400.0);
    let h = rng.gen_range(0.5..400.0);
    BoundingBox::new(x, y, x + w, y + h).expect("positive size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_gradient_examples() {
        for x in [0.5, 3.0, 0.0, -2.5] {
            let err = numeric_gradient_check(&SmoothL1Objective, &[x], 1e-5).unwrap();
            assert!(err <= 1e-6, "x = {x}: {err}");
        }
    }

    #[test]
    fn kink_is_reported() {
        let err = numeric_gradient_check(&SmoothL1Objective, &[-1.0 + 1e-7], 1e-5).unwrap_err();
        assert!(matches!(err, GradCheckError::NearKink { .. }));
        assert!(numeric_gradient_check(&SmoothL1Objective, &[0.2], 0.0).is_err());
    }

    #[test]
    fn rpn_clamp_boundary_is_a_kink() {
        let f = RpnObjective {
            positive: vec![true],
            t_star: vec![[0.0; 4]],
            config: RpnLossConfig::for_batch(1),
        };
        let err = numeric_gradient_check(&f, &[PROB_EPSILON, 0.1, 0.1, 0.1, 0.1], 1e-5);
        assert!(matches!(err, Err(GradCheckError::NearKink { .. })));
    }

    #[test]
    fn random_gradients_agree() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..100 {
            let (f, x) = random_rpn_problem(&mut rng);
            assert!(numeric_gradient_check(&f, &x, GRAD_STEP).unwrap() <= GRAD_TOLERANCE);
            let (f, x) = random_ssd_problem(&mut rng);
            assert!(numeric_gradient_check(&f, &x, GRAD_STEP).unwrap() <= GRAD_TOLERANCE);
        }
    }

    #[test]
    fn rpn_zero_exactly_when_predictions_exact() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.gen_range(1..6);
            let exact: Vec<AnchorPrediction> = (0..n)
                .map(|_| {
                    let pos = rng.gen_bool(0.5);
                    let ts: [f64; 4] = std::array::from_fn(|_| rng.gen_range(-2.0..2.0));
                    AnchorPrediction::new(if pos { 1.0 } else { 0.0 }, pos, ts, ts).unwrap()
                })
                .collect();
            let cfg = RpnLossConfig::for_batch(n);
            assert!(rpn_loss(&exact, &cfg).unwrap() < 1e-6);

            // Any classification or positive-anchor regression error shows up.
            let k = rng.gen_range(0..n);
            let a = exact[k];
            let mut perturbed = exact.clone();
            perturbed[k] = if a.is_positive() && rng.gen_bool(0.5) {
                let mut t = a.t();
                t[rng.gen_range(0..4)] += 0.05;
                AnchorPrediction::new(a.p(), true, t, a.t_star()).unwrap()
            } else {
                AnchorPrediction::new(0.5, a.is_positive(), a.t(), a.t_star()).unwrap()
            };
            assert!(rpn_loss(&perturbed, &cfg).unwrap() > 1e-4);
        }
    }

    #[test]
    fn self_check_passes() {
        let results = run_self_check(42, 100);
        for r in &results {
            assert!(r.passed, "{}: {}", r.name, r.detail);
        }
        assert_eq!(results, run_self_check(42, 100));
    }
}
