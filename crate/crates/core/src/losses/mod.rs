//! Reference implementations of the detector training losses.
//!
//! * Region-proposal multi-task loss:
//!   `L = (1/N_cls) Σ L_cls(p_i, p_i*) + λ (1/N_reg) Σ p_i* L_reg(t_i, t_i*)`
//!   with `L_cls` the two-class log loss and `L_reg` the smooth L1 penalty
//!   summed over the four box parameters.
//! * Single-shot detector loss:
//!   `L = (1/N) (L_conf(x, c) + L_loc(x, l, g))` where `N` counts matched
//!   default boxes, `L_conf` is softmax cross-entropy and `L_loc` is smooth L1
//!   over matched boxes. Confidence and location terms are summed without a
//!   weighting factor.
//!
//! These exist to verify and document the formulas; nothing here trains a
//! network.

mod gradcheck;

pub use gradcheck::{
    numeric_gradient_check, run_self_check, CheckOutcome, GradCheckError, Objective, RpnObjective,
    SmoothL1Objective, SsdObjective,
};

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{BoundingBox, GeometryError};

/// Probabilities are clamped to `[ε, 1 − ε]` before taking logarithms.
pub const PROB_EPSILON: f64 = 1e-7;

pub const BACKGROUND: usize = 0;
pub const POTHOLE: usize = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("no matched default boxes (N = 0)")]
    NoMatches,
    #[error("normalizers must be at least 1")]
    BadNormalizer,
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

pub fn smooth_l1_grad(x: f64) -> f64 {
    if x.abs() < 1.0 {
        x
    } else {
        x.signum()
    }
}

/// Elementwise smooth L1 of `a - b`, summed.
pub fn smooth_l1_diff(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter().zip(b).map(|(x, y)| smooth_l1(x - y)).sum()
}

/// Anchor-relative box parameters `(dx, dy, dw, dh)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxDelta(pub [f64; 4]);

pub fn encode_box(bbox: &BoundingBox, anchor: &BoundingBox) -> BoxDelta {
    let (cx, cy) = bbox.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoxDelta([
        (cx - ax) / aw,
        (cy - ay) / ah,
        (bbox.width() / aw).ln(),
        (bbox.height() / ah).ln(),
    ])
}

pub fn decode_box(delta: &BoxDelta, anchor: &BoundingBox) -> Result<BoundingBox, GeometryError> {
    let [dx, dy, dw, dh] = delta.0;
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    BoundingBox::from_center(dx * aw + ax, dy * ah + ay, aw * dw.exp(), ah * dh.exp())
}

/// One anchor's prediction and target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorPrediction {
    p: f64,
    positive: bool,
    t: [f64; 4],
    t_star: [f64; 4],
}

impl AnchorPrediction {
    pub fn new(p: f64, positive: bool, t: [f64; 4], t_star: [f64; 4]) -> Result<Self, LossError> {
        if !(0.0..=1.0).contains(&p) {
            return Err(LossError::InvalidInput(format!(
                "probability {p} outside [0, 1]"
            )));
        }
        if t.iter().chain(&t_star).any(|v| !v.is_finite()) {
            return Err(LossError::InvalidInput(
                "box parameters must be finite".into(),
            ));
        }
        Ok(Self {
            p,
            positive,
            t,
            t_star,
        })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Ground-truth indicator as 0 or 1.
    pub fn p_star(&self) -> f64 {
        if self.positive {
            1.0
        } else {
            0.0
        }
    }

    pub fn is_positive(&self) -> bool {
        self.positive
    }

    pub fn t(&self) -> [f64; 4] {
        self.t
    }

    pub fn t_star(&self) -> [f64; 4] {
        self.t_star
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLossConfig {
    pub lambda: f64,
    pub n_cls: usize,
    pub n_reg: usize,
}

impl RpnLossConfig {
    /// `λ = 1` with both normalizers set to the batch size.
    pub fn for_batch(len: usize) -> Self {
        Self {
            lambda: 1.0,
            n_cls: len.max(1),
            n_reg: len.max(1),
        }
    }
}

/// The two normalized sums of the region-proposal loss, before `λ` is applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpnLossTerms {
    pub classification: f64,
    pub regression: f64,
}

fn log_loss(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_EPSILON, 1.0 - PROB_EPSILON);
    if positive {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn rpn_loss_terms(
    batch: &[AnchorPrediction],
    config: &RpnLossConfig,
) -> Result<RpnLossTerms, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if config.n_cls == 0 || config.n_reg == 0 {
        return Err(LossError::BadNormalizer);
    }
    let cls: f64 = batch.iter().map(|a| log_loss(a.p, a.positive)).sum();
    let reg: f64 = batch
        .iter()
        .filter(|a| a.positive)
        .map(|a| smooth_l1_diff(&a.t, &a.t_star))
        .sum();
    Ok(RpnLossTerms {
        classification: cls / config.n_cls as f64,
        regression: reg / config.n_reg as f64,
    })
}

pub fn rpn_loss(batch: &[AnchorPrediction], config: &RpnLossConfig) -> Result<f64, LossError> {
    let terms = rpn_loss_terms(batch, config)?;
    Ok(terms.classification + config.lambda * terms.regression)
}

/// Partial derivatives of the region-proposal loss for one anchor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorGradient {
    pub d_p: f64,
    pub d_t: [f64; 4],
}

pub fn rpn_loss_grad(
    batch: &[AnchorPrediction],
    config: &RpnLossConfig,
) -> Result<Vec<AnchorGradient>, LossError> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if config.n_cls == 0 || config.n_reg == 0 {
        return Err(LossError::BadNormalizer);
    }
    let reg_scale = config.lambda / config.n_reg as f64;
    Ok(batch
        .iter()
        .map(|a| {
            // The clamp is flat outside [ε, 1 − ε].
            let d_p = if a.p > PROB_EPSILON && a.p < 1.0 - PROB_EPSILON {
                let d = if a.positive {
                    -1.0 / a.p
                } else {
                    1.0 / (1.0 - a.p)
                };
                d / config.n_cls as f64
            } else {
                0.0
            };
            let d_t = std::array::from_fn(|k| {
                if a.positive {
                    reg_scale * smooth_l1_grad(a.t[k] - a.t_star[k])
                } else {
                    0.0
                }
            });
            AnchorGradient { d_p, d_t }
        })
        .collect())
}

/// Inputs of the single-shot detector loss for one image.
///
/// `matches[i]` is the ground-truth index default box `i` is matched to, if
/// any. `logits[i]` are the background/pothole scores, `loc[i]` the predicted
/// box parameters, and `targets[j]` the parameters of ground truth `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdBatch {
    matches: Vec<Option<usize>>,
    logits: Vec<[f64; 2]>,
    loc: Vec<[f64; 4]>,
    targets: Vec<[f64; 4]>,
}

impl SsdBatch {
    pub fn new(
        matches: Vec<Option<usize>>,
        logits: Vec<[f64; 2]>,
        loc: Vec<[f64; 4]>,
        targets: Vec<[f64; 4]>,
    ) -> Result<Self, LossError> {
        let n = matches.len();
        if logits.len() != n || loc.len() != n {
            return Err(LossError::InvalidInput(format!(
                "{} default boxes but {} logit rows and {} location rows",
                n,
                logits.len(),
                loc.len()
            )));
        }
        if let Some(j) = matches.iter().flatten().find(|&&j| j >= targets.len()) {
            return Err(LossError::InvalidInput(format!(
                "match refers to ground truth {j}, only {} given",
                targets.len()
            )));
        }
        let values = logits
            .iter()
            .flatten()
            .chain(loc.iter().flatten())
            .chain(targets.iter().flatten());
        if values.into_iter().any(|v| !v.is_finite()) {
            return Err(LossError::InvalidInput("values must be finite".into()));
        }
        Ok(Self {
            matches,
            logits,
            loc,
            targets,
        })
    }

    /// Builds a batch from a 0/1 indicator matrix `x[box][gt]`. Each row may
    /// hold at most one 1.
    pub fn from_indicators(
        x: &[Vec<u8>],
        logits: Vec<[f64; 2]>,
        loc: Vec<[f64; 4]>,
        targets: Vec<[f64; 4]>,
    ) -> Result<Self, LossError> {
        let mut matches = Vec::with_capacity(x.len());
        for (i, row) in x.iter().enumerate() {
            if row.len() != targets.len() {
                return Err(LossError::InvalidInput(format!(
                    "indicator row {i} has {} columns, expected {}",
                    row.len(),
                    targets.len()
                )));
            }
            if row.iter().any(|&v| v > 1) {
                return Err(LossError::InvalidInput(format!(
                    "indicator row {i} is not 0/1"
                )));
            }
            let mut ones = row
                .iter()
                .enumerate()
                .filter(|(_, &v)| v == 1)
                .map(|(j, _)| j);
            let first = ones.next();
            if ones.next().is_some() {
                return Err(LossError::InvalidInput(format!(
                    "default box {i} is matched to more than one ground truth"
                )));
            }
            matches.push(first);
        }
        Self::new(matches, logits, loc, targets)
    }

    /// Number of matched default boxes.
    pub fn n_matched(&self) -> usize {
        self.matches.iter().filter(|m| m.is_some()).count()
    }

    pub fn matches(&self) -> &[Option<usize>] {
        &self.matches
    }

    pub fn logits(&self) -> &[[f64; 2]] {
        &self.logits
    }

    pub fn loc(&self) -> &[[f64; 4]] {
        &self.loc
    }

    pub fn targets(&self) -> &[[f64; 4]] {
        &self.targets
    }

    fn target_class(&self, i: usize) -> usize {
        if self.matches[i].is_some() {
            POTHOLE
        } else {
            BACKGROUND
        }
    }
}

fn log_sum_exp(z: &[f64; 2]) -> f64 {
    let m = z[0].max(z[1]);
    m + ((z[0] - m).exp() + (z[1] - m).exp()).ln()
}

fn softmax(z: &[f64; 2]) -> [f64; 2] {
    let lse = log_sum_exp(z);
    [(z[0] - lse).exp(), (z[1] - lse).exp()]
}

/// Unmatched boxes contribute background confidence loss only; there is no
/// hard-negative mining.
pub fn ssd_loss(batch: &SsdBatch) -> Result<f64, LossError> {
    let n = batch.n_matched();
    if n == 0 {
        return Err(LossError::NoMatches);
    }
    let conf: f64 = (0..batch.matches.len())
        .map(|i| log_sum_exp(&batch.logits[i]) - batch.logits[i][batch.target_class(i)])
        .sum();
    let loc: f64 = batch
        .matches
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.map(|j| smooth_l1_diff(&batch.loc[i], &batch.targets[j])))
        .sum();
    Ok((conf + loc) / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsdGradient {
    pub d_logits: Vec<[f64; 2]>,
    pub d_loc: Vec<[f64; 4]>,
}

pub fn ssd_loss_grad(batch: &SsdBatch) -> Result<SsdGradient, LossError> {
    let n = batch.n_matched();
    if n == 0 {
        return Err(LossError::NoMatches);
    }
    let scale = 1.0 / n as f64;
    let d_logits = (0..batch.matches.len())
        .map(|i| {
            let mut g = softmax(&batch.logits[i]);
            g[batch.target_class(i)] -= 1.0;
            [g[0] * scale, g[1] * scale]
        })
        .collect();
    let d_loc = batch
        .matches
        .iter()
        .enumerate()
        .map(|(i, m)| match m {
            Some(j) => std::array::from_fn(|k| {
                scale * smooth_l1_grad(batch.loc[i][k] - batch.targets[*j][k])
            }),
            None => [0.0; 4],
        })
        .collect();
    Ok(SsdGradient { d_logits, d_loc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn smooth_l1_examples() {
        assert_eq!(smooth_l1(0.0), 0.0);
        assert_eq!(smooth_l1(0.5), 0.125);
        assert_eq!(smooth_l1(2.0), 1.5);
        assert_eq!(smooth_l1(-2.0), 1.5);
    }

    #[test]
    fn smooth_l1_derivative_examples() {
        assert_eq!(smooth_l1_grad(0.5), 0.5);
        assert_eq!(smooth_l1_grad(3.0), 1.0);
        assert_eq!(smooth_l1_grad(0.0), 0.0);
        let h = 1e-5;
        let fd = (smooth_l1(0.5 + h) - smooth_l1(0.5 - h)) / (2.0 * h);
        assert!((fd - 0.5).abs() < 1e-6);
    }

    #[test]
    fn smooth_l1_is_c1_at_junction() {
        for s in [1.0, -1.0] {
            let quad = 0.5 * s * s;
            let lin = f64::abs(s) - 0.5;
            assert!((quad - lin).abs() <= 1e-12);
            let (d_quad, d_lin) = (s, f64::signum(s));
            assert!((d_quad - d_lin).abs() <= 1e-12);
            assert!((smooth_l1(s) - quad).abs() <= 1e-12);
        }
    }

    fn bx(a: f64, b: f64, c: f64, d: f64) -> BoundingBox {
        BoundingBox::new(a, b, c, d).unwrap()
    }

    #[test]
    fn encode_examples() {
        let anchor = bx(10.0, 10.0, 30.0, 20.0);
        assert_eq!(encode_box(&anchor, &anchor).0, [0.0; 4]);
        let wide = bx(0.0, 10.0, 40.0, 20.0);
        let t = encode_box(&wide, &anchor).0;
        assert_eq!(t[0], 0.0);
        assert_eq!(t[1], 0.0);
        assert!((t[2] - 2f64.ln()).abs() < 1e-15);
        assert_eq!(t[3], 0.0);
    }

    #[test]
    fn rpn_hand_case() {
        let a = AnchorPrediction::new(0.5, true, [0.5; 4], [0.0; 4]).unwrap();
        let cfg = RpnLossConfig {
            lambda: 1.0,
            n_cls: 1,
            n_reg: 1,
        };
        let loss = rpn_loss(&[a], &cfg).unwrap();
        assert!((loss - (-(0.5f64.ln()) + 0.5)).abs() < 1e-12);
        assert!((loss - 1.19315).abs() < 1e-5);
    }

    #[test]
    fn rpn_perfect_batch_is_zero() {
        let batch = [
            AnchorPrediction::new(1.0, true, [0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4]).unwrap(),
            AnchorPrediction::new(0.0, false, [5.0; 4], [0.0; 4]).unwrap(),
        ];
        let loss = rpn_loss(&batch, &RpnLossConfig::for_batch(2)).unwrap();
        assert!((0.0..1e-6).contains(&loss));
    }

    #[test]
    fn negative_anchor_has_no_regression_term() {
        let a = AnchorPrediction::new(0.3, false, [9.0; 4], [0.0; 4]).unwrap();
        let terms = rpn_loss_terms(&[a], &RpnLossConfig::for_batch(1)).unwrap();
        assert_eq!(terms.regression, 0.0);
    }

    #[test]
    fn rpn_errors() {
        let cfg = RpnLossConfig::for_batch(1);
        assert_eq!(rpn_loss(&[], &cfg), Err(LossError::EmptyBatch));
        let a = AnchorPrediction::new(0.3, false, [0.0; 4], [0.0; 4]).unwrap();
        let bad = RpnLossConfig { n_cls: 0, ..cfg };
        assert_eq!(rpn_loss(&[a], &bad), Err(LossError::BadNormalizer));
        assert!(AnchorPrediction::new(1.5, true, [0.0; 4], [0.0; 4]).is_err());
        assert!(AnchorPrediction::new(0.5, true, [f64::NAN; 4], [0.0; 4]).is_err());
    }

    fn one_box(logits: [f64; 2], loc: [f64; 4]) -> SsdBatch {
        SsdBatch::from_indicators(&[vec![1]], vec![logits], vec![loc], vec![[0.0; 4]]).unwrap()
    }

    #[test]
    fn ssd_examples() {
        let confident = one_box([-10.0, 10.0], [0.0; 4]);
        assert!(ssd_loss(&confident).unwrap() < 1e-6);

        let uniform = one_box([0.3, 0.3], [0.0; 4]);
        assert!((ssd_loss(&uniform).unwrap() - 2f64.ln()).abs() <= 1e-9);

        let off = one_box([-10.0, 10.0], [2.0; 4]);
        assert!((ssd_loss(&off).unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn ssd_unmatched_boxes_only_add_background_confidence() {
        let batch = SsdBatch::from_indicators(
            &[vec![1], vec![0]],
            vec![[0.0, 0.0], [0.0, 0.0]],
            vec![[0.0; 4], [7.0; 4]],
            vec![[0.0; 4]],
        )
        .unwrap();
        assert_eq!(batch.n_matched(), 1);
        // ln 2 from each box, no location term for the unmatched one.
        assert!((ssd_loss(&batch).unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ssd_rejects_bad_batches() {
        let none =
            SsdBatch::from_indicators(&[vec![0]], vec![[0.0; 2]], vec![[0.0; 4]], vec![[0.0; 4]])
                .unwrap();
        assert_eq!(ssd_loss(&none), Err(LossError::NoMatches));
        assert!(SsdBatch::from_indicators(
            &[vec![1, 1]],
            vec![[0.0; 2]],
            vec![[0.0; 4]],
            vec![[0.0; 4]; 2]
        )
        .is_err());
        assert!(SsdBatch::from_indicators(
            &[vec![2]],
            vec![[0.0; 2]],
            vec![[0.0; 4]],
            vec![[0.0; 4]]
        )
        .is_err());
        assert!(SsdBatch::new(
            vec![Some(3)],
            vec![[0.0; 2]],
            vec![[0.0; 4]],
            vec![[0.0; 4]]
        )
        .is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0.0..1000.0f64, 0.0..1000.0f64, 0.5..400.0f64, 0.5..400.0f64)
            .prop_map(|(x, y, w, h)| bx(x, y, x + w, y + h))
    }

    fn arb_anchor() -> impl Strategy<Value = AnchorPrediction> {
        (
            0.0..=1.0f64,
            any::<bool>(),
            prop::array::uniform4(-3.0..3.0f64),
            prop::array::uniform4(-3.0..3.0f64),
        )
            .prop_map(|(p, pos, t, ts)| AnchorPrediction::new(p, pos, t, ts).unwrap())
    }

    proptest! {
        #[test]
        fn encode_decode_inverse(b in arb_box(), anchor in arb_box()) {
            let back = decode_box(&encode_box(&b, &anchor), &anchor).unwrap();
            for (x, y) in back.coords().iter().zip(b.coords()) {
                prop_assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
        }

        #[test]
        fn rpn_loss_non_negative(batch in prop::collection::vec(arb_anchor(), 1..10), lambda in 0.0..5.0f64) {
            let cfg = RpnLossConfig { lambda, ..RpnLossConfig::for_batch(batch.len()) };
            prop_assert!(rpn_loss(&batch, &cfg).unwrap() >= 0.0);
        }

        #[test]
        fn rpn_loss_linear_in_lambda(batch in prop::collection::vec(arb_anchor(), 1..10), lambda in 0.0..5.0f64) {
            let cfg = RpnLossConfig { lambda, ..RpnLossConfig::for_batch(batch.len()) };
            let doubled = RpnLossConfig { lambda: 2.0 * lambda, ..cfg };
            let reg = rpn_loss_terms(&batch, &cfg).unwrap().regression;
            let delta = rpn_loss(&batch, &doubled).unwrap() - rpn_loss(&batch, &cfg).unwrap();
            prop_assert!((delta - lambda * reg).abs() <= 1e-12 * (1.0 + lambda * reg));
        }
    }
}
