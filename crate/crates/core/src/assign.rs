//! Task-aligned label assignment and the three-term detection loss
//! `λ₁·L_cls + λ₂·L_iou + λ₃·L_dfl`.

use serde::{Deserialize, Serialize};

use crate::boxes::{encode_ltrb, iou, Anchor, BBox, REG_MAX};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Matrix};

const TAL_EPS: f64 = 1e-9;
const CIOU_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtInstance {
    pub bbox: BBox,
    pub class_index: usize,
}

impl GtInstance {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.bbox.area() <= 0.0 {
            return Err(Error::Data(format!("ground truth box {:?} has no area", self.bbox)));
        }
        if self.class_index >= num_classes {
            return Err(Error::Shape(format!(
                "ground truth class {} out of range for {num_classes} classes",
                self.class_index
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_cls: f64,
    pub lambda_iou: f64,
    pub lambda_dfl: f64,
    pub tal_alpha: f64,
    pub tal_beta: f64,
    pub tal_topk: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_cls: 0.5,
            lambda_iou: 7.5,
            lambda_dfl: 1.5,
            tal_alpha: 0.5,
            tal_beta: 6.0,
            tal_topk: 10,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let l = [self.lambda_cls, self.lambda_iou, self.lambda_dfl];
        if l.iter().any(|v| !v.is_finite() || *v < 0.0) || l.iter().all(|&v| v == 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be non-negative with at least one positive, got {l:?}"
            )));
        }
        if self.tal_topk == 0 {
            return Err(Error::Config("tal topk must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// Matched ground-truth index per anchor, `None` for background.
    pub matched: Vec<Option<usize>>,
    /// Alignment metric `t = s^α·u^β` of the winning claim (0 for background).
    pub metric: Vec<f64>,
    /// IoU between the anchor's predicted box and its matched gt.
    pub overlap: Vec<f64>,
    /// Normalized soft target (0 for background).
    pub target: Vec<f64>,
    pub num_classes: usize,
    pub gt_classes: Vec<usize>,
}

impl AssignmentResult {
    pub fn num_positives(&self) -> usize {
        self.matched.iter().flatten().count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.matched
            .iter()
            .enumerate()
            .filter_map(|(a, m)| m.map(|g| (a, g)))
    }

    /// `A×K` classification targets: the soft target on the matched gt's class.
    pub fn target_scores(&self) -> Matrix<f64> {
        let mut t = Matrix::zeros(self.matched.len(), self.num_classes);
        for (a, g) in self.positives() {
            t.set(a, self.gt_classes[g], self.target[a]);
        }
        t
    }
}

/// Task-aligned assignment.
///
/// For each gt, anchors whose center lies strictly inside the box are
/// candidates; the `topk` by `t = s^α·u^β` (s = probability of the gt class,
/// u = IoU of the predicted box) claim the anchor. An anchor claimed twice goes
/// to the larger `t` (lower gt index on ties). Soft targets are `t` rescaled so
/// each gt's best positive equals its best IoU.
pub fn tal_assign(
    scores: &Matrix<f64>,
    pred_boxes: &[BBox],
    anchors: &[Anchor],
    gts: &[GtInstance],
    cfg: &LossConfig,
) -> Result<AssignmentResult> {
    let n = anchors.len();
    if scores.rows() != n || pred_boxes.len() != n {
        return Err(Error::Shape(format!(
            "{} anchors, {} score rows, {} predicted boxes",
            n,
            scores.rows(),
            pred_boxes.len()
        )));
    }
    let k = scores.cols();
    for g in gts {
        g.validate(k)?;
    }

    let mut matched = vec![None; n];
    let mut metric = vec![0.0f64; n];
    let mut overlap = vec![0.0f64; n];
    for (gi, gt) in gts.iter().enumerate() {
        let mut cand: Vec<(usize, f64, f64)> = anchors
            .iter()
            .enumerate()
            .filter(|(_, a)| gt.bbox.contains_strictly(a.cx, a.cy))
            .map(|(a, _)| {
                let s = scores.get(a, gt.class_index).max(0.0);
                let u = iou(&pred_boxes[a], &gt.bbox);
                (a, s.powf(cfg.tal_alpha) * u.powf(cfg.tal_beta), u)
            })
            .collect();
        cand.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        for &(a, t, u) in cand.iter().take(cfg.tal_topk) {
            // Strictly larger metric steals; earlier gts win ties.
            if matched[a].is_none() || t > metric[a] {
                matched[a] = Some(gi);
                metric[a] = t;
                overlap[a] = u;
            }
        }
    }

    let mut max_t = vec![0.0f64; gts.len()];
    let mut max_u = vec![0.0f64; gts.len()];
    for (a, m) in matched.iter().enumerate() {
        if let Some(g) = *m {
            max_t[g] = max_t[g].max(metric[a]);
            max_u[g] = max_u[g].max(overlap[a]);
        }
    }
    let target = (0..n)
        .map(|a| match matched[a] {
            Some(g) => metric[a] * max_u[g] / (max_t[g] + TAL_EPS),
            None => 0.0,
        })
        .collect();

    Ok(AssignmentResult {
        matched,
        metric,
        overlap,
        target,
        num_classes: k,
        gt_classes: gts.iter().map(|g| g.class_index).collect(),
    })
}

/// Binary cross-entropy with logits against soft targets, summed and divided
/// by `max(Σ targets, 1)`. Returns the loss and `∂L/∂logits`.
pub fn cls_loss(logits: &Matrix<f64>, targets: &Matrix<f64>) -> Result<(f64, Matrix<f64>)> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::Shape(format!(
            "logits {}x{} vs targets {}x{}",
            logits.rows(),
            logits.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    let norm = cls_normalizer(targets.as_slice().iter().sum());
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for ((g, &z), &y) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(logits.as_slice())
        .zip(targets.as_slice())
    {
        total += bce_with_logits(z, y);
        *g = (sigmoid(z) - y) / norm;
    }
    Ok((total / norm, grad))
}

pub(crate) fn cls_normalizer(target_mass: f64) -> f64 {
    target_mass.max(1.0)
}

/// `softplus(z) − y·z`, stable for large |z|.
#[inline]
pub(crate) fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - y * z + (-z.abs()).exp().ln_1p()
}

/// Complete IoU: `IoU − ρ²/c² − α·v`.
pub fn ciou(pred: &BBox, gt: &BBox) -> f64 {
    let u = iou(pred, gt);
    let (px1, py1, px2, py2) = (pred.x1 as f64, pred.y1 as f64, pred.x2 as f64, pred.y2 as f64);
    let (gx1, gy1, gx2, gy2) = (gt.x1 as f64, gt.y1 as f64, gt.x2 as f64, gt.y2 as f64);
    let cw = px2.max(gx2) - px1.min(gx1);
    let ch = py2.max(gy2) - py1.min(gy1);
    let c2 = cw * cw + ch * ch + CIOU_EPS;
    let rho2 = ((gx1 + gx2 - px1 - px2).powi(2) + (gy1 + gy2 - py1 - py2).powi(2)) / 4.0;
    let (pw, ph) = (px2 - px1, py2 - py1 + CIOU_EPS);
    let (gw, gh) = (gx2 - gx1, gy2 - gy1 + CIOU_EPS);
    let v = 4.0 / std::f64::consts::PI.powi(2) * ((gw / gh).atan() - (pw / ph).atan()).powi(2);
    let a = v / (v - u + (1.0 + CIOU_EPS));
    u - (rho2 / c2 + v * a)
}

fn positive_weights(assignment: &AssignmentResult) -> Vec<(usize, usize, f64)> {
    let pos: Vec<(usize, usize, f64)> = assignment
        .positives()
        .map(|(a, g)| (a, g, assignment.target[a]))
        .collect();
    let mass: f64 = pos.iter().map(|p| p.2).sum();
    if mass > 0.0 {
        pos
    } else {
        pos.into_iter().map(|(a, g, _)| (a, g, 1.0)).collect()
    }
}

/// Soft-target-weighted mean of `1 − CIoU` over positives; 0 with no positives.
pub fn iou_loss(pred_boxes: &[BBox], assignment: &AssignmentResult, gts: &[GtInstance]) -> f64 {
    let pos = positive_weights(assignment);
    let mass: f64 = pos.iter().map(|p| p.2).sum();
    if pos.is_empty() {
        return 0.0;
    }
    pos.iter()
        .map(|&(a, g, w)| w * (1.0 - ciou(&pred_boxes[a], &gts[g].bbox)))
        .sum::<f64>()
        / mass
}

/// Distribution focal loss on positives.
///
/// Each side's target distance is bracketed by its two neighbouring integer
/// bins, and the cross-entropy on each is weighted by proximity. Sides average
/// per anchor; anchors are soft-target weighted.
pub fn dfl_loss(
    dist_logits: &Matrix<f32>,
    assignment: &AssignmentResult,
    gts: &[GtInstance],
    anchors: &[Anchor],
) -> Result<f64> {
    if dist_logits.cols() != 4 * REG_MAX || dist_logits.rows() != anchors.len() {
        return Err(Error::Shape(format!(
            "expected {}x{} DFL logits, got {}x{}",
            anchors.len(),
            4 * REG_MAX,
            dist_logits.rows(),
            dist_logits.cols()
        )));
    }
    let pos = positive_weights(assignment);
    if pos.is_empty() {
        return Ok(0.0);
    }
    let mass: f64 = pos.iter().map(|p| p.2).sum();
    let mut total = 0.0;
    for &(a, g, w) in &pos {
        let ltrb = encode_ltrb(&anchors[a], &gts[g].bbox);
        let logits = dist_logits.row(a);
        let mut per_anchor = 0.0;
        for (side, &d) in ltrb.iter().enumerate() {
            per_anchor += side_dfl(&logits[side * REG_MAX..(side + 1) * REG_MAX], d as f64);
        }
        total += w * per_anchor / 4.0;
    }
    Ok(total / mass)
}

/// Cross-entropy against the two bins bracketing `target`.
pub fn side_dfl(logits: &[f32], target: f64) -> f64 {
    let hi = (REG_MAX - 1) as f64;
    let t = if !(0.0..=hi).contains(&target) {
        log::warn!("DFL target {target} outside [0, {hi}], clamped");
        target.clamp(0.0, hi)
    } else {
        target
    };
    let left = (t.floor() as usize).min(REG_MAX - 2);
    let right = left + 1;
    let w_left = right as f64 - t;
    let w_right = t - left as f64;
    let m = logits.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = m + logits.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
    let logp = |i: usize| logits[i] as f64 - lse;
    let mut loss = 0.0;
    if w_left > 0.0 {
        loss -= w_left * logp(left);
    }
    if w_right > 0.0 {
        loss -= w_right * logp(right);
    }
    loss
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub cls: f64,
    pub iou: f64,
    pub dfl: f64,
}

pub fn total_loss(parts: &LossParts, cfg: &LossConfig) -> f64 {
    cfg.lambda_cls * parts.cls + cfg.lambda_iou * parts.iou + cfg.lambda_dfl * parts.dfl
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor(x: f32, y: f32) -> Anchor {
        Anchor {
            cx: x,
            cy: y,
            stride: 8.0,
        }
    }

    fn gt(b: [f32; 4], c: usize) -> GtInstance {
        GtInstance {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            class_index: c,
        }
    }

    #[test]
    fn single_anchor_inside_becomes_positive() {
        let anchors = [anchor(4.0, 4.0)];
        let scores = Matrix::from_rows(&[vec![0.3, 0.7]]).unwrap();
        let boxes = [BBox::new(0.0, 0.0, 8.0, 8.0)];
        let cfg = LossConfig {
            tal_topk: 1,
            ..Default::default()
        };
        let r = tal_assign(&scores, &boxes, &anchors, &[gt([0., 0., 8., 8.], 1)], &cfg).unwrap();
        assert_eq!(r.matched, vec![Some(0)]);
        assert!((r.target[0] - 1.0).abs() < 1e-6);
        assert_eq!(r.target_scores().row(0), &[0.0, r.target[0]]);
    }

    #[test]
    fn anchor_outside_every_gt_is_background() {
        let anchors = [anchor(20.0, 20.0)];
        let scores = Matrix::from_rows(&[vec![1.0]]).unwrap();
        let boxes = [BBox::new(0.0, 0.0, 8.0, 8.0)];
        let r = tal_assign(
            &scores,
            &boxes,
            &anchors,
            &[gt([0., 0., 8., 8.], 0)],
            &LossConfig::default(),
        )
        .unwrap();
        assert_eq!(r.matched, vec![None]);
        assert_eq!(r.num_positives(), 0);
    }

    #[test]
    fn no_gts_means_all_background() {
        let anchors = [anchor(4.0, 4.0), anchor(12.0, 4.0)];
        let scores = Matrix::zeros(2, 3);
        let boxes = [BBox::new(0., 0., 1., 1.); 2];
        let r = tal_assign(&scores, &boxes, &anchors, &[], &LossConfig::default()).unwrap();
        assert!(r.matched.iter().all(Option::is_none));
    }

    #[test]
    fn class_out_of_range_rejected() {
        let anchors = [anchor(4.0, 4.0)];
        let r = tal_assign(
            &Matrix::zeros(1, 2),
            &[BBox::new(0., 0., 8., 8.)],
            &anchors,
            &[gt([0., 0., 8., 8.], 2)],
            &LossConfig::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn perfect_and_empty_cls_loss() {
        let logits = Matrix::from_rows(&[vec![60.0, -60.0], vec![-60.0, -60.0]]).unwrap();
        let targets = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let (l, _) = cls_loss(&logits, &targets).unwrap();
        assert!(l < 1e-20);
        let bg = Matrix::from_rows(&[vec![-80.0, -80.0]]).unwrap();
        let (l, _) = cls_loss(&bg, &Matrix::zeros(1, 2)).unwrap();
        assert!(l < 1e-30);
    }

    #[test]
    fn ciou_identity_and_far_boxes() {
        let b = BBox::new(1.0, 2.0, 9.0, 5.0);
        assert!((ciou(&b, &b) - 1.0).abs() < 1e-6);
        let far = BBox::new(100.0, 100.0, 104.0, 120.0);
        assert!(ciou(&b, &far) < 0.0);
    }

    #[test]
    fn dfl_bracketing() {
        let mut logits = vec![-100.0f32; REG_MAX];
        logits[5] = 100.0;
        assert!(side_dfl(&logits, 5.0) < 1e-12);
        let uniform = vec![0.0f32; REG_MAX];
        // equal weights on bins 5 and 6 of a uniform distribution: ln 16
        assert!((side_dfl(&uniform, 5.5) - (16.0f64).ln()).abs() < 1e-12);
        // out-of-range clamps to the last bin
        assert!((side_dfl(&uniform, 40.0) - (16.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let cfg = LossConfig::default();
        let l = total_loss(
            &LossParts {
                cls: 0.4,
                iou: 0.2,
                dfl: 0.1,
            },
            &cfg,
        );
        assert!((l - 1.85).abs() < 1e-12);
        assert_eq!(total_loss(&LossParts::default(), &cfg), 0.0);
        let only_cls = LossConfig {
            lambda_cls: 1.0,
            lambda_iou: 0.0,
            lambda_dfl: 0.0,
            ..cfg
        };
        assert_eq!(
            total_loss(
                &LossParts {
                    cls: 0.3,
                    iou: 9.0,
                    dfl: 9.0
                },
                &only_cls
            ),
            0.3
        );
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let zero = LossConfig {
            lambda_cls: 0.0,
            lambda_iou: 0.0,
            lambda_dfl: 0.0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let no_topk = LossConfig {
            tal_topk: 0,
            ..Default::default()
        };
        assert!(no_topk.validate().is_err());
    }
}
