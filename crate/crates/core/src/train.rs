//! Toy-scale adaptor training on frozen synthetic region features.
//!
//! Only the adaptor and the scalar logit scale/bias receive gradients; boxes
//! come from the frozen box logits, so the IoU and DFL terms are logged but
//! contribute no gradient to the text side.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::{AdaptorConfig, AdaptorGrads, AdaptorParams};
use crate::assign::{
    bce_with_logits, cls_normalizer, dfl_loss, iou_loss, tal_assign, total_loss, AssignmentResult,
    GtInstance, LossConfig, LossParts,
};
use crate::boxes::{decode_box, dfl_decode, Anchor, BBox};
use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::head::{check_logit_params, reparameterize, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE};
use crate::pipeline::cell_predictions;
use crate::synth::{cell_accuracy, SynthScene};
use crate::tensor::{dot, sigmoid, Matrix};

pub const DEFAULT_LR: f64 = 1e-2;
const MIN_LOGIT_SCALE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Scenes per gradient step; scenes are visited cyclically.
    pub batch: usize,
    pub train_logit_params: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: DEFAULT_LR,
            batch: 4,
            train_logit_params: true,
            loss: LossConfig::default(),
        }
    }
}

/// A scene reduced to what the classification objective needs.
#[derive(Debug, Clone)]
pub struct PreparedScene {
    pub anchors: Vec<Anchor>,
    /// `A × D` unit-normalized features (zero rows stay zero).
    pub features: Matrix<f64>,
    pub pred_boxes: Vec<BBox>,
    pub box_logits: Matrix<f32>,
    pub gts: Vec<GtInstance>,
    pub oracle: Vec<Option<usize>>,
}

impl PreparedScene {
    pub fn new(scene: &SynthScene) -> Result<Self> {
        let anchors = scene.anchors();
        let mut features = scene.anchor_features().cast::<f64>();
        for a in 0..features.rows() {
            let row = features.row_mut(a);
            let n = dot(row, row).sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let box_logits = scene.anchor_box_logits();
        let image = scene.blob.image_size as f32;
        let pred_boxes = anchors
            .iter()
            .enumerate()
            .map(|(a, anchor)| Ok(decode_box(anchor, dfl_decode(box_logits.row(a))?, image)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            anchors,
            features,
            pred_boxes,
            box_logits,
            gts: scene.gts.clone(),
            oracle: scene.oracle.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub adaptor: AdaptorGrads<f64>,
    pub logit_scale: f64,
    pub logit_bias: f64,
}

#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss_cls: f64,
    pub grads: ObjectiveGrads,
    /// `A × K` logits per scene.
    pub logits: Vec<Matrix<f64>>,
    pub assignments: Vec<AssignmentResult>,
}

/// Classification objective for a batch of scenes.
///
/// With `fixed_targets = None`, targets come from task-aligned assignment on
/// the current scores (treated as constants, as in detector training). Passing
/// targets freezes them, which is what a finite-difference check needs.
pub fn cls_objective(
    adaptor: &AdaptorParams<f64>,
    raw: &Matrix<f64>,
    logit_scale: f64,
    logit_bias: f64,
    scenes: &[&PreparedScene],
    fixed_targets: Option<&[Matrix<f64>]>,
    cfg: &LossConfig,
) -> Result<ObjectiveOutput> {
    let adapted = adaptor.forward(raw)?;
    let k = adapted.rows();
    let d = adapted.cols();
    let norms: Vec<f64> = adapted.iter_rows().map(|r| dot(r, r).sqrt()).collect();
    let mut unit = adapted.clone();
    for (i, &n) in norms.iter().enumerate() {
        let row = unit.row_mut(i);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        } else {
            row.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    let mut cosines = Vec::with_capacity(scenes.len());
    let mut logits = Vec::with_capacity(scenes.len());
    for s in scenes {
        if s.features.cols() != d {
            return Err(Error::Shape(format!(
                "scene features are {}-d, adaptor outputs {d}-d",
                s.features.cols()
            )));
        }
        let cos = s.features.matmul_transposed(&unit)?;
        let mut z = cos.clone();
        z.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v = logit_scale * *v + logit_bias);
        cosines.push(cos);
        logits.push(z);
    }

    let mut assignments = Vec::with_capacity(scenes.len());
    let targets: Vec<Matrix<f64>> = match fixed_targets {
        Some(t) => {
            if t.len() != scenes.len() {
                return Err(Error::Shape("one target matrix per scene required".into()));
            }
            t.to_vec()
        }
        None => {
            let mut out = Vec::with_capacity(scenes.len());
            for (s, z) in scenes.iter().zip(&logits) {
                let mut p = z.clone();
                p.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
                let a = tal_assign(&p, &s.pred_boxes, &s.anchors, &s.gts, cfg)?;
                out.push(a.target_scores());
                assignments.push(a);
            }
            out
        }
    };

    let mass: f64 = targets.iter().map(|t| t.as_slice().iter().sum::<f64>()).sum();
    let norm = cls_normalizer(mass);
    let mut loss = 0.0;
    let mut d_scale = 0.0;
    let mut d_bias = 0.0;
    let mut d_unit = Matrix::<f64>::zeros(k, d);
    for ((s, z), (cos, y)) in scenes.iter().zip(&logits).zip(cosines.iter().zip(&targets)) {
        for a in 0..z.rows() {
            let f = s.features.row(a);
            for c in 0..k {
                let zv = z.get(a, c);
                let yv = y.get(a, c);
                loss += bce_with_logits(zv, yv);
                let g = (sigmoid(zv) - yv) / norm;
                d_scale += g * cos.get(a, c);
                d_bias += g;
                let gc = g * logit_scale;
                for (o, &fv) in d_unit.row_mut(c).iter_mut().zip(f) {
                    *o += gc * fv;
                }
            }
        }
    }
    loss /= norm;

    // Back through row normalization: ∂ê/∂e = (I − êêᵀ)/‖e‖.
    let mut d_adapted = Matrix::<f64>::zeros(k, d);
    for c in 0..k {
        if norms[c] <= 0.0 {
            continue;
        }
        let u = unit.row(c);
        let g = d_unit.row(c);
        let proj = dot(g, u);
        for ((o, &gv), &uv) in d_adapted.row_mut(c).iter_mut().zip(g).zip(u) {
            *o = (gv - proj * uv) / norms[c];
        }
    }
    let (adaptor_grads, _) = adaptor.backward(raw, &d_adapted)?;
    Ok(ObjectiveOutput {
        loss_cls: loss,
        grads: ObjectiveGrads {
            adaptor: adaptor_grads,
            logit_scale: d_scale,
            logit_bias: d_bias,
        },
        logits,
        assignments,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss_cls: f64,
    pub loss_iou: f64,
    pub loss_dfl: f64,
    pub loss_total: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub adaptor: AdaptorParams<f32>,
    pub logit_scale: f32,
    pub logit_bias: f32,
    pub log: Vec<StepLog>,
}

/// Plain gradient descent on the classification term.
///
/// Deterministic: scenes are visited in order, `batch` per step, wrapping around.
pub fn train_adaptor(
    adaptor: &AdaptorParams<f32>,
    raw_embeddings: &EmbeddingMatrix,
    logit_scale: f32,
    logit_bias: f32,
    scenes: &[SynthScene],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.loss.validate()?;
    check_logit_params(logit_scale, logit_bias)?;
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be >= 0, got {}", cfg.lr)));
    }
    if cfg.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    if raw_embeddings.dims() != adaptor.dim() {
        return Err(Error::Shape(format!(
            "embeddings are {}-d, adaptor is {}-d",
            raw_embeddings.dims(),
            adaptor.dim()
        )));
    }
    if scenes.is_empty() && cfg.steps > 0 {
        return Err(Error::Config("no training scenes".into()));
    }
    let prepared = scenes.iter().map(PreparedScene::new).collect::<Result<Vec<_>>>()?;
    let raw = raw_embeddings.matrix().cast::<f64>();
    let mut params = adaptor.cast::<f64>();
    let mut scale = logit_scale as f64;
    let mut bias = logit_bias as f64;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut last_finite = None;

    for step in 0..cfg.steps {
        let batch: Vec<&PreparedScene> = (0..cfg.batch)
            .map(|j| &prepared[(step * cfg.batch + j) % prepared.len()])
            .collect();
        let out = cls_objective(&params, &raw, scale, bias, &batch, None, &cfg.loss)?;
        let entry = step_log(step, &out, &batch, &cfg.loss)?;
        if !entry.loss_total.is_finite() || !out.loss_cls.is_finite() {
            return Err(Error::Training {
                step,
                last_finite_step: last_finite,
            });
        }
        last_finite = Some(step);
        log.push(entry);

        params.sgd_step(&out.grads.adaptor, cfg.lr);
        if cfg.train_logit_params {
            scale = (scale - cfg.lr * out.grads.logit_scale).max(MIN_LOGIT_SCALE);
            bias -= cfg.lr * out.grads.logit_bias;
        }
        if params.flat().iter().any(|v| !v.is_finite()) || !scale.is_finite() || !bias.is_finite() {
            return Err(Error::Training {
                step,
                last_finite_step: last_finite,
            });
        }
    }

    Ok(TrainOutcome {
        adaptor: params.cast::<f32>(),
        logit_scale: scale as f32,
        logit_bias: bias as f32,
        log,
    })
}

fn step_log(
    step: usize,
    out: &ObjectiveOutput,
    batch: &[&PreparedScene],
    cfg: &LossConfig,
) -> Result<StepLog> {
    let (mut iou_num, mut dfl_num, mut mass) = (0.0, 0.0, 0.0);
    let (mut hit, mut total) = (0usize, 0usize);
    for ((s, a), z) in batch.iter().zip(&out.assignments).zip(&out.logits) {
        let m: f64 = a.target.iter().sum();
        if m > 0.0 {
            iou_num += m * iou_loss(&s.pred_boxes, a, &s.gts);
            dfl_num += m * dfl_loss(&s.box_logits, a, &s.gts, &s.anchors)?;
            mass += m;
        }
        for (row, truth) in s.oracle.iter().enumerate() {
            if let Some(c) = truth {
                let r = z.row(row);
                let best = (0..r.len()).fold(0, |b, i| if r[i] > r[b] { i } else { b });
                total += 1;
                hit += usize::from(best == *c);
            }
        }
    }
    let parts = LossParts {
        cls: out.loss_cls,
        iou: if mass > 0.0 { iou_num / mass } else { 0.0 },
        dfl: if mass > 0.0 { dfl_num / mass } else { 0.0 },
    };
    Ok(StepLog {
        step,
        loss_cls: parts.cls,
        loss_iou: parts.iou,
        loss_dfl: parts.dfl,
        loss_total: total_loss(&parts, cfg),
        acc: if total == 0 { 1.0 } else { hit as f64 / total as f64 },
    })
}

pub const TRAIN_LOG_HEADER: &str = "step,loss_cls,loss_iou,loss_dfl,loss_total,acc";

/// Appends rows to the CSV training log, writing the header for a new file.
pub fn append_train_log(path: impl AsRef<Path>, rows: &[StepLog]) -> Result<()> {
    let path = path.as_ref();
    let fresh = !path.exists() || std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut buf = String::new();
    if fresh {
        buf.push_str(TRAIN_LOG_HEADER);
        buf.push('\n');
    }
    for r in rows {
        buf.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.step, r.loss_cls, r.loss_iou, r.loss_dfl, r.loss_total, r.acc
        ));
    }
    f.write_all(buf.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Foreground-cell accuracy of the deployed (re-parameterized) head.
pub fn eval_cell_accuracy(
    adaptor: &AdaptorParams<f32>,
    raw_embeddings: &EmbeddingMatrix,
    logit_scale: f32,
    logit_bias: f32,
    scenes: &[SynthScene],
) -> Result<f64> {
    let pack = reparameterize(&adaptor.adapt(raw_embeddings)?, logit_scale, logit_bias)?;
    let preds = scenes
        .iter()
        .map(|s| cell_predictions(&pack, &s.blob).map(|mut p| p.swap_remove(0)))
        .collect::<Result<Vec<_>>>()?;
    cell_accuracy(&preds, scenes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub num_layers: usize,
    pub train_acc: f64,
    pub eval_acc: f64,
    pub final_loss: f64,
}

/// Trains one adaptor per layer count from the same seed and reports accuracy.
pub fn layer_sweep(
    layer_counts: &[usize],
    raw_embeddings: &EmbeddingMatrix,
    train_scenes: &[SynthScene],
    eval_scenes: &[SynthScene],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    layer_counts
        .iter()
        .map(|&n| {
            let init = AdaptorParams::init(&AdaptorConfig::new(n, raw_embeddings.dims(), seed)?)?;
            let out = train_adaptor(
                &init,
                raw_embeddings,
                DEFAULT_LOGIT_SCALE,
                DEFAULT_LOGIT_BIAS,
                train_scenes,
                cfg,
            )?;
            let acc = |s: &[SynthScene]| {
                eval_cell_accuracy(&out.adaptor, raw_embeddings, out.logit_scale, out.logit_bias, s)
            };
            Ok(SweepPoint {
                num_layers: n,
                train_acc: acc(train_scenes)?,
                eval_acc: acc(eval_scenes)?,
                final_loss: out.log.last().map_or(f64::NAN, |l| l.loss_cls),
            })
        })
        .collect()
}
