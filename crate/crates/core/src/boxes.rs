//! Anchor-free box decoding and non-maximum suppression.
//!
//! Every cell of every pyramid level is an anchor point. Box sides are
//! predicted as distributions over `REG_MAX` integer bins (in stride units);
//! the decoded distance is the distribution's expectation.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REG_MAX: usize = 16;
pub const DEFAULT_STRIDES: [u32; 3] = [8, 16, 32];
pub const DEFAULT_SCORE_THRESH: f32 = 0.25;
pub const DEFAULT_IOU_THRESH: f32 = 0.7;
pub const EVAL_SCORE_THRESH: f32 = 0.001;
pub const DEFAULT_MAX_DET: usize = 300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSpec {
    pub stride: u32,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    pub levels: Vec<LevelSpec>,
    pub image_size: u32,
}

impl GridSpec {
    pub fn new(levels: Vec<LevelSpec>, image_size: u32) -> Result<Self> {
        let g = Self { levels, image_size };
        g.validate()?;
        Ok(g)
    }

    /// One level per stride, each `⌈size / stride⌉` cells on a side.
    pub fn for_image(image_size: u32, strides: &[u32]) -> Result<Self> {
        let levels = strides
            .iter()
            .map(|&s| {
                let n = image_size.div_ceil(s) as usize;
                LevelSpec {
                    stride: s,
                    height: n,
                    width: n,
                }
            })
            .collect();
        Self::new(levels, image_size)
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.levels.windows(2) {
            if w[1].stride <= w[0].stride {
                return Err(Error::Config("grid strides must be strictly increasing".into()));
            }
        }
        for l in &self.levels {
            if l.stride == 0 {
                return Err(Error::Config("stride must be positive".into()));
            }
            let max = self.image_size.div_ceil(l.stride) as usize;
            if l.height > max || l.width > max {
                return Err(Error::Config(format!(
                    "level stride {} of {}x{} cells exceeds image size {}",
                    l.stride, l.height, l.width, self.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn num_anchors(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub cx: f32,
    pub cy: f32,
    pub stride: f32,
}

/// Cell centers `((j+½)·s, (i+½)·s)`, level-major, row-major within a level.
pub fn make_anchor_centers(grid: &GridSpec) -> Vec<Anchor> {
    let mut out = Vec::with_capacity(grid.num_anchors());
    for l in &grid.levels {
        let s = l.stride as f32;
        for i in 0..l.height {
            for j in 0..l.width {
                out.push(Anchor {
                    cx: (j as f32 + 0.5) * s,
                    cy: (i as f32 + 0.5) * s,
                    stride: s,
                });
            }
        }
    }
    out
}

/// Axis-aligned box in pixel `xyxy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

impl BBox {
    pub const fn new(x1: f32, y1: f32, x2: f32, y2: f32) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f32 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        (self.x2 as f64 - self.x1 as f64).max(0.0) * (self.y2 as f64 - self.y1 as f64).max(0.0)
    }

    /// Strict interior test used for assignment candidates.
    pub fn contains_strictly(&self, x: f32, y: f32) -> bool {
        x > self.x1 && x < self.x2 && y > self.y1 && y < self.y2
    }

    pub fn clip(&self, size: f32) -> Self {
        let c = |v: f32| v.clamp(0.0, size);
        Self::new(c(self.x1), c(self.y1), c(self.x2), c(self.y2))
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) as f64 - a.x1.max(b.x1) as f64).max(0.0);
    let ih = (a.y2.min(b.y2) as f64 - a.y1.max(b.y1) as f64).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Expected bin index per side from `4·REG_MAX` logits (side-major).
pub fn dfl_decode(logits: &[f32]) -> Result<[f32; 4]> {
    if logits.len() != 4 * REG_MAX {
        return Err(Error::Shape(format!(
            "expected {} DFL logits, got {}",
            4 * REG_MAX,
            logits.len()
        )));
    }
    crate::codec::check_finite(logits, "DFL logits")?;
    let mut out = [0.0f32; 4];
    for (side, o) in out.iter_mut().enumerate() {
        let l = &logits[side * REG_MAX..(side + 1) * REG_MAX];
        let m = l.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
        let mut z = 0.0f64;
        let mut acc = 0.0f64;
        for (bin, &v) in l.iter().enumerate() {
            let p = (v as f64 - m).exp();
            z += p;
            acc += bin as f64 * p;
        }
        *o = (acc / z) as f32;
    }
    Ok(out)
}

/// `x1 = cx − l·s, y1 = cy − t·s, x2 = cx + r·s, y2 = cy + b·s`, clipped to the image.
pub fn decode_box(anchor: &Anchor, ltrb: [f32; 4], image_size: f32) -> BBox {
    let s = anchor.stride;
    BBox::new(
        anchor.cx - ltrb[0] * s,
        anchor.cy - ltrb[1] * s,
        anchor.cx + ltrb[2] * s,
        anchor.cy + ltrb[3] * s,
    )
    .clip(image_size)
}

pub fn decode_boxes(anchors: &[Anchor], ltrb: &[[f32; 4]], image_size: f32) -> Result<Vec<BBox>> {
    if anchors.len() != ltrb.len() {
        return Err(Error::Shape(format!(
            "{} anchors but {} distance sets",
            anchors.len(),
            ltrb.len()
        )));
    }
    Ok(anchors
        .iter()
        .zip(ltrb)
        .map(|(a, &d)| decode_box(a, d, image_size))
        .collect())
}

/// Inverse of [`decode_box`] for unclipped boxes: distances in stride units.
pub fn encode_ltrb(anchor: &Anchor, b: &BBox) -> [f32; 4] {
    let s = anchor.stride;
    [
        (anchor.cx - b.x1) / s,
        (anchor.cy - b.y1) / s,
        (b.x2 - anchor.cx) / s,
        (b.y2 - anchor.cy) / s,
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f32,
    pub class_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub iou_thresh: f32,
    pub score_thresh: f32,
    pub per_class: bool,
    pub max_det: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_thresh: DEFAULT_IOU_THRESH,
            score_thresh: DEFAULT_SCORE_THRESH,
            per_class: true,
            max_det: DEFAULT_MAX_DET,
        }
    }
}

/// Priority order: higher score, then lower class index, then lower position.
pub fn priority(a: (usize, &Detection), b: (usize, &Detection)) -> Ordering {
    b.1.score
        .total_cmp(&a.1.score)
        .then(a.1.class_index.cmp(&b.1.class_index))
        .then(a.0.cmp(&b.0))
}

/// Greedy suppression: a detection is dropped when a kept, higher-priority
/// detection (of the same class if `per_class`) overlaps it with IoU > threshold.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].score >= cfg.score_thresh)
        .collect();
    order.sort_by(|&a, &b| priority((a, &dets[a]), (b, &dets[b])));

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        if kept.len() >= cfg.max_det {
            break;
        }
        let d = &dets[i];
        let suppressed = kept.iter().any(|&j| {
            let k = &dets[j];
            (!cfg.per_class || k.class_index == d.class_index)
                && iou(&k.bbox, &d.bbox) > cfg.iou_thresh as f64
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.into_iter().map(|i| dets[i]).collect()
}
