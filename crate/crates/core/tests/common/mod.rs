//! Independent oracles shared by the integration test targets.
#![allow(dead_code)]

use std::path::PathBuf;

use jointspace::adaptor::{AdaptorConfig, AdaptorParams, Linear};
use jointspace::assign::{AssignmentResult, GtInstance, LossConfig};
use jointspace::boxes::{Anchor, BBox, Detection, GridSpec};
use jointspace::head::FeatureMap;
use jointspace::synth::{gen_class_embeddings, gen_corpus, GeneratorMap, SynthSpec};
use jointspace::tensor::Matrix;
use jointspace::train::{cls_objective, PreparedScene};
use jointspace::{EmbeddingMatrix, VocabularyPack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// ReLU on/off pattern of every hidden unit, recomputed independently of the crate.
pub fn relu_pattern(p: &AdaptorParams<f64>, x: &Matrix<f64>) -> Vec<bool> {
    let mut pattern = Vec::new();
    let n = p.num_layers();
    for r in 0..x.rows() {
        let mut a = x.row(r).to_vec();
        for (i, l) in p.layers().iter().enumerate() {
            let mut z: Vec<f64> = (0..l.weight.rows())
                .map(|o| l.weight.row(o).iter().zip(&a).map(|(w, v)| w * v).sum::<f64>() + l.bias[o])
                .collect();
            if i + 1 < n {
                pattern.extend(z.iter().map(|&v| v > 0.0));
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            a = z;
        }
    }
    pattern
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss `Σ upstream ⊙ forward(x)` has gradient `upstream` at the output, so its
/// central difference is an independent check of `backward`.
pub fn adaptor_fd_check(seed: u64, layers: usize, dim: usize, rows: usize) -> FdCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = AdaptorParams::init(&AdaptorConfig::new(layers, dim, seed).unwrap())
        .unwrap()
        .cast::<f64>();
    // Non-zero biases so every parameter is exercised.
    let mut params = params;
    for p in params.flat_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let x = random_matrix(&mut rng, rows, dim);
    let up = random_matrix(&mut rng, rows, dim);
    let loss = |p: &AdaptorParams<f64>, x: &Matrix<f64>| {
        let y = p.forward(x).unwrap();
        y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let (grads, dx) = params.backward(&x, &up).unwrap();
    let analytic: Vec<f64> = grads
        .layers
        .iter()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
        .collect();
    let h = 1e-3;
    let base = relu_pattern(&params, &x);
    let mut check = FdCheck::default();
    for i in 0..params.flat().len() {
        let mut plus = params.clone();
        *plus.flat_mut()[i] += h;
        let mut minus = params.clone();
        *minus.flat_mut()[i] -= h;
        let smooth = relu_pattern(&plus, &x) == base && relu_pattern(&minus, &x) == base;
        let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * h);
        check.record(smooth, fd, analytic[i]);
    }
    for i in 0..x.as_slice().len() {
        let mut plus = x.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = x.clone();
        minus.as_mut_slice()[i] -= h;
        let smooth = relu_pattern(&params, &plus) == base && relu_pattern(&params, &minus) == base;
        let fd = (loss(&params, &plus) - loss(&params, &minus)) / (2.0 * h);
        check.record(smooth, fd, dx.as_slice()[i]);
    }
    check
}

/// Central differences are only meaningful where the step does not cross a
/// ReLU kink; such entries are counted and skipped.
#[derive(Debug, Default)]
pub struct FdCheck {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FdCheck {
    pub fn record(&mut self, smooth: bool, fd: f64, analytic: f64) {
        if smooth {
            self.checked += 1;
            self.worst = self.worst.max(rel_err(fd, analytic));
        } else {
            self.skipped += 1;
        }
    }

    pub fn assert_ok(&self, tol: f64, what: &str) {
        assert!(self.worst < tol, "{what}: worst relative error {} ({self:?})", self.worst);
        assert!(
            self.skipped * 3 <= self.checked,
            "{what}: too many kink-crossing entries ({self:?})"
        );
    }
}

/// End-to-end: loss → cosine logits → row normalization → adaptor parameters,
/// with assignment targets frozen at the unperturbed point.
///
/// Returns `None` for degenerate instances where an adapted embedding is
/// (nearly) zero, since cosine scoring is discontinuous there.
pub fn objective_fd_check(seed: u64, k: usize, d: usize, layers: usize) -> Option<FdCheck> {
    let mut spec = SynthSpec::small(k, d, GeneratorMap::Nonlinear, 0.1, seed);
    // 48 px at strides 8 and 16: 36 + 9 = 45 anchors.
    spec.grid = GridSpec::for_image(48, &[8, 16]).unwrap();
    spec.object_size = (12, 24);
    let e = gen_class_embeddings(&spec).unwrap();
    let scenes = gen_corpus(&spec, &e, 0..2).unwrap();
    let prepared: Vec<PreparedScene> = scenes.iter().map(|s| PreparedScene::new(s).unwrap()).collect();
    let batch: Vec<&PreparedScene> = prepared.iter().collect();
    let raw = e.matrix().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut params = AdaptorParams::init(&AdaptorConfig::new(layers, d, seed).unwrap())
        .unwrap()
        .cast::<f64>();
    for p in params.flat_mut() {
        *p += rng.random_range(-0.1..0.1);
    }
    let adapted = params.forward(&raw).unwrap();
    if adapted.iter_rows().any(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-3) {
        return None;
    }
    let (scale, bias) = (rng.random_range(1.0..15.0), rng.random_range(-5.0..0.0));
    let cfg = LossConfig::default();
    let base = cls_objective(&params, &raw, scale, bias, &batch, None, &cfg).unwrap();
    let targets: Vec<Matrix<f64>> = base.assignments.iter().map(|a| a.target_scores()).collect();
    let f = |p: &AdaptorParams<f64>, s: f64, b: f64| {
        cls_objective(p, &raw, s, b, &batch, Some(&targets), &cfg)
            .unwrap()
            .loss_cls
    };
    let analytic: Vec<f64> = base
        .grads
        .adaptor
        .layers
        .iter()
        .flat_map(|l| l.weight.as_slice().iter().chain(&l.bias).copied().collect::<Vec<_>>())
        .collect();
    let h = 1e-5;
    let pattern = relu_pattern(&params, &raw);
    let mut check = FdCheck::default();
    for i in 0..params.flat().len() {
        let mut plus = params.clone();
        *plus.flat_mut()[i] += h;
        let mut minus = params.clone();
        *minus.flat_mut()[i] -= h;
        let smooth = relu_pattern(&plus, &raw) == pattern && relu_pattern(&minus, &raw) == pattern;
        let fd = (f(&plus, scale, bias) - f(&minus, scale, bias)) / (2.0 * h);
        check.record(smooth, fd, analytic[i]);
    }
    let fd_s = (f(&params, scale + h, bias) - f(&params, scale - h, bias)) / (2.0 * h);
    let fd_b = (f(&params, scale, bias + h) - f(&params, scale, bias - h)) / (2.0 * h);
    check.record(true, fd_s, base.grads.logit_scale);
    check.record(true, fd_b, base.grads.logit_bias);
    Some(check)
}

// Brute-force references for assignment, suppression and scoring.

/// Plain IoU written out from the definition.
pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1, ax2, ay2) = (a.x1 as f64, a.y1 as f64, a.x2 as f64, a.y2 as f64);
    let (bx1, by1, bx2, by2) = (b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64);
    let w = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let h = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = w * h;
    let union = (ax2 - ax1).max(0.0) * (ay2 - ay1).max(0.0) + (bx2 - bx1).max(0.0) * (by2 - by1).max(0.0) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Reference assignment: per gt, an anchor is selected when fewer than `topk`
/// candidates outrank it (metric desc, index asc); each anchor then goes to the
/// selecting gt with the largest metric, lowest gt index on ties.
pub fn ref_tal(
    scores: &Matrix<f64>,
    pred: &[BBox],
    anchors: &[Anchor],
    gts: &[GtInstance],
    alpha: f64,
    beta: f64,
    topk: usize,
) -> (Vec<Option<usize>>, Vec<f64>) {
    let n = anchors.len();
    let inside = |g: &GtInstance, a: &Anchor| {
        a.cx > g.bbox.x1 && a.cx < g.bbox.x2 && a.cy > g.bbox.y1 && a.cy < g.bbox.y2
    };
    let t = |g: &GtInstance, a: usize| {
        scores.get(a, g.class_index).max(0.0).powf(alpha) * ref_iou(&pred[a], &g.bbox).powf(beta)
    };
    let mut selected = vec![vec![false; n]; gts.len()];
    for (gi, g) in gts.iter().enumerate() {
        for a in 0..n {
            if !inside(g, &anchors[a]) {
                continue;
            }
            let ta = t(g, a);
            let outranking = (0..n)
                .filter(|&b| inside(g, &anchors[b]))
                .filter(|&b| {
                    let tb = t(g, b);
                    tb > ta || (tb == ta && b < a)
                })
                .count();
            selected[gi][a] = outranking < topk;
        }
    }
    let mut matched = vec![None; n];
    for a in 0..n {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if selected[gi][a] {
                let ta = t(g, a);
                if best.is_none_or(|(_, bt)| ta > bt) {
                    best = Some((gi, ta));
                }
            }
        }
        matched[a] = best.map(|(g, _)| g);
    }
    let mut target = vec![0.0; n];
    for (gi, g) in gts.iter().enumerate() {
        let mine: Vec<usize> = (0..n).filter(|&a| matched[a] == Some(gi)).collect();
        let max_t = mine.iter().map(|&a| t(g, a)).fold(0.0, f64::max);
        let max_u = mine.iter().map(|&a| ref_iou(&pred[a], &g.bbox)).fold(0.0, f64::max);
        for &a in &mine {
            target[a] = t(g, a) * max_u / (max_t + 1e-9);
        }
    }
    (matched, target)
}

pub fn assignment_matches(got: &AssignmentResult, matched: &[Option<usize>], target: &[f64]) -> bool {
    got.matched == matched
        && got
            .target
            .iter()
            .zip(target)
            .all(|(a, b)| (a - b).abs() <= 1e-12 * a.abs().max(1.0))
}

/// Reference NMS as a fixed point: a detection survives iff it clears the
/// score threshold and no surviving detection that outranks it overlaps it.
/// Iterating the rule from "everything survives" converges because the
/// outranking relation is acyclic.
pub fn ref_nms(dets: &[Detection], iou_thresh: f64, score_thresh: f32, per_class: bool, max_det: usize) -> Vec<Detection> {
    let n = dets.len();
    let outranks = |j: usize, i: usize| {
        let (a, b) = (&dets[j], &dets[i]);
        a.score > b.score
            || (a.score == b.score && (a.class_index < b.class_index || (a.class_index == b.class_index && j < i)))
    };
    let mut alive: Vec<bool> = dets.iter().map(|d| d.score >= score_thresh).collect();
    loop {
        let next: Vec<bool> = (0..n)
            .map(|i| {
                dets[i].score >= score_thresh
                    && !(0..n).any(|j| {
                        j != i
                            && alive[j]
                            && outranks(j, i)
                            && (!per_class || dets[j].class_index == dets[i].class_index)
                            && ref_iou(&dets[j].bbox, &dets[i].bbox) > iou_thresh
                    })
            })
            .collect();
        if next == alive {
            break;
        }
        alive = next;
    }
    let mut keep: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
    // Rank = number of survivors that outrank it.
    let survivors = keep.clone();
    keep.sort_by_key(|&i| survivors.iter().filter(|&&j| outranks(j, i)).count());
    keep.truncate(max_det);
    keep.into_iter().map(|i| dets[i]).collect()
}

/// Direct `α·cos + β` for every (batch, class, cell), in f64.
pub fn naive_cosine(emb: &Matrix<f32>, fm: &FeatureMap, alpha: f64, beta: f64) -> Vec<f64> {
    let [b, c, h, w] = fm.shape();
    let hw = h * w;
    let k = emb.rows();
    let mut out = vec![0.0; b * k * hw];
    for bi in 0..b {
        for cell in 0..hw {
            let f: Vec<f64> = (0..c).map(|ch| fm.as_slice()[(bi * c + ch) * hw + cell] as f64).collect();
            let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            for ki in 0..k {
                let e: Vec<f64> = emb.row(ki).iter().map(|&v| v as f64).collect();
                let enorm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
                let cos = if fnorm > 0.0 && enorm > 0.0 {
                    f.iter().zip(&e).map(|(x, y)| x * y).sum::<f64>() / (fnorm * enorm)
                } else {
                    0.0
                };
                out[(bi * k + ki) * hw + cell] = alpha * cos + beta;
            }
        }
    }
    out
}

pub fn random_feature_map(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> FeatureMap {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    FeatureMap::new(0, 8, shape, data).unwrap()
}

pub fn random_embeddings(rng: &mut ChaCha8Rng, k: usize, d: usize) -> jointspace::EmbeddingMatrix {
    loop {
        let data: Vec<f32> = (0..k * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let m = Matrix::from_vec(k, d, data).unwrap();
        if m.iter_rows().all(|r| r.iter().any(|&v| v != 0.0)) {
            return jointspace::EmbeddingMatrix::new(m, None).unwrap();
        }
    }
}

/// Random small TAL instance: up to 12 anchors on a 2-level grid, up to 2 gts.
pub fn random_tal_instance(
    rng: &mut ChaCha8Rng,
) -> (Matrix<f64>, Vec<BBox>, Vec<Anchor>, Vec<GtInstance>) {
    let k = rng.random_range(1..=3);
    let n = rng.random_range(1..=12);
    let anchors: Vec<Anchor> = (0..n)
        .map(|_| {
            let stride = [8.0, 16.0][rng.random_range(0..2)];
            Anchor {
                cx: rng.random_range(0..8) as f32 * 4.0 + 2.0,
                cy: rng.random_range(0..8) as f32 * 4.0 + 2.0,
                stride,
            }
        })
        .collect();
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x1 = rng.random_range(0.0f32..24.0);
        let y1 = rng.random_range(0.0f32..24.0);
        BBox::new(x1, y1, x1 + rng.random_range(1.0f32..16.0), y1 + rng.random_range(1.0f32..16.0))
    };
    let pred: Vec<BBox> = (0..n).map(|_| rand_box(rng)).collect();
    let g = rng.random_range(0..=2);
    let gts: Vec<GtInstance> = (0..g)
        .map(|_| GtInstance {
            bbox: rand_box(rng),
            class_index: rng.random_range(0..k),
        })
        .collect();
    // Coarse score grid so that metric ties actually occur.
    let data = (0..n * k).map(|_| rng.random_range(0..5) as f64 / 4.0).collect();
    (Matrix::from_vec(n, k, data).unwrap(), pred, anchors, gts)
}

pub fn random_detections(rng: &mut ChaCha8Rng) -> Vec<Detection> {
    let n = rng.random_range(0..=20);
    (0..n)
        .map(|_| {
            let x1 = rng.random_range(0..20) as f32;
            let y1 = rng.random_range(0..20) as f32;
            Detection {
                bbox: BBox::new(x1, y1, x1 + rng.random_range(1..12) as f32, y1 + rng.random_range(1..12) as f32),
                // Quantized scores make ties common.
                score: rng.random_range(0..8) as f32 / 8.0,
                class_index: rng.random_range(0..3),
            }
        })
        .collect()
}

/// Foreground cells of a linear synthetic corpus packed into one feature map,
/// with the identity-adaptor pack of the generating embeddings. Every cell is
/// its own class prototype plus small noise, so the top-2 float margin is wide.
pub fn margin_corpus(seed: u64, k: usize, d: usize, scenes: usize) -> (jointspace::VocabularyPack, FeatureMap) {
    let spec = SynthSpec::small(k, d, GeneratorMap::Linear, 0.05, seed);
    let e = gen_class_embeddings(&spec).unwrap();
    let pack = jointspace::vocab::build_vocab(
        &e,
        &AdaptorParams::identity(d),
        jointspace::head::DEFAULT_LOGIT_SCALE,
        jointspace::head::DEFAULT_LOGIT_BIAS,
    )
    .unwrap();
    let mut cells: Vec<Vec<f32>> = Vec::new();
    for s in gen_corpus(&spec, &e, 0..scenes).unwrap() {
        let feats = s.anchor_features();
        for (a, truth) in s.oracle.iter().enumerate() {
            if truth.is_some() {
                cells.push(feats.row(a).to_vec());
            }
        }
    }
    let mut fm = FeatureMap::zeros(0, 8, [1, d, 1, cells.len()]).unwrap();
    for (i, c) in cells.iter().enumerate() {
        fm.set_cell(0, i, c);
    }
    (pack, fm)
}

/// Per-cell argmax of `scores` laid out as (class, cell); lowest index wins ties.
pub fn argmax_cells(scores: &[f64], k: usize, cells: usize) -> Vec<usize> {
    (0..cells)
        .map(|cell| {
            let mut best = 0;
            for c in 1..k {
                if scores[c * cells + cell] > scores[best * cells + cell] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Scores of a dequantized kernel, `w·x/|x| + β` in f64, laid out as (class, cell).
pub fn naive_dequant_scores(values: &[i16], scales: &[f32], d: usize, fm: &FeatureMap, beta: f64) -> Vec<f64> {
    let cells = fm.cells();
    let k = scales.len();
    let mut out = vec![0.0; k * cells];
    for cell in 0..cells {
        let x: Vec<f64> = fm.cell(0, cell).iter().map(|&v| v as f64).collect();
        let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..k {
            let dot: f64 = (0..d).map(|i| values[c * d + i] as f64 * scales[c] as f64 * x[i]).sum();
            out[c * cells + cell] = if n > 0.0 { dot / n } else { 0.0 } + beta;
        }
    }
    out
}

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn golden_embeddings() -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(&[vec![1.0, -2.5, 0.25], vec![3.0, 0.0, -0.125]])
        .unwrap()
        .with_labels(vec!["cat".into(), "dog".into()])
        .unwrap()
}

pub fn golden_adaptor() -> AdaptorParams {
    let layer = |w: [f32; 4], b: [f32; 2]| Linear {
        weight: Matrix::from_vec(2, 2, w.to_vec()).unwrap(),
        bias: b.to_vec(),
    };
    AdaptorParams::from_layers(
        2,
        vec![layer([1.0, 0.0, 0.0, -1.0], [0.5, 0.0]), layer([0.25, 0.5, -1.0, 2.0], [0.0, 1.0])],
    )
    .unwrap()
}

pub fn golden_pack() -> VocabularyPack {
    VocabularyPack::new(
        vec!["cat".into(), "dog".into()],
        Matrix::from_vec(2, 2, vec![1.2, 1.6, 0.0, -2.0]).unwrap(),
        2.0,
        -0.5,
        true,
    )
    .unwrap()
}
