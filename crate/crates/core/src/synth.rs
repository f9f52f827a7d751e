//! Deterministic synthetic scenes with a known text→region mapping.
//!
//! Class embeddings are random unit vectors with pairwise |cos| ≤ 0.5. A cell
//! whose center lies inside a ground-truth box gets the feature
//! `g(e_class) + N(0, σ²)`, where `g` is the identity (linear corpus) or a fixed
//! random rotation followed by ReLU and re-normalization (nonlinear corpus).
//! Background cells are random unit vectors with cosine < 0.3 to every class
//! prototype. Box-distribution logits encode the exact ground-truth box for
//! foreground cells, standing in for a frozen class-agnostic box head.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::assign::GtInstance;
use crate::boxes::{encode_ltrb, iou, make_anchor_centers, Anchor, BBox, Detection, GridSpec, REG_MAX};
use crate::codec;
use crate::embedding_io::{read_embeddings, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::featblob::{read_blob, write_blob, FeatureBlob};
use crate::head::FeatureMap;
use crate::tensor::{dot, norm, Matrix};

pub const MAX_CLASS_DRAWS: usize = 100_000;
pub const MAX_PAIR_COS: f64 = 0.5;
pub const BACKGROUND_COS_CAP: f64 = 0.3;
const BACKGROUND_DRAWS: usize = 1_000;
const PLACEMENT_TRIES: usize = 200;
const FLOOR_LOGIT: f32 = -40.0;

const STREAM_CLASSES: u64 = 1;
const STREAM_ROTATION: u64 = 2;
const STREAM_SCENES: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorMap {
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub map: GeneratorMap,
    pub noise: f64,
    pub grid: GridSpec,
    /// Inclusive range of objects per scene.
    pub objects: (usize, usize),
    /// Inclusive range of object side lengths in pixels.
    pub object_size: (u32, u32),
    pub seed: u64,
}

impl SynthSpec {
    /// A small three-level scene layout suited to desk-scale experiments.
    pub fn small(num_classes: usize, dim: usize, map: GeneratorMap, noise: f64, seed: u64) -> Self {
        Self {
            num_classes,
            dim,
            map,
            noise,
            grid: GridSpec::for_image(64, &crate::boxes::DEFAULT_STRIDES).expect("valid grid"),
            objects: (1, 3),
            object_size: (16, 32),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic corpus needs at least 2 classes".into()));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be >= 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        self.grid.validate()?;
        let finest = self
            .grid
            .levels
            .first()
            .ok_or_else(|| Error::Config("grid has no levels".into()))?
            .stride;
        let (lo, hi) = self.object_size;
        if lo > hi || self.objects.0 > self.objects.1 {
            return Err(Error::Config("empty object count or size range".into()));
        }
        if lo <= finest {
            return Err(Error::Config(format!(
                "objects must be larger than the finest stride {finest}"
            )));
        }
        let reach = (REG_MAX as u32 - 1) * finest;
        if hi > reach || hi > self.grid.image_size {
            return Err(Error::Config(format!(
                "object size {hi} exceeds image size or box reach {reach}"
            )));
        }
        Ok(())
    }
}

/// One generated image: per-level features and box logits, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub index: usize,
    pub blob: FeatureBlob,
    pub gts: Vec<GtInstance>,
    /// Generating class of every anchor (level-major); `None` for background.
    pub oracle: Vec<Option<usize>>,
}

impl SynthScene {
    pub fn anchors(&self) -> Vec<Anchor> {
        make_anchor_centers(&self.blob.grid().expect("validated grid"))
    }

    /// `A × D` features in anchor order.
    pub fn anchor_features(&self) -> Matrix<f32> {
        flatten_levels(&self.blob.features)
    }

    /// `A × 4·REG_MAX` box logits in anchor order.
    pub fn anchor_box_logits(&self) -> Matrix<f32> {
        flatten_levels(&self.blob.box_logits)
    }
}

fn flatten_levels(levels: &[FeatureMap]) -> Matrix<f32> {
    let c = levels.first().map_or(0, FeatureMap::channels);
    let rows: usize = levels.iter().map(FeatureMap::cells).sum();
    let mut out = Matrix::zeros(rows, c);
    let mut r = 0;
    for l in levels {
        for cell in 0..l.cells() {
            out.row_mut(r).copy_from_slice(&l.cell(0, cell));
            r += 1;
        }
    }
    out
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Seeded random orthogonal matrix (Gram–Schmidt on a Gaussian matrix).
pub fn generator_rotation(spec: &SynthSpec) -> Matrix<f64> {
    let d = spec.dim;
    let mut rng = rng_for(spec.seed, STREAM_ROTATION);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(d);
    while rows.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for r in &rows {
                let p = dot(&v, r);
                for (x, &y) in v.iter_mut().zip(r) {
                    *x -= p * y;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Matrix::from_rows(&rows).expect("square")
}

/// The generator map `g`, or `None` when the nonlinear image is the zero vector.
pub fn apply_generator(map: GeneratorMap, rotation: &Matrix<f64>, e: &[f64]) -> Option<Vec<f64>> {
    match map {
        GeneratorMap::Linear => Some(e.to_vec()),
        GeneratorMap::Nonlinear => {
            let v: Vec<f64> = (0..rotation.rows())
                .map(|i| dot(rotation.row(i), e).max(0.0))
                .collect();
            let n = norm(&v);
            (n > 1e-6).then(|| v.into_iter().map(|x| x / n).collect())
        }
    }
}

/// K unit vectors with pairwise |cos| ≤ 0.5, by rejection sampling.
pub fn gen_class_embeddings(spec: &SynthSpec) -> Result<EmbeddingMatrix> {
    spec.validate()?;
    let rotation = generator_rotation(spec);
    let mut rng = rng_for(spec.seed, STREAM_CLASSES);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
    let mut draws = 0;
    while rows.len() < spec.num_classes {
        if draws >= MAX_CLASS_DRAWS {
            return Err(Error::Capacity(format!(
                "placed only {} of {} classes in {} dims after {MAX_CLASS_DRAWS} draws",
                rows.len(),
                spec.num_classes,
                spec.dim
            )));
        }
        draws += 1;
        let v = gaussian_unit(&mut rng, spec.dim);
        if rows.iter().any(|r| dot(r, &v).abs() > MAX_PAIR_COS) {
            continue;
        }
        if apply_generator(spec.map, &rotation, &v).is_none() {
            continue;
        }
        rows.push(v);
    }
    let data: Vec<Vec<f32>> = rows
        .iter()
        .map(|r| r.iter().map(|&x| x as f32).collect())
        .collect();
    EmbeddingMatrix::new(Matrix::from_rows(&data)?, None)?
        .with_labels((0..spec.num_classes).map(|i| format!("class_{i}")).collect())
}

/// Region-space prototypes `g(e_k)` of every class.
pub fn class_prototypes(spec: &SynthSpec, embeddings: &EmbeddingMatrix) -> Result<Vec<Vec<f64>>> {
    check_embeddings(spec, embeddings)?;
    let rotation = generator_rotation(spec);
    (0..embeddings.rows())
        .map(|k| {
            let e: Vec<f64> = embeddings.row(k).iter().map(|&v| v as f64).collect();
            apply_generator(spec.map, &rotation, &e).ok_or(Error::DegenerateRow { row: k })
        })
        .collect()
}

fn check_embeddings(spec: &SynthSpec, embeddings: &EmbeddingMatrix) -> Result<()> {
    if embeddings.rows() != spec.num_classes || embeddings.dims() != spec.dim {
        return Err(Error::Shape(format!(
            "embeddings are {}x{}, spec wants {}x{}",
            embeddings.rows(),
            embeddings.dims(),
            spec.num_classes,
            spec.dim
        )));
    }
    Ok(())
}

/// Box logits whose softmax expectation per side equals `ltrb`.
fn encode_box_logits(ltrb: [f32; 4]) -> Vec<f32> {
    let mut out = vec![FLOOR_LOGIT; 4 * REG_MAX];
    for (side, &d) in ltrb.iter().enumerate() {
        let d = (d as f64).clamp(0.0, (REG_MAX - 1) as f64);
        let lo = (d.floor() as usize).min(REG_MAX - 2);
        let w_hi = d - lo as f64;
        let w_lo = 1.0 - w_hi;
        for (bin, w) in [(lo, w_lo), (lo + 1, w_hi)] {
            if w > 0.0 {
                out[side * REG_MAX + bin] = (w.ln() as f32).max(FLOOR_LOGIT);
            }
        }
    }
    out
}

/// Generates scene `index` of the corpus. Pure in `(spec, embeddings, index)`.
pub fn gen_scene(spec: &SynthSpec, embeddings: &EmbeddingMatrix, index: usize) -> Result<SynthScene> {
    spec.validate()?;
    let prototypes = class_prototypes(spec, embeddings)?;
    let mut rng = rng_for(spec.seed, STREAM_SCENES + index as u64);
    let anchors = make_anchor_centers(&spec.grid);
    let size = spec.grid.image_size;

    let n_obj = rng.random_range(spec.objects.0..=spec.objects.1);
    let mut gts: Vec<GtInstance> = Vec::with_capacity(n_obj);
    for _ in 0..n_obj {
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.random_range(spec.object_size.0..=spec.object_size.1);
            let h = rng.random_range(spec.object_size.0..=spec.object_size.1);
            let x = rng.random_range(0..=size - w);
            let y = rng.random_range(0..=size - h);
            let b = BBox::new(x as f32, y as f32, (x + w) as f32, (y + h) as f32);
            let disjoint = gts.iter().all(|g| {
                b.x2 <= g.bbox.x1 || g.bbox.x2 <= b.x1 || b.y2 <= g.bbox.y1 || g.bbox.y2 <= b.y1
            });
            if disjoint && anchors.iter().any(|a| b.contains_strictly(a.cx, a.cy)) {
                let class_index = rng.random_range(0..spec.num_classes);
                gts.push(GtInstance { bbox: b, class_index });
                break;
            }
        }
    }

    let d = spec.dim;
    let mut features = Vec::with_capacity(spec.grid.levels.len());
    let mut box_logits = Vec::with_capacity(spec.grid.levels.len());
    let mut oracle = Vec::with_capacity(anchors.len());
    let mut a_idx = 0;
    for (level, l) in spec.grid.levels.iter().enumerate() {
        let mut fm = FeatureMap::zeros(level, l.stride, [1, d, l.height, l.width])?;
        let mut bm = FeatureMap::zeros(level, l.stride, [1, 4 * REG_MAX, l.height, l.width])?;
        for cell in 0..l.height * l.width {
            let anchor = &anchors[a_idx];
            a_idx += 1;
            let owner = gts
                .iter()
                .find(|g| g.bbox.contains_strictly(anchor.cx, anchor.cy));
            match owner {
                Some(g) => {
                    let p = &prototypes[g.class_index];
                    let f: Vec<f32> = p
                        .iter()
                        .map(|&v| {
                            let n: f64 = rng.sample(StandardNormal);
                            (v + spec.noise * n) as f32
                        })
                        .collect();
                    fm.set_cell(0, cell, &f);
                    bm.set_cell(0, cell, &encode_box_logits(encode_ltrb(anchor, &g.bbox)));
                    oracle.push(Some(g.class_index));
                }
                None => {
                    fm.set_cell(0, cell, &background_feature(&mut rng, &prototypes, d));
                    let logits: Vec<f32> = (0..4 * REG_MAX)
                        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                        .collect();
                    bm.set_cell(0, cell, &logits);
                    oracle.push(None);
                }
            }
        }
        features.push(fm);
        box_logits.push(bm);
    }
    Ok(SynthScene {
        index,
        blob: FeatureBlob::new(size, features, box_logits)?,
        gts,
        oracle,
    })
}

/// Random unit vector with cosine below the cap to every prototype; the zero
/// vector (cosine 0 by convention) when none is found.
fn background_feature(rng: &mut ChaCha8Rng, prototypes: &[Vec<f64>], dim: usize) -> Vec<f32> {
    for _ in 0..BACKGROUND_DRAWS {
        let v = gaussian_unit(rng, dim);
        if prototypes.iter().all(|p| dot(p, &v) < BACKGROUND_COS_CAP) {
            return v.into_iter().map(|x| x as f32).collect();
        }
    }
    vec![0.0; dim]
}

pub fn gen_corpus(spec: &SynthSpec, embeddings: &EmbeddingMatrix, range: std::ops::Range<usize>) -> Result<Vec<SynthScene>> {
    range.map(|i| gen_scene(spec, embeddings, i)).collect()
}

/// Recomputes the per-anchor generating class from ground truth, as `gen_scene` assigns it.
pub fn oracle_from_gts(grid: &GridSpec, gts: &[GtInstance]) -> Vec<Option<usize>> {
    make_anchor_centers(grid)
        .iter()
        .map(|a| {
            gts.iter()
                .find(|g| g.bbox.contains_strictly(a.cx, a.cy))
                .map(|g| g.class_index)
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub true_positives: usize,
    pub false_positives: usize,
    pub num_gt: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub iou_thresh: f64,
    pub per_class: Vec<ClassMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub cell_accuracy: Option<f64>,
}

fn ratio(num: usize, den: usize, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

/// Precision/recall at IoU 0.5 per class and overall.
///
/// Detections are matched greedily in descending score order to the
/// unmatched same-class gt of highest IoU. Precision with no detections is 1
/// when there was nothing to find and 0 otherwise; recall with no gts is 1.
/// `cell_predictions`, when given, supplies the best class per anchor and
/// yields the foreground-cell classification accuracy.
pub fn evaluate(
    dets: &[Vec<Detection>],
    scenes: &[SynthScene],
    num_classes: usize,
    cell_predictions: Option<&[Vec<usize>]>,
) -> Result<EvalMetrics> {
    const IOU_THRESH: f64 = 0.5;
    if dets.len() != scenes.len() {
        return Err(Error::Shape(format!(
            "{} detection lists for {} scenes",
            dets.len(),
            scenes.len()
        )));
    }
    let mut per_class = vec![ClassMetrics::default(); num_classes];
    for (scene_dets, scene) in dets.iter().zip(scenes) {
        for g in &scene.gts {
            if g.class_index >= num_classes {
                return Err(Error::Shape(format!("gt class {} out of range", g.class_index)));
            }
            per_class[g.class_index].num_gt += 1;
        }
        let mut order: Vec<usize> = (0..scene_dets.len()).collect();
        order.sort_by(|&a, &b| scene_dets[b].score.total_cmp(&scene_dets[a].score).then(a.cmp(&b)));
        let mut used = vec![false; scene.gts.len()];
        for i in order {
            let d = &scene_dets[i];
            if d.class_index >= num_classes {
                return Err(Error::Shape(format!("detection class {} out of range", d.class_index)));
            }
            let best = scene
                .gts
                .iter()
                .enumerate()
                .filter(|(g, gt)| !used[*g] && gt.class_index == d.class_index)
                .map(|(g, gt)| (g, iou(&d.bbox, &gt.bbox)))
                .filter(|&(_, u)| u >= IOU_THRESH)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            let m = &mut per_class[d.class_index];
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    m.true_positives += 1;
                }
                None => m.false_positives += 1,
            }
        }
    }
    let (mut tp, mut fp, mut ngt) = (0, 0, 0);
    for m in &mut per_class {
        let claimed = m.true_positives + m.false_positives;
        m.precision = ratio(m.true_positives, claimed, if m.num_gt == 0 { 1.0 } else { 0.0 });
        m.recall = ratio(m.true_positives, m.num_gt, 1.0);
        tp += m.true_positives;
        fp += m.false_positives;
        ngt += m.num_gt;
    }
    let cell_accuracy = cell_predictions
        .map(|p| cell_accuracy(p, scenes))
        .transpose()?;
    Ok(EvalMetrics {
        iou_thresh: IOU_THRESH,
        per_class,
        precision: ratio(tp, tp + fp, if ngt == 0 { 1.0 } else { 0.0 }),
        recall: ratio(tp, ngt, 1.0),
        cell_accuracy,
    })
}

/// Fraction of foreground anchors whose predicted class is their generating class.
pub fn cell_accuracy(predictions: &[Vec<usize>], scenes: &[SynthScene]) -> Result<f64> {
    if predictions.len() != scenes.len() {
        return Err(Error::Shape(format!(
            "{} prediction lists for {} scenes",
            predictions.len(),
            scenes.len()
        )));
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, s) in predictions.iter().zip(scenes) {
        if p.len() != s.oracle.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} anchors",
                p.len(),
                s.oracle.len()
            )));
        }
        for (pred, truth) in p.iter().zip(&s.oracle) {
            if let Some(c) = truth {
                total += 1;
                hit += usize::from(pred == c);
            }
        }
    }
    Ok(ratio(hit, total, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub index: usize,
    pub file: String,
    pub gts: Vec<GtInstance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub version: u32,
    pub spec: SynthSpec,
    pub embeddings: String,
    pub scenes: Vec<SceneEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: SynthSpec,
    pub embeddings: EmbeddingMatrix,
    pub scenes: Vec<SynthScene>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
const EMBEDDINGS_FILE: &str = "embeddings.dsem";

/// Writes `embeddings.dsem` (+labels), one `scene_NNNN.dsfm` per scene and `manifest.json`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_embeddings(dir.join(EMBEDDINGS_FILE), &corpus.embeddings)?;
    let mut entries = Vec::with_capacity(corpus.scenes.len());
    for s in &corpus.scenes {
        let file = format!("scene_{:04}.dsfm", s.index);
        write_blob(dir.join(&file), &s.blob)?;
        entries.push(SceneEntry {
            index: s.index,
            file,
            gts: s.gts.clone(),
        });
    }
    let manifest = CorpusManifest {
        version: 1,
        spec: corpus.spec.clone(),
        embeddings: EMBEDDINGS_FILE.into(),
        scenes: entries,
    };
    let doc = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    codec::write_file(&dir.join(MANIFEST_FILE), &doc)
}

pub fn read_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir: PathBuf = dir.as_ref().to_path_buf();
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: CorpusManifest = serde_json::from_slice(&codec::read_file(&mpath)?)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    manifest.spec.validate()?;
    let embeddings = read_embeddings(dir.join(&manifest.embeddings))?;
    check_embeddings(&manifest.spec, &embeddings)?;
    let scenes = manifest
        .scenes
        .iter()
        .map(|e| {
            let blob = read_blob(dir.join(&e.file))?;
            let grid = blob.grid()?;
            Ok(SynthScene {
                index: e.index,
                oracle: oracle_from_gts(&grid, &e.gts),
                blob,
                gts: e.gts.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus {
        spec: manifest.spec,
        embeddings,
        scenes,
    })
}
