//! Joint-space classification head.
//!
//! Two routes compute the same per-cell class logits:
//!
//! * [`score_online`]: `α·cos(f, e′ₖ) + β` straight from adapted embeddings.
//! * [`classify_conv`]: a 1×1 convolution with the re-parameterized kernel
//!   `α·ê′ₖ` applied to per-cell normalized features, plus `β`.
//!
//! The kernel is stored `K×D`; logically it is the `K×D×1×1` weight of the conv.

use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::tensor::{dot_f32, sigmoid, Matrix};

pub const DEFAULT_LOGIT_SCALE: f32 = 14.29;
pub const DEFAULT_LOGIT_BIAS: f32 = -10.0;
pub const VALID_STRIDES: [u32; 3] = [8, 16, 32];

/// One pyramid level of region features, NCHW.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub level: usize,
    pub stride: u32,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(
        level: usize,
        stride: u32,
        shape: [usize; 4],
        data: Vec<f32>,
    ) -> Result<Self> {
        let [batch, channels, height, width] = shape;
        if !VALID_STRIDES.contains(&stride) {
            return Err(Error::Config(format!("stride {stride} not in {{8,16,32}}")));
        }
        if data.len() != batch * channels * height * width {
            return Err(Error::Shape(format!(
                "feature map {batch}x{channels}x{height}x{width} needs {} values, got {}",
                batch * channels * height * width,
                data.len()
            )));
        }
        crate::codec::check_finite(&data, "feature map")?;
        Ok(Self {
            level,
            stride,
            batch,
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(level: usize, stride: u32, shape: [usize; 4]) -> Result<Self> {
        Self::new(level, stride, shape, vec![0.0; shape.iter().product()])
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Feature vector of one cell (gathered across channels).
    pub fn cell(&self, b: usize, cell: usize) -> Vec<f32> {
        let hw = self.cells();
        let base = b * self.channels * hw;
        (0..self.channels).map(|c| self.data[base + c * hw + cell]).collect()
    }

    pub fn set_cell(&mut self, b: usize, cell: usize, v: &[f32]) {
        let hw = self.cells();
        let base = b * self.channels * hw;
        for (c, &x) in v.iter().enumerate() {
            self.data[base + c * hw + cell] = x;
        }
    }

    /// Cell-major (`HW × C`) unit-normalized features of image `b`.
    /// Zero cells stay zero, so they score `cos = 0`.
    pub fn normalized_cells(&self, b: usize) -> Vec<f32> {
        let hw = self.cells();
        let c = self.channels;
        let base = b * c * hw;
        let mut out = vec![0.0f32; hw * c];
        for cell in 0..hw {
            let mut sq = 0.0f64;
            for ch in 0..c {
                let v = self.data[base + ch * hw + cell] as f64;
                sq += v * v;
            }
            if sq > 0.0 {
                let inv = 1.0 / sq.sqrt();
                for ch in 0..c {
                    out[cell * c + ch] = (self.data[base + ch * hw + cell] as f64 * inv) as f32;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Logit,
    Sigmoid,
}

/// Per-cell class scores, `B×K×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    pub batch: usize,
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
    pub activation: Activation,
}

impl ScoreMap {
    pub fn shape(&self) -> [usize; 4] {
        [self.batch, self.classes, self.height, self.width]
    }

    #[inline]
    pub fn get(&self, b: usize, k: usize, cell: usize) -> f32 {
        let hw = self.height * self.width;
        self.data[(b * self.classes + k) * hw + cell]
    }

    pub fn into_probabilities(mut self) -> Self {
        if self.activation == Activation::Logit {
            for v in &mut self.data {
                *v = sigmoid(*v);
            }
            self.activation = Activation::Sigmoid;
        }
        self
    }

    /// Per-cell `(class, score)` of the best class; ties go to the lower index.
    pub fn argmax(&self, b: usize) -> Vec<(usize, f32)> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|cell| {
                let mut best = (0usize, f32::NEG_INFINITY);
                for k in 0..self.classes {
                    let v = self.get(b, k, cell);
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                best
            })
            .collect()
    }
}

/// Deployable closed-set vocabulary: labels plus the 1×1 conv kernel and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabularyPack {
    labels: Vec<String>,
    kernel: Matrix<f32>,
    logit_scale: f32,
    logit_bias: f32,
    normalized: bool,
}

impl VocabularyPack {
    pub fn new(
        labels: Vec<String>,
        kernel: Matrix<f32>,
        logit_scale: f32,
        logit_bias: f32,
        normalized: bool,
    ) -> Result<Self> {
        if kernel.rows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} kernel rows for {} labels",
                kernel.rows(),
                labels.len()
            )));
        }
        check_logit_params(logit_scale, logit_bias)?;
        crate::codec::check_finite(kernel.as_slice(), "pack kernel")?;
        if normalized {
            for (i, row) in kernel.iter_rows().enumerate() {
                let n = dot_f32(row, row).sqrt() / logit_scale as f64;
                if (n - 1.0).abs() > 1e-5 {
                    return Err(Error::Data(format!(
                        "kernel row {i} ('{}') has norm {n}·α, expected α",
                        labels[i]
                    )));
                }
            }
        }
        Ok(Self {
            labels,
            kernel,
            logit_scale,
            logit_bias,
            normalized,
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kernel(&self) -> &Matrix<f32> {
        &self.kernel
    }

    pub fn logit_scale(&self) -> f32 {
        self.logit_scale
    }

    pub fn logit_bias(&self) -> f32 {
        self.logit_bias
    }

    pub fn normalized(&self) -> bool {
        self.normalized
    }

    pub fn num_classes(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.kernel.cols()
    }

    pub fn position(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// Anything that maps a feature level to per-class logits.
pub trait Classifier: Sync {
    fn labels(&self) -> &[String];
    fn dim(&self) -> usize;
    fn classify(&self, features: &FeatureMap) -> Result<ScoreMap>;
}

impl Classifier for VocabularyPack {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn dim(&self) -> usize {
        self.kernel.cols()
    }

    fn classify(&self, features: &FeatureMap) -> Result<ScoreMap> {
        classify_conv(self, features)
    }
}

pub(crate) fn check_logit_params(scale: f32, bias: f32) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("logit scale must be positive, got {scale}")));
    }
    if !bias.is_finite() {
        return Err(Error::Config(format!("logit bias must be finite, got {bias}")));
    }
    Ok(())
}

fn check_dims(expected: usize, features: &FeatureMap) -> Result<()> {
    if features.channels() != expected {
        return Err(Error::Shape(format!(
            "vocabulary is {expected}-d but feature map has {} channels",
            features.channels()
        )));
    }
    Ok(())
}

/// Online cosine scoring against adapted embeddings: `α·cos(f, e′ₖ) + β`.
pub fn score_online(
    adapted: &EmbeddingMatrix,
    features: &FeatureMap,
    logit_scale: f32,
    logit_bias: f32,
) -> Result<ScoreMap> {
    check_dims(adapted.dims(), features)?;
    check_logit_params(logit_scale, logit_bias)?;
    let k_count = adapted.rows();
    let hw = features.cells();
    let emb_norms: Vec<f64> = (0..k_count)
        .map(|k| dot_f32(adapted.row(k), adapted.row(k)).sqrt())
        .collect();
    let alpha = logit_scale as f64;
    let mut data = vec![0.0f32; features.batch() * k_count * hw];
    for b in 0..features.batch() {
        for cell in 0..hw {
            let f = features.cell(b, cell);
            let fnorm = dot_f32(&f, &f).sqrt();
            for k in 0..k_count {
                let cos = if fnorm > 0.0 && emb_norms[k] > 0.0 {
                    dot_f32(&f, adapted.row(k)) / (fnorm * emb_norms[k])
                } else {
                    0.0
                };
                data[(b * k_count + k) * hw + cell] = (alpha * cos + logit_bias as f64) as f32;
            }
        }
    }
    Ok(ScoreMap {
        batch: features.batch(),
        classes: k_count,
        height: features.height(),
        width: features.width(),
        data,
        activation: Activation::Logit,
    })
}

/// Folds adapted embeddings into the 1×1 conv kernel `α·ê′ₖ`, keeping `β` as bias.
pub fn reparameterize(
    adapted: &EmbeddingMatrix,
    logit_scale: f32,
    logit_bias: f32,
) -> Result<VocabularyPack> {
    check_logit_params(logit_scale, logit_bias)?;
    let labels = adapted.labels_or_default();
    let mut kernel = Matrix::zeros(adapted.rows(), adapted.dims());
    for k in 0..adapted.rows() {
        kernel_row(adapted.row(k), logit_scale, kernel.row_mut(k))
            .map_err(|_| Error::DegenerateClass {
                label: labels[k].clone(),
            })?;
    }
    VocabularyPack::new(labels, kernel, logit_scale, logit_bias, true)
}

/// Writes `α·e/‖e‖` into `out`.
pub(crate) fn kernel_row(e: &[f32], logit_scale: f32, out: &mut [f32]) -> Result<()> {
    let n = dot_f32(e, e).sqrt();
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::DegenerateRow { row: 0 });
    }
    let s = logit_scale as f64 / n;
    for (o, &v) in out.iter_mut().zip(e) {
        *o = (v as f64 * s) as f32;
    }
    Ok(())
}

/// The deployed path: per-cell feature normalization, then a plain 1×1 conv plus bias.
pub fn classify_conv(pack: &VocabularyPack, features: &FeatureMap) -> Result<ScoreMap> {
    check_dims(pack.dim(), features)?;
    let k_count = pack.num_classes();
    let hw = features.cells();
    let c = features.channels();
    let bias = pack.logit_bias as f64;
    let mut data = vec![0.0f32; features.batch() * k_count * hw];
    for b in 0..features.batch() {
        let cells = features.normalized_cells(b);
        for k in 0..k_count {
            let w = pack.kernel.row(k);
            let out = &mut data[(b * k_count + k) * hw..(b * k_count + k + 1) * hw];
            for (cell, o) in out.iter_mut().enumerate() {
                *o = (dot_f32(w, &cells[cell * c..(cell + 1) * c]) + bias) as f32;
            }
        }
    }
    Ok(ScoreMap {
        batch: features.batch(),
        classes: k_count,
        height: features.height(),
        width: features.width(),
        data,
        activation: Activation::Logit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_cell(v: &[f32]) -> FeatureMap {
        FeatureMap::new(0, 8, [1, v.len(), 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn identical_unit_vectors_score_alpha_plus_beta() {
        let e = EmbeddingMatrix::from_rows(&[vec![0.6, 0.8]]).unwrap();
        let s = score_online(&e, &single_cell(&[0.6, 0.8]), 5.0, -1.0).unwrap();
        assert!((s.data[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn orthogonal_feature_scores_beta() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let s = score_online(&e, &single_cell(&[0.0, 3.0]), 5.0, -1.0).unwrap();
        assert!((s.data[0] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn reparameterize_normalizes_then_scales() {
        let e = EmbeddingMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let p = reparameterize(&e, 2.0, 0.0).unwrap();
        assert!((p.kernel().get(0, 0) - 1.2).abs() < 1e-6);
        assert!((p.kernel().get(0, 1) - 1.6).abs() < 1e-6);
        assert!(p.normalized());
        assert_eq!(p.labels(), &["class_0".to_string()]);
    }

    #[test]
    fn zero_adapted_row_names_the_label() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]])
            .unwrap()
            .with_labels(vec!["cat".into(), "void".into()])
            .unwrap();
        match reparameterize(&e, 1.0, 0.0) {
            Err(Error::DegenerateClass { label }) => assert_eq!(label, "void"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conv_self_match_and_zero_cell() {
        let e = EmbeddingMatrix::from_rows(&[vec![2.0, -1.0, 2.0]]).unwrap();
        let p = reparameterize(&e, 7.0, -3.0).unwrap();
        let s = classify_conv(&p, &single_cell(&[2.0, -1.0, 2.0])).unwrap();
        assert!((s.data[0] - 4.0).abs() < 1e-5);
        let z = classify_conv(&p, &single_cell(&[0.0, 0.0, 0.0])).unwrap();
        assert_eq!(z.data[0], -3.0);
    }

    #[test]
    fn mismatched_channels_is_a_shape_error() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = reparameterize(&e, 1.0, 0.0).unwrap();
        let f = single_cell(&[1.0, 0.0, 0.0]);
        assert!(matches!(classify_conv(&p, &f), Err(Error::Shape(_))));
        assert!(matches!(score_online(&e, &f, 1.0, 0.0), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_stride_rejected() {
        assert!(FeatureMap::zeros(0, 4, [1, 1, 1, 1]).is_err());
    }

    #[test]
    fn unnormalized_kernel_flag_is_checked() {
        let k = Matrix::from_rows(&[vec![1.0f32, 1.0]]).unwrap();
        assert!(VocabularyPack::new(vec!["a".into()], k.clone(), 1.0, 0.0, true).is_err());
        assert!(VocabularyPack::new(vec!["a".into()], k, 1.0, 0.0, false).is_ok());
    }

    #[test]
    fn probabilities_are_in_unit_interval() {
        let e = EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let s = score_online(&e, &single_cell(&[1.0, 1.0]), 30.0, -10.0)
            .unwrap()
            .into_probabilities();
        assert_eq!(s.activation, Activation::Sigmoid);
        assert!(s.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }
}
