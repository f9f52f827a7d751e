//! Weights-only symmetric per-row INT8/INT16 quantization of pack kernels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s, ByteReader};
use crate::error::{Error, Result};
use crate::head::{check_logit_params, Activation, Classifier, FeatureMap, ScoreMap, VocabularyPack};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantMode {
    Int8,
    Int16,
}

impl QuantMode {
    pub fn limit(self) -> i32 {
        match self {
            QuantMode::Int8 => i8::MAX as i32,
            QuantMode::Int16 => i16::MAX as i32,
        }
    }

    pub fn bytes_per_value(self) -> usize {
        match self {
            QuantMode::Int8 => 1,
            QuantMode::Int16 => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Int8 => "int8",
            QuantMode::Int16 => "int16",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "int8" => Ok(QuantMode::Int8),
            "int16" => Ok(QuantMode::Int16),
            other => Err(Error::Format(format!("unknown quantization mode '{other}'"))),
        }
    }
}

/// `K×D` integer values (stored widened to `i16`) with one positive scale per row.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedKernel {
    mode: QuantMode,
    rows: usize,
    cols: usize,
    values: Vec<i16>,
    scales: Vec<f32>,
}

impl QuantizedKernel {
    pub fn new(mode: QuantMode, rows: usize, cols: usize, values: Vec<i16>, scales: Vec<f32>) -> Result<Self> {
        if values.len() != rows * cols || scales.len() != rows {
            return Err(Error::Shape(format!(
                "{} values and {} scales for a {rows}×{cols} kernel",
                values.len(),
                scales.len()
            )));
        }
        let limit = mode.limit();
        if let Some(v) = values.iter().find(|v| (**v as i32).abs() > limit) {
            return Err(Error::Data(format!("value {v} exceeds {} range", mode.name())));
        }
        if let Some(s) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Data(format!("row scale {s} is not positive")));
        }
        Ok(Self {
            mode,
            rows,
            cols,
            values,
            scales,
        })
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[i16] {
        &self.values
    }

    pub fn row(&self, k: usize) -> &[i16] {
        &self.values[k * self.cols..(k + 1) * self.cols]
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    /// Scales block (`K` f32) followed by the values (i8 or i16), all little-endian.
    pub fn to_blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.rows * 4 + self.values.len() * self.mode.bytes_per_value());
        put_f32s(&mut out, &self.scales);
        for &v in &self.values {
            match self.mode {
                QuantMode::Int8 => out.push(v as i8 as u8),
                QuantMode::Int16 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
        out
    }

    pub fn from_blob(mode: QuantMode, rows: usize, cols: usize, blob: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(blob);
        let scales = r.f32s(rows)?;
        let raw = r.take(rows * cols * mode.bytes_per_value())?;
        r.expect_end()?;
        let values = match mode {
            QuantMode::Int8 => raw.iter().map(|&b| b as i8 as i16).collect(),
            QuantMode::Int16 => raw
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect(),
        };
        Self::new(mode, rows, cols, values, scales)
    }
}

/// Symmetric per-row quantization.
///
/// The row scale is `max|w| / limit` rounded to f32, and values are
/// `round(w / scale)` with ties away from zero, so the reconstruction error
/// never exceeds half the stored scale. All-zero rows get scale 1.
pub fn quantize_kernel(kernel: &Matrix<f32>, mode: QuantMode) -> QuantizedKernel {
    let limit = mode.limit() as f64;
    let mut values = Vec::with_capacity(kernel.as_slice().len());
    let mut scales = Vec::with_capacity(kernel.rows());
    for row in kernel.iter_rows() {
        let max_abs = row.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
        let scale = if max_abs > 0.0 {
            let s = (max_abs / limit) as f32;
            if s > 0.0 {
                s
            } else {
                f32::MIN_POSITIVE
            }
        } else {
            1.0
        };
        for &v in row {
            let q = (v as f64 / scale as f64).round().clamp(-limit, limit);
            values.push(q as i16);
        }
        scales.push(scale);
    }
    QuantizedKernel {
        mode,
        rows: kernel.rows(),
        cols: kernel.cols(),
        values,
        scales,
    }
}

/// Exact reconstruction `value × scale` in double precision.
pub fn dequantize(q: &QuantizedKernel) -> Matrix<f64> {
    let mut data = Vec::with_capacity(q.values.len());
    for k in 0..q.rows {
        let s = q.scales[k] as f64;
        data.extend(q.row(k).iter().map(|&v| v as f64 * s));
    }
    Matrix::from_vec(q.rows, q.cols, data).expect("shape checked at construction")
}

/// A pack whose kernel is quantized; scoring keeps activations in float.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPack {
    labels: Vec<String>,
    kernel: QuantizedKernel,
    logit_scale: f32,
    logit_bias: f32,
    normalized: bool,
}

impl QuantizedPack {
    pub fn new(
        labels: Vec<String>,
        kernel: QuantizedKernel,
        logit_scale: f32,
        logit_bias: f32,
        normalized: bool,
    ) -> Result<Self> {
        if labels.len() != kernel.rows {
            return Err(Error::Shape(format!(
                "{} kernel rows for {} labels",
                kernel.rows,
                labels.len()
            )));
        }
        check_logit_params(logit_scale, logit_bias)?;
        Ok(Self {
            labels,
            kernel,
            logit_scale,
            logit_bias,
            normalized,
        })
    }

    pub fn from_pack(pack: &VocabularyPack, mode: QuantMode) -> Self {
        Self {
            labels: pack.labels().to_vec(),
            kernel: quantize_kernel(pack.kernel(), mode),
            logit_scale: pack.logit_scale(),
            logit_bias: pack.logit_bias(),
            normalized: pack.normalized(),
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn kernel(&self) -> &QuantizedKernel {
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
}

impl Classifier for QuantizedPack {
    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn dim(&self) -> usize {
        self.kernel.cols
    }

    fn classify(&self, features: &FeatureMap) -> Result<ScoreMap> {
        classify_quantized(self, features)
    }
}

/// Integer kernel against normalized float activations; the row scale is applied
/// once after accumulation.
pub fn classify_quantized(pack: &QuantizedPack, features: &FeatureMap) -> Result<ScoreMap> {
    let q = &pack.kernel;
    if features.channels() != q.cols {
        return Err(Error::Shape(format!(
            "vocabulary is {}-d but feature map has {} channels",
            q.cols,
            features.channels()
        )));
    }
    let hw = features.cells();
    let c = q.cols;
    let bias = pack.logit_bias as f64;
    let mut data = vec![0.0f32; features.batch() * q.rows * hw];
    for b in 0..features.batch() {
        let cells = features.normalized_cells(b);
        for k in 0..q.rows {
            let w = q.row(k);
            let s = q.scales[k] as f64;
            let out = &mut data[(b * q.rows + k) * hw..(b * q.rows + k + 1) * hw];
            for (cell, o) in out.iter_mut().enumerate() {
                let acc: f64 = w
                    .iter()
                    .zip(&cells[cell * c..(cell + 1) * c])
                    .map(|(&wi, &x)| wi as f64 * x as f64)
                    .sum();
                *o = (acc * s + bias) as f32;
            }
        }
    }
    Ok(ScoreMap {
        batch: features.batch(),
        classes: q.rows,
        height: features.height(),
        width: features.width(),
        data,
        activation: Activation::Logit,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDrift {
    pub label: String,
    pub max_delta: f64,
    pub mean_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub mode: QuantMode,
    pub cells: usize,
    pub max_delta: f64,
    pub mean_delta: f64,
    pub top1_agreement: f64,
    pub per_class: Vec<ClassDrift>,
}

impl DriftReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,label,max_delta,mean_delta,top1_agreement,cells\n");
        let _ = writeln!(
            s,
            "all,,{},{},{},{}",
            self.max_delta, self.mean_delta, self.top1_agreement, self.cells
        );
        for c in &self.per_class {
            let _ = writeln!(s, "class,{},{},{},,", csv_field(&c.label), c.max_delta, c.mean_delta);
        }
        s
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Logit deltas and top-1 agreement of the quantized head against the float head.
pub fn drift_report(pack: &VocabularyPack, q: &QuantizedPack, corpus: &[FeatureMap]) -> Result<DriftReport> {
    if pack.num_classes() != q.kernel.rows || pack.dim() != q.kernel.cols {
        return Err(Error::Shape("float and quantized packs differ in shape".into()));
    }
    let k = pack.num_classes();
    let mut class_max = vec![0.0f64; k];
    let mut class_sum = vec![0.0f64; k];
    let (mut cells, mut agree) = (0usize, 0usize);
    for fm in corpus {
        let a = pack.classify(fm)?;
        let b = classify_quantized(q, fm)?;
        for bi in 0..fm.batch() {
            for cell in 0..fm.cells() {
                for c in 0..k {
                    let d = (a.get(bi, c, cell) as f64 - b.get(bi, c, cell) as f64).abs();
                    class_max[c] = class_max[c].max(d);
                    class_sum[c] += d;
                }
            }
            let (ta, tb) = (a.argmax(bi), b.argmax(bi));
            agree += ta.iter().zip(&tb).filter(|(x, y)| x.0 == y.0).count();
            cells += fm.cells();
        }
    }
    let denom = cells.max(1) as f64;
    let per_class: Vec<ClassDrift> = pack
        .labels()
        .iter()
        .enumerate()
        .map(|(c, l)| ClassDrift {
            label: l.clone(),
            max_delta: class_max[c],
            mean_delta: class_sum[c] / denom,
        })
        .collect();
    Ok(DriftReport {
        mode: q.kernel.mode,
        cells,
        max_delta: class_max.iter().copied().fold(0.0, f64::max),
        mean_delta: class_sum.iter().sum::<f64>() / (denom * k.max(1) as f64),
        top1_agreement: if cells == 0 { 1.0 } else { agree as f64 / cells as f64 },
        per_class,
    })
}
