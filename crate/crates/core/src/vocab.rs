//! Prompt-then-detect vocabulary building, incremental edits, and the DSPK pack file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorParams;
use crate::codec::{self, put_f32s, put_u32, ByteReader};
use crate::embedding_io::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::head::{kernel_row, reparameterize, VocabularyPack};
use crate::quant::{QuantMode, QuantizedKernel, QuantizedPack};
use crate::tensor::Matrix;

pub const DSPK_MAGIC: &[u8; 4] = b"DSPK";
pub const DSPK_VERSION: u32 = 1;

/// Raw embeddings → adaptor → re-parameterized pack. Labels are carried through.
pub fn build_vocab(
    embeddings: &EmbeddingMatrix,
    adaptor: &AdaptorParams<f32>,
    logit_scale: f32,
    logit_bias: f32,
) -> Result<VocabularyPack> {
    reparameterize(&adaptor.adapt(embeddings)?, logit_scale, logit_bias)
}

/// Appends one class; only the new row is computed, existing rows are copied bit for bit.
pub fn add_class(
    pack: &VocabularyPack,
    label: &str,
    raw_embedding: &[f32],
    adaptor: &AdaptorParams<f32>,
) -> Result<VocabularyPack> {
    if pack.position(label).is_some() {
        return Err(Error::Conflict(label.to_string()));
    }
    if !pack.normalized() {
        return Err(Error::Data(
            "cannot extend a pack whose kernel is not α-normalized".into(),
        ));
    }
    if raw_embedding.len() != pack.dim() || adaptor.dim() != pack.dim() {
        return Err(Error::Shape(format!(
            "pack is {}-d, embedding is {}-d, adaptor is {}-d",
            pack.dim(),
            raw_embedding.len(),
            adaptor.dim()
        )));
    }
    codec::check_finite(raw_embedding, "class embedding")?;
    let adapted = adaptor.forward(&Matrix::from_vec(1, pack.dim(), raw_embedding.to_vec())?)?;
    let mut data = pack.kernel().as_slice().to_vec();
    let start = data.len();
    data.resize(start + pack.dim(), 0.0);
    kernel_row(adapted.row(0), pack.logit_scale(), &mut data[start..]).map_err(|_| {
        Error::DegenerateClass {
            label: label.to_string(),
        }
    })?;
    let mut labels = pack.labels().to_vec();
    labels.push(label.to_string());
    VocabularyPack::new(
        labels,
        Matrix::from_vec(pack.num_classes() + 1, pack.dim(), data)?,
        pack.logit_scale(),
        pack.logit_bias(),
        true,
    )
}

/// Removes one class, preserving the order of the rest.
pub fn remove_class(pack: &VocabularyPack, label: &str) -> Result<VocabularyPack> {
    let idx = pack
        .position(label)
        .ok_or_else(|| Error::NotFound(label.to_string()))?;
    let d = pack.dim();
    let mut data = pack.kernel().as_slice().to_vec();
    data.drain(idx * d..(idx + 1) * d);
    let mut labels = pack.labels().to_vec();
    labels.remove(idx);
    VocabularyPack::new(
        labels,
        Matrix::from_vec(pack.num_classes() - 1, d, data)?,
        pack.logit_scale(),
        pack.logit_bias(),
        pack.normalized(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PackHeader {
    format: String,
    version: u32,
    k: usize,
    d: usize,
    labels: Vec<String>,
    logit_scale: f32,
    logit_bias: f32,
    normalized: bool,
    quantization: String,
    crc32: u32,
}

/// A pack as stored on disk: float kernel or weights-only quantized kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum StoredPack {
    Float(VocabularyPack),
    Quantized(QuantizedPack),
}

impl StoredPack {
    pub fn labels(&self) -> &[String] {
        match self {
            StoredPack::Float(p) => p.labels(),
            StoredPack::Quantized(q) => q.labels(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (labels, k, d, scale, bias, normalized, quantization, blob) = match self {
            StoredPack::Float(p) => {
                let mut blob = Vec::with_capacity(p.kernel().as_slice().len() * 4);
                put_f32s(&mut blob, p.kernel().as_slice());
                (
                    p.labels(),
                    p.num_classes(),
                    p.dim(),
                    p.logit_scale(),
                    p.logit_bias(),
                    p.normalized(),
                    "none",
                    blob,
                )
            }
            StoredPack::Quantized(q) => (
                q.labels(),
                q.kernel().rows(),
                q.kernel().cols(),
                q.logit_scale(),
                q.logit_bias(),
                q.normalized(),
                q.kernel().mode().name(),
                q.kernel().to_blob(),
            ),
        };
        let header = PackHeader {
            format: "DSPK".into(),
            version: DSPK_VERSION,
            k,
            d,
            labels: labels.to_vec(),
            logit_scale: scale,
            logit_bias: bias,
            normalized,
            quantization: quantization.into(),
            crc32: crc32fast::hash(&blob),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(DSPK_MAGIC);
        put_u32(&mut out, codec::to_u32(json.len(), "header length")?);
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DSPK_MAGIC)?;
        let len = r.u32()? as usize;
        let header: PackHeader = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("pack header: {e}")))?;
        if header.format != "DSPK" || header.version != DSPK_VERSION {
            return Err(Error::Format(format!(
                "unsupported pack {} v{}",
                header.format, header.version
            )));
        }
        if header.labels.len() != header.k {
            return Err(Error::Format(format!(
                "header lists {} labels for k={}",
                header.labels.len(),
                header.k
            )));
        }
        if header.d == 0 {
            return Err(Error::EmptyMatrix {
                rows: header.k,
                dims: 0,
            });
        }
        let mode = match header.quantization.as_str() {
            "none" => None,
            other => Some(QuantMode::parse(other)?),
        };
        let n = header.k * header.d;
        let blob_len = match mode {
            None => n * 4,
            Some(m) => header.k * 4 + n * m.bytes_per_value(),
        };
        if r.remaining() != blob_len {
            return Err(Error::Length {
                expected: blob_len,
                found: r.remaining(),
            });
        }
        let blob = r.take(blob_len)?;
        let crc = crc32fast::hash(blob);
        if crc != header.crc32 {
            return Err(Error::Corruption(format!(
                "pack blob crc32 {crc:08x} does not match header {:08x}",
                header.crc32
            )));
        }
        match mode {
            None => {
                let data = ByteReader::new(blob).f32s(n)?;
                Ok(StoredPack::Float(VocabularyPack::new(
                    header.labels,
                    Matrix::from_vec(header.k, header.d, data)?,
                    header.logit_scale,
                    header.logit_bias,
                    header.normalized,
                )?))
            }
            Some(m) => {
                let kernel = QuantizedKernel::from_blob(m, header.k, header.d, blob)?;
                Ok(StoredPack::Quantized(QuantizedPack::new(
                    header.labels,
                    kernel,
                    header.logit_scale,
                    header.logit_bias,
                    header.normalized,
                )?))
            }
        }
    }
}

pub fn save_pack(path: impl AsRef<Path>, pack: &VocabularyPack) -> Result<()> {
    save_stored_pack(path, &StoredPack::Float(pack.clone()))
}

pub fn save_stored_pack(path: impl AsRef<Path>, pack: &StoredPack) -> Result<()> {
    codec::write_file(path.as_ref(), &pack.to_bytes()?)
}

pub fn load_stored_pack(path: impl AsRef<Path>) -> Result<StoredPack> {
    StoredPack::from_bytes(&codec::read_file(path.as_ref())?)
}

/// Loads a float pack; quantized packs are rejected with a format error.
pub fn load_pack(path: impl AsRef<Path>) -> Result<VocabularyPack> {
    match load_stored_pack(path)? {
        StoredPack::Float(p) => Ok(p),
        StoredPack::Quantized(q) => Err(Error::Format(format!(
            "pack is {}-quantized; a float pack is required",
            q.kernel().mode().name()
        ))),
    }
}
