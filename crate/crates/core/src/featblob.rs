//! DSFM feature blobs: the per-image input to detection.
//!
//! Layout (little-endian): magic `DSFM`, version `u32` = 1, image size `u32`,
//! tensor count `u32`; then per tensor: kind `u8` (0 = region features,
//! 1 = box distribution logits), 3 zero bytes, level `u32`, stride `u32`,
//! B, C, H, W as `u32`, followed by B·C·H·W `f32` in NCHW order.

use std::path::Path;

use crate::boxes::{GridSpec, LevelSpec, REG_MAX};
use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::head::FeatureMap;

pub const DSFM_MAGIC: &[u8; 4] = b"DSFM";
pub const DSFM_VERSION: u32 = 1;
const KIND_FEATURES: u8 = 0;
const KIND_BOX_LOGITS: u8 = 1;

/// Region features and box-distribution logits for every level of one image batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBlob {
    pub image_size: u32,
    pub features: Vec<FeatureMap>,
    pub box_logits: Vec<FeatureMap>,
}

impl FeatureBlob {
    pub fn new(image_size: u32, features: Vec<FeatureMap>, box_logits: Vec<FeatureMap>) -> Result<Self> {
        let blob = Self {
            image_size,
            features,
            box_logits,
        };
        blob.validate()?;
        Ok(blob)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.box_logits.len() {
            return Err(Error::Shape(format!(
                "{} feature levels but {} box-logit levels",
                self.features.len(),
                self.box_logits.len()
            )));
        }
        for (f, b) in self.features.iter().zip(&self.box_logits) {
            if f.stride != b.stride
                || f.level != b.level
                || f.height() != b.height()
                || f.width() != b.width()
                || f.batch() != b.batch()
            {
                return Err(Error::Shape(format!(
                    "level {}: feature map {:?} and box logits {:?} disagree",
                    f.level,
                    f.shape(),
                    b.shape()
                )));
            }
            if b.channels() != 4 * REG_MAX {
                return Err(Error::Shape(format!(
                    "box logits need {} channels, got {}",
                    4 * REG_MAX,
                    b.channels()
                )));
            }
        }
        self.grid()?;
        Ok(())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(
            self.features
                .iter()
                .map(|f| LevelSpec {
                    stride: f.stride,
                    height: f.height(),
                    width: f.width(),
                })
                .collect(),
            self.image_size,
        )
    }

    pub fn batch(&self) -> usize {
        self.features.first().map_or(0, FeatureMap::batch)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DSFM_MAGIC);
        codec::put_u32(&mut out, DSFM_VERSION);
        codec::put_u32(&mut out, self.image_size);
        codec::put_u32(&mut out, (self.features.len() + self.box_logits.len()) as u32);
        let tagged = self
            .features
            .iter()
            .map(|f| (KIND_FEATURES, f))
            .chain(self.box_logits.iter().map(|f| (KIND_BOX_LOGITS, f)));
        for (kind, f) in tagged {
            out.push(kind);
            out.extend_from_slice(&[0, 0, 0]);
            codec::put_u32(&mut out, f.level as u32);
            codec::put_u32(&mut out, f.stride);
            for d in f.shape() {
                codec::put_u32(&mut out, d as u32);
            }
            codec::put_f32s(&mut out, f.as_slice());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(DSFM_MAGIC)?;
        let version = r.u32()?;
        if version != DSFM_VERSION {
            return Err(Error::Format(format!("unsupported DSFM version {version}")));
        }
        let image_size = r.u32()?;
        let count = r.u32()? as usize;
        let mut features = Vec::new();
        let mut box_logits = Vec::new();
        for _ in 0..count {
            let kind = r.u8()?;
            if r.take(3)? != [0, 0, 0] {
                return Err(Error::Format("reserved tensor bytes are not zero".into()));
            }
            let level = r.u32()? as usize;
            let stride = r.u32()?;
            let mut shape = [0usize; 4];
            for s in &mut shape {
                *s = r.u32()? as usize;
            }
            let data = r.f32s(shape.iter().product())?;
            let fm = FeatureMap::new(level, stride, shape, data)?;
            match kind {
                KIND_FEATURES => features.push(fm),
                KIND_BOX_LOGITS => box_logits.push(fm),
                k => return Err(Error::Format(format!("unknown tensor kind {k}"))),
            }
        }
        r.expect_end()?;
        features.sort_by_key(|f| f.level);
        box_logits.sort_by_key(|f| f.level);
        Self::new(image_size, features, box_logits)
    }
}

pub fn read_blob(path: impl AsRef<Path>) -> Result<FeatureBlob> {
    FeatureBlob::from_bytes(&codec::read_file(path.as_ref())?)
}

pub fn write_blob(path: impl AsRef<Path>, blob: &FeatureBlob) -> Result<()> {
    codec::write_file(path.as_ref(), &blob.to_bytes())
}
