//! Closed-set style detection: classify every cell, decode boxes, suppress.

use crate::boxes::{decode_box, dfl_decode, make_anchor_centers, nms, Detection, NmsConfig};
use crate::error::Result;
use crate::featblob::FeatureBlob;
use crate::head::Classifier;

/// Runs score → decode → NMS for each image in the blob.
///
/// Each anchor proposes its single best class; boxes are decoded only for
/// anchors that clear the score threshold.
pub fn detect<C: Classifier + ?Sized>(
    classifier: &C,
    blob: &FeatureBlob,
    cfg: &NmsConfig,
) -> Result<Vec<Vec<Detection>>> {
    let grid = blob.grid()?;
    let anchors = make_anchor_centers(&grid);
    let image = blob.image_size as f32;
    let mut per_image: Vec<Vec<Detection>> = vec![Vec::new(); blob.batch()];
    let mut offset = 0;
    for (feat, boxes) in blob.features.iter().zip(&blob.box_logits) {
        let scores = classifier.classify(feat)?.into_probabilities();
        for (b, dets) in per_image.iter_mut().enumerate() {
            for (cell, (class_index, score)) in scores.argmax(b).into_iter().enumerate() {
                if score < cfg.score_thresh || scores.classes == 0 {
                    continue;
                }
                let ltrb = dfl_decode(&boxes.cell(b, cell))?;
                dets.push(Detection {
                    bbox: decode_box(&anchors[offset + cell], ltrb, image),
                    score,
                    class_index,
                });
            }
        }
        offset += feat.cells();
    }
    Ok(per_image.iter().map(|d| nms(d, cfg)).collect())
}

/// Best class per anchor (level-major) for each image.
pub fn cell_predictions<C: Classifier + ?Sized>(
    classifier: &C,
    blob: &FeatureBlob,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); blob.batch()];
    for feat in &blob.features {
        let scores = classifier.classify(feat)?;
        for (b, o) in out.iter_mut().enumerate() {
            o.extend(scores.argmax(b).into_iter().map(|(k, _)| k));
        }
    }
    Ok(out)
}
