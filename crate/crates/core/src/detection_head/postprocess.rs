use mitodet_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::anchors::{decode_box, generate_anchors, ANCHORS_PER_CELL};
use super::boxes::{nms, Rect};
use super::head::LevelOutputs;
use super::targets::{decode_distances, LevelGeom};
use super::{Branch, Detection};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_thr: f64,
    pub nms_iou: f64,
    /// Candidates kept per level and branch before NMS.
    pub top_k: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_thr: 0.1,
            nms_iou: 0.5,
            top_k: 1000,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score_thr) || !(0.0..=1.0).contains(&self.nms_iou) {
            return Err(Error::invalid("score_thr and nms_iou must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn top_k(mut cands: Vec<Detection>, k: usize) -> Vec<Detection> {
    cands.sort_by(|a, b| b.score.total_cmp(&a.score));
    cands.truncate(k);
    cands
}

/// Decodes both branches for image `n`, filters by score, merges and
/// applies NMS. Boxes are clipped to `(width, height)`.
pub fn postprocess<T: Scalar>(
    outputs: &[LevelOutputs<T>],
    n: usize,
    image_size: (usize, usize),
    cfg: &PostprocessConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let (iw, ih) = (image_size.0 as f64, image_size.1 as f64);
    let mut all = Vec::new();
    for out in outputs {
        let [_, _, h, w] = out.cls.shape();
        let geo = LevelGeom::new(out.level, h, w);
        let hw = h * w;
        let anchors = generate_anchors(geo.level, h, w, geo.stride)?.anchors;
        let cls = out.cls.sample(n);
        let deltas = out.boxes.sample(n);
        let mut cands = Vec::new();
        for (k, anchor) in anchors.iter().enumerate() {
            let (cell, a) = (k / ANCHORS_PER_CELL, k % ANCHORS_PER_CELL);
            let score = cls[a * hw + cell].to_f64_lossy();
            if score < cfg.score_thr {
                continue;
            }
            let d = [0, 1, 2, 3].map(|c| deltas[(a * 4 + c) * hw + cell].to_f64_lossy());
            cands.push(Detection::new(
                decode_box(anchor, &d),
                score,
                Branch::AnchorBased,
            ));
        }
        all.extend(top_k(cands, cfg.top_k));

        let af_cls = out.af_cls.sample(n);
        let af_box = out.af_box.sample(n);
        let mut cands = Vec::new();
        for p in 0..hw {
            let score = af_cls[p].to_f64_lossy();
            if score < cfg.score_thr {
                continue;
            }
            let d = [0, 1, 2, 3].map(|c| af_box[c * hw + p].to_f64_lossy());
            let bbox = decode_distances(&geo, p / w, p % w, d);
            cands.push(Detection::new(bbox, score, Branch::AnchorFree));
        }
        all.extend(top_k(cands, cfg.top_k));
    }
    let all: Vec<Detection> = all
        .into_iter()
        .map(|mut d| {
            d.bbox = d.bbox.clip(iw, ih);
            d
        })
        .filter(|d| d.bbox.is_valid())
        .collect();
    Ok(apply_nms(all, cfg.nms_iou))
}

/// Greedy NMS over detections, returned in descending score order.
pub fn apply_nms(dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    let boxes: Vec<Rect> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms(&boxes, &scores, iou_thr)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}
