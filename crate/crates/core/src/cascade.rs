//! Two-stage inference: tiled detection over the whole field, then patch
//! classification of every candidate.

use std::path::Path;

use mitodet_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::classifier::{network_patch, PatchClassifier};
use crate::detection_head::{apply_nms, Branch, Detection, PostprocessConfig, Rect};
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imaging::{crop_reflect, draw_rect, RgbImage};
use mitodet_tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CascadeConfig {
    /// Detector tile side; a multiple of 32.
    pub tile: usize,
    /// Step between tile origins.
    pub tile_stride: usize,
    /// Tiles per detector forward pass.
    pub tile_batch: usize,
    pub detector: PostprocessConfig,
    /// Candidates with a classifier probability below this are dropped.
    pub cls_threshold: f64,
    pub cls_batch: usize,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            tile: 224,
            tile_stride: 112,
            tile_batch: 4,
            detector: PostprocessConfig::default(),
            cls_threshold: 0.5,
            cls_batch: 32,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tile == 0 || !self.tile.is_multiple_of(32) {
            return Err(Error::invalid("tile must be a positive multiple of 32"));
        }
        if self.tile_stride == 0 || self.tile_stride > self.tile {
            return Err(Error::invalid("tile_stride must lie in 1..=tile"));
        }
        if !(0.0..=1.0).contains(&self.cls_threshold) {
            return Err(Error::invalid("cls_threshold must lie in [0, 1]"));
        }
        self.detector.validate()
    }
}

/// Tile origins covering `len ≥ tile` with the last tile flush to the end.
pub fn tile_origins(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    if len <= tile {
        return vec![0];
    }
    let mut out: Vec<usize> = (0..)
        .map(|k| k * stride)
        .take_while(|&o| o + tile < len)
        .collect();
    out.push(len - tile);
    out
}

/// First-stage detections over a full image, merged across tiles by NMS.
pub fn detect_tiled<T: Scalar>(
    det: &Detector,
    store: &ParamStore<T>,
    img: &RgbImage,
    cfg: &CascadeConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if img.width < cfg.tile || img.height < cfg.tile {
        return Err(Error::invalid(format!(
            "{}x{} image is smaller than the {}-px tile",
            img.width, img.height, cfg.tile
        )));
    }
    let xs = tile_origins(img.width, cfg.tile, cfg.tile_stride);
    let ys = tile_origins(img.height, cfg.tile, cfg.tile_stride);
    let origins: Vec<(usize, usize)> = ys
        .iter()
        .flat_map(|&y| xs.iter().map(move |&x| (x, y)))
        .collect();
    let (w, h) = (img.width as f64, img.height as f64);
    let mut all = Vec::new();
    for chunk in origins.chunks(cfg.tile_batch.max(1)) {
        let tiles: Vec<RgbImage> = chunk
            .iter()
            .map(|&(x, y)| crop_reflect(img, x as isize, y as isize, cfg.tile, cfg.tile))
            .collect();
        let refs: Vec<&RgbImage> = tiles.iter().collect();
        for (&(x0, y0), dets) in chunk.iter().zip(det.detect(store, &refs, &cfg.detector)?) {
            for d in dets {
                let bbox = d.bbox.translate(x0 as f64, y0 as f64).clip(w, h);
                if bbox.is_valid() {
                    all.push(Detection { bbox, ..d });
                }
            }
        }
    }
    Ok(apply_nms(all, cfg.detector.nms_iou))
}

/// Attaches classifier probabilities to `dets` (in order).
pub fn score_candidates<T: Scalar>(
    cls: &PatchClassifier,
    store: &ParamStore<T>,
    img: &RgbImage,
    dets: &[Detection],
    batch: usize,
) -> Result<Vec<Detection>> {
    let patches: Vec<RgbImage> = dets
        .iter()
        .map(|d| {
            let (cx, cy) = pixel_center(&d.bbox);
            network_patch(img, cx, cy, cls.cfg.test_crop, cls.cfg.input_size)
        })
        .collect();
    let probs = cls.classify(store, &patches, batch)?;
    Ok(dets
        .iter()
        .zip(probs)
        .map(|(d, p)| Detection {
            cls_score: Some(p),
            ..*d
        })
        .collect())
}

/// Center of a box in pixel-index coordinates (pixel `x` covers `[x, x+1)`).
pub fn pixel_center(b: &Rect) -> (f64, f64) {
    let (x, y) = b.center();
    (x - 0.5, y - 0.5)
}

/// Keeps scored candidates whose classifier probability reaches `threshold`,
/// ranked by that probability (stable, so ties keep stage-one order).
pub fn refine(scored: &[Detection], threshold: f64) -> Vec<Detection> {
    let mut out: Vec<Detection> = scored
        .iter()
        .filter(|d| d.cls_score.is_some_and(|p| p >= threshold))
        .copied()
        .collect();
    out.sort_by(|a, b| b.cls_score.unwrap().total_cmp(&a.cls_score.unwrap()));
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CascadeOutput {
    pub stage_one: Vec<Detection>,
    /// Stage-one detections with classifier scores, same order.
    pub scored: Vec<Detection>,
    pub final_detections: Vec<Detection>,
}

pub fn run_cascade<T: Scalar>(
    det: &Detector,
    det_store: &ParamStore<T>,
    cls: &PatchClassifier,
    cls_store: &ParamStore<T>,
    img: &RgbImage,
    cfg: &CascadeConfig,
) -> Result<CascadeOutput> {
    let stage_one = detect_tiled(det, det_store, img, cfg)?;
    let scored = score_candidates(cls, cls_store, img, &stage_one, cfg.cls_batch)?;
    let final_detections = refine(&scored, cfg.cls_threshold);
    Ok(CascadeOutput {
        stage_one,
        scored,
        final_detections,
    })
}

/// One row of a detection table.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRow {
    pub image_id: String,
    pub det: Detection,
}

pub const DETECTION_HEADER: [&str; 7] =
    ["image_id", "x1", "y1", "x2", "y2", "det_score", "cls_score"];

/// Boxes with two decimals, scores with six; `cls_score` is blank for
/// first-stage rows.
pub fn write_detections(path: &Path, rows: &[DetectionRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DETECTION_HEADER)?;
    for r in rows {
        let b = r.det.bbox;
        w.write_record([
            r.image_id.clone(),
            format!("{:.2}", b.x1),
            format!("{:.2}", b.y1),
            format!("{:.2}", b.x2),
            format!("{:.2}", b.y2),
            format!("{:.6}", r.det.score),
            r.det
                .cls_score
                .map(|p| format!("{p:.6}"))
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a detection table; the branch is not stored and comes back as
/// anchor-free.
pub fn read_detections(path: &Path) -> Result<Vec<DetectionRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(DETECTION_HEADER.iter().copied()) {
        return Err(Error::format(
            path,
            format!("expected header {}", DETECTION_HEADER.join(",")),
        ));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != DETECTION_HEADER.len() {
            return Err(Error::format(
                path,
                format!("line {line}: expected 7 fields"),
            ));
        }
        let num = |k: usize| {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::format(path, format!("line {line}: bad number '{}'", &rec[k])))
        };
        let cls_score = if rec[6].trim().is_empty() {
            None
        } else {
            Some(num(6)?)
        };
        out.push(DetectionRow {
            image_id: rec[0].trim().to_string(),
            det: Detection {
                bbox: Rect::new(num(1)?, num(2)?, num(3)?, num(4)?),
                score: num(5)?,
                cls_score,
                source: Branch::AnchorFree,
            },
        });
    }
    Ok(out)
}

pub const OVERLAY_COLOR: [u8; 3] = [0, 255, 0];
pub const OVERLAY_THICKNESS: u32 = 2;

/// Copy of `img` with every detection outlined.
pub fn overlay(img: &image::RgbImage, dets: &[Detection]) -> image::RgbImage {
    let mut out = img.clone();
    for d in dets {
        let b = d.bbox;
        draw_rect(
            &mut out,
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            OVERLAY_COLOR,
            OVERLAY_THICKNESS,
        );
    }
    out
}
