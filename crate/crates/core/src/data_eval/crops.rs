//! Detector training crops cut from full images.

use rand::Rng;

use super::annotations::{AnnotationRecord, DatasetManifest, PixelBox, Split};
use crate::detection_head::Rect;
use crate::detector::DetSample;
use crate::error::{Error, Result};
use crate::imaging::load_rgb8;

/// Images of a manifest held in memory as 8-bit RGB, aligned with `entries`.
pub struct LoadedDataset {
    pub manifest: DatasetManifest,
    pub images: Vec<image::RgbImage>,
}

impl LoadedDataset {
    pub fn load(manifest: DatasetManifest) -> Result<Self> {
        let images = manifest
            .entries
            .iter()
            .map(|e| load_rgb8(&manifest.image_path(e)))
            .collect::<Result<_>>()?;
        Ok(Self { manifest, images })
    }

    /// Indices of the entries in `split`.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.manifest.entries.len())
            .filter(|&i| self.manifest.entries[i].split == split)
            .collect()
    }

    pub fn gts(&self, index: usize) -> Vec<&AnnotationRecord> {
        self.manifest
            .annotations_for(&self.manifest.entries[index].image_id)
            .collect()
    }
}

/// A crop with annotations remapped into crop coordinates.
#[derive(Clone, Debug)]
pub struct TrainingCrop {
    pub image_id: String,
    pub origin: (usize, usize),
    pub image: image::RgbImage,
    pub annotations: Vec<AnnotationRecord>,
}

impl TrainingCrop {
    pub fn to_sample(&self) -> DetSample {
        DetSample {
            image: self.image.clone(),
            boxes: self
                .annotations
                .iter()
                .map(AnnotationRecord::training_box)
                .collect(),
        }
    }
}

/// Keeps annotations whose centroid falls inside the window, shifted into
/// window coordinates with boxes clipped to it.
pub fn remap_annotations<'a>(
    anns: impl IntoIterator<Item = &'a AnnotationRecord>,
    x0: usize,
    y0: usize,
    side: usize,
) -> Vec<AnnotationRecord> {
    let (fx, fy, s) = (x0 as f64, y0 as f64, side as f64);
    anns.into_iter()
        .filter(|a| {
            let (x, y) = a.centroid;
            x >= fx && y >= fy && x < fx + s && y < fy + s
        })
        .map(|a| AnnotationRecord {
            image_id: a.image_id.clone(),
            centroid: (a.centroid.0 - fx, a.centroid.1 - fy),
            bbox: a.bbox.map(|b| {
                PixelBox::new(
                    (b.x1 - fx).max(0.0),
                    (b.y1 - fy).max(0.0),
                    (b.x2 - fx).min(s - 1.0),
                    (b.y2 - fy).min(s - 1.0),
                )
            }),
            mask: None,
        })
        .collect()
}

fn cut(img: &image::RgbImage, x0: usize, y0: usize, side: usize) -> image::RgbImage {
    image::imageops::crop_imm(img, x0 as u32, y0 as u32, side as u32, side as u32).to_image()
}

/// Uniform origin in `[lo, hi]`, clamped to the valid range `[0, max]`.
fn origin_in<R: Rng>(lo: f64, hi: f64, max: usize, rng: &mut R) -> usize {
    let lo = lo.ceil().max(0.0) as usize;
    let hi = (hi.floor().max(0.0) as usize).min(max);
    if lo >= hi {
        lo.min(max)
    } else {
        rng.random_range(lo..=hi)
    }
}

/// One jittered crop per gt containing its whole box, plus
/// `negatives_per_image` uniformly placed crops per image.
pub fn make_training_crops<R: Rng>(
    data: &LoadedDataset,
    split: Split,
    crop: usize,
    negatives_per_image: usize,
    rng: &mut R,
) -> Result<Vec<TrainingCrop>> {
    let mut out = Vec::new();
    for idx in data.indices(split) {
        let img = &data.images[idx];
        let (w, h) = (img.width() as usize, img.height() as usize);
        if crop > w || crop > h {
            return Err(Error::invalid(format!(
                "crop {crop} larger than image {w}x{h}"
            )));
        }
        let id = &data.manifest.entries[idx].image_id;
        let gts = data.gts(idx);
        let emit = |x0: usize, y0: usize| TrainingCrop {
            image_id: id.clone(),
            origin: (x0, y0),
            image: cut(img, x0, y0, crop),
            annotations: remap_annotations(gts.iter().copied(), x0, y0, crop),
        };
        for gt in &gts {
            let r: Rect = gt.training_box();
            let x0 = origin_in(r.x2 - crop as f64, r.x1, w - crop, rng);
            let y0 = origin_in(r.y2 - crop as f64, r.y1, h - crop, rng);
            out.push(emit(x0, y0));
        }
        for _ in 0..negatives_per_image {
            let x0 = rng.random_range(0..=w - crop);
            let y0 = rng.random_range(0..=h - crop);
            out.push(emit(x0, y0));
        }
    }
    Ok(out)
}
