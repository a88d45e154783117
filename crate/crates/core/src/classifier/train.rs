//! Patch sets, augmentation and the classifier training loop.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mitodet_tensor::{Adam, AdamConfig, Graph, ParamStore, Tensor};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{extract_patch, PatchClassifier};
use crate::data_eval::{AnnotationRecord, LoadedDataset, Split};
use crate::detector::lr_at;
use crate::error::{Error, Result};
use crate::imaging::{
    batch_tensor, crop_reflect, dihedral_image, load_rgb8, resize_bilinear, save_png, RgbImage,
};
use crate::nn::apply_buffer_updates;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchProvenance {
    GtPositive,
    /// Random location away from every annotation.
    Background,
    /// A first-stage detection that matched no annotation.
    DetectorFp,
}

impl PatchProvenance {
    pub fn is_mitosis(self) -> bool {
        self == PatchProvenance::GtPositive
    }
}

impl fmt::Display for PatchProvenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchProvenance::GtPositive => "gt-positive",
            PatchProvenance::Background => "background",
            PatchProvenance::DetectorFp => "detector-fp",
        })
    }
}

impl FromStr for PatchProvenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt-positive" => Ok(Self::GtPositive),
            "background" => Ok(Self::Background),
            "detector-fp" => Ok(Self::DetectorFp),
            other => Err(Error::invalid(format!(
                "unknown patch provenance '{other}'"
            ))),
        }
    }
}

/// A square crop with its label. The label always follows the provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSample {
    pub pixels: image::RgbImage,
    pub provenance: PatchProvenance,
    pub source_image: String,
    /// Crop center in source pixel coordinates.
    pub center: (f64, f64),
}

impl PatchSample {
    pub fn cut(
        src: &image::RgbImage,
        id: &str,
        cx: f64,
        cy: f64,
        side: usize,
        provenance: PatchProvenance,
    ) -> Self {
        Self {
            pixels: extract_patch(src, cx, cy, side).to_rgb8(),
            provenance,
            source_image: id.to_string(),
            center: (cx, cy),
        }
    }

    pub fn is_mitosis(&self) -> bool {
        self.provenance.is_mitosis()
    }
}

pub const PATCH_MANIFEST: &str = "patches.csv";
const PATCH_HEADER: [&str; 6] = ["path", "label", "provenance", "source_image", "cx", "cy"];

/// Writes `<dir>/patches/<n>.png` and `<dir>/patches.csv`.
pub fn write_patch_set(dir: &Path, samples: &[PatchSample]) -> Result<()> {
    std::fs::create_dir_all(dir.join("patches"))?;
    let mut w = csv::Writer::from_path(dir.join(PATCH_MANIFEST))?;
    w.write_record(PATCH_HEADER)?;
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("patches/{i:06}.png");
        save_png(&s.pixels, &dir.join(&rel))?;
        w.write_record([
            rel,
            u8::from(s.is_mitosis()).to_string(),
            s.provenance.to_string(),
            s.source_image.clone(),
            format!("{:.2}", s.center.0),
            format!("{:.2}", s.center.1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_patch_set(dir: &Path) -> Result<Vec<PatchSample>> {
    let mpath = dir.join(PATCH_MANIFEST);
    let mut rdr = csv::Reader::from_path(&mpath)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |m: String| Error::format(&mpath, format!("line {line}: {m}"));
        if rec.len() != PATCH_HEADER.len() {
            return Err(bad("expected 6 fields".into()));
        }
        let num = |k: usize| {
            rec[k]
                .trim()
                .parse::<f64>()
                .map_err(|_| bad(format!("bad number '{}'", &rec[k])))
        };
        let provenance: PatchProvenance = rec[2]
            .trim()
            .parse()
            .map_err(|e: Error| bad(e.to_string()))?;
        let label = rec[1].trim();
        if label != u8::from(provenance.is_mitosis()).to_string() {
            return Err(bad(format!(
                "label {label} contradicts provenance {provenance}"
            )));
        }
        let pixels = load_rgb8(&dir.join(PathBuf::from(rec[0].trim())))?;
        if pixels.width() != pixels.height() {
            return Err(bad("patch is not square".into()));
        }
        out.push(PatchSample {
            pixels,
            provenance,
            source_image: rec[3].trim().to_string(),
            center: (num(4)?, num(5)?),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSetConfig {
    pub background_per_image: usize,
    /// Background centers keep at least this distance from every centroid.
    pub min_background_distance: f64,
    /// Target positives per negative; positives are repeated to reach it.
    pub pos_neg_ratio: f64,
}

impl Default for TrainingSetConfig {
    fn default() -> Self {
        Self {
            background_per_image: 10,
            min_background_distance: 20.0,
            pos_neg_ratio: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SamplingSummary {
    /// Distinct annotated objects.
    pub annotations: usize,
    pub positives: usize,
    pub background: usize,
    pub detector_fp: usize,
    pub skipped_images: usize,
}

/// Center for one positive draw: a uniform mask pixel, else a uniform pixel
/// of the box, else the centroid.
fn positive_center<R: Rng>(a: &AnnotationRecord, rng: &mut R) -> (f64, f64) {
    if let Some(mask) = a.mask.as_ref().filter(|m| !m.is_empty()) {
        let &(x, y) = mask.choose(rng).unwrap();
        return (x as f64, y as f64);
    }
    match a.bbox {
        Some(b) => (
            rng.random_range(b.x1.ceil()..=b.x2.floor().max(b.x1.ceil())),
            rng.random_range(b.y1.ceil()..=b.y2.floor().max(b.y1.ceil())),
        ),
        None => a.centroid,
    }
}

/// Background and detector-FP negatives, then positives repeated until
/// `#pos = round(pos_neg_ratio · #neg)`.
pub fn build_training_set<R: Rng>(
    data: &LoadedDataset,
    split: Split,
    detector_fps: &[PatchSample],
    crop: usize,
    cfg: &TrainingSetConfig,
    rng: &mut R,
) -> Result<(Vec<PatchSample>, SamplingSummary)> {
    if !(cfg.pos_neg_ratio >= 0.0) || cfg.min_background_distance < 0.0 {
        return Err(Error::invalid(
            "pos_neg_ratio and min_background_distance must be non-negative",
        ));
    }
    let mut summary = SamplingSummary::default();
    let mut negatives = Vec::new();
    let mut pool: Vec<(usize, &AnnotationRecord)> = Vec::new();
    for idx in data.indices(split) {
        let img = &data.images[idx];
        let id = &data.manifest.entries[idx].image_id;
        let (w, h) = (img.width() as usize, img.height() as usize);
        if crop > w || crop > h {
            log::warn!("{id}: {w}x{h} is smaller than the {crop}-px crop; skipped");
            summary.skipped_images += 1;
            continue;
        }
        let gts = data.gts(idx);
        pool.extend(gts.iter().map(|a| (idx, *a)));
        let mut placed = 0;
        let mut tries = 0;
        while placed < cfg.background_per_image && tries < 1000 * cfg.background_per_image {
            tries += 1;
            let x = rng.random_range(0..w) as f64;
            let y = rng.random_range(0..h) as f64;
            let d = cfg.min_background_distance;
            if gts
                .iter()
                .any(|a| (a.centroid.0 - x).hypot(a.centroid.1 - y) < d)
            {
                continue;
            }
            negatives.push(PatchSample::cut(
                img,
                id,
                x,
                y,
                crop,
                PatchProvenance::Background,
            ));
            placed += 1;
        }
        summary.background += placed;
    }
    for fp in detector_fps {
        if fp.provenance != PatchProvenance::DetectorFp {
            return Err(Error::invalid(
                "hard-negative set contains a non detector-fp patch",
            ));
        }
        negatives.push(fp.clone());
    }
    summary.detector_fp = detector_fps.len();
    summary.annotations = pool.len();
    let target = (cfg.pos_neg_ratio * negatives.len() as f64).round() as usize;
    let mut positives = Vec::with_capacity(target);
    if !pool.is_empty() {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        while positives.len() < target {
            order.shuffle(rng);
            for &k in order.iter().take(target - positives.len()) {
                let (idx, a) = pool[k];
                let (cx, cy) = positive_center(a, rng);
                let id = &data.manifest.entries[idx].image_id;
                positives.push(PatchSample::cut(
                    &data.images[idx],
                    id,
                    cx,
                    cy,
                    crop,
                    PatchProvenance::GtPositive,
                ));
            }
        }
    }
    summary.positives = positives.len();
    positives.extend(negatives);
    Ok((positives, summary))
}

/// One random draw of [`augment`]'s parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentDraw {
    /// Dihedral transform index (90° rotations and flips).
    pub dihedral: u8,
    pub shift: (i32, i32),
    /// Sub-window `(x0, y0, side)` resized back to the full patch.
    pub window: (usize, usize, usize),
    pub contrast: f32,
    pub saturation: f32,
    pub noise_sigma: f32,
}

pub const MAX_SHIFT: i32 = 8;

impl AugmentDraw {
    pub fn identity(side: usize) -> Self {
        Self {
            dihedral: 0,
            shift: (0, 0),
            window: (0, 0, side),
            contrast: 1.0,
            saturation: 1.0,
            noise_sigma: 0.0,
        }
    }

    pub fn sample<R: Rng>(side: usize, rng: &mut R) -> Self {
        let w = rng.random_range(((side as f64 * 0.8).ceil() as usize).max(1)..=side);
        Self {
            dihedral: rng.random_range(0..8),
            shift: (
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
                rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
            ),
            window: (
                rng.random_range(0..=side - w),
                rng.random_range(0..=side - w),
                w,
            ),
            contrast: rng.random_range(0.8..=1.2),
            saturation: rng.random_range(0.8..=1.2),
            noise_sigma: rng.random_range(0.0..=0.02),
        }
    }
}

pub fn apply_augment<R: Rng>(img: &RgbImage, d: &AugmentDraw, rng: &mut R) -> RgbImage {
    let n = img.width;
    let mut out = dihedral_image(img, d.dihedral);
    if d.shift != (0, 0) {
        out = crop_reflect(&out, d.shift.0 as isize, d.shift.1 as isize, n, n);
    }
    let (x0, y0, w) = d.window;
    if w != n {
        out = resize_bilinear(&crop_reflect(&out, x0 as isize, y0 as isize, w, w), n, n);
    }
    if d.contrast != 1.0 {
        let mean = out.data.iter().sum::<f32>() / out.data.len() as f32;
        out.data
            .iter_mut()
            .for_each(|v| *v = mean + d.contrast * (*v - mean));
    }
    if d.saturation != 1.0 {
        let hw = n * n;
        for p in 0..hw {
            let gray = (out.data[p] + out.data[hw + p] + out.data[2 * hw + p]) / 3.0;
            for c in 0..3 {
                let v = &mut out.data[c * hw + p];
                *v = gray + d.saturation * (*v - gray);
            }
        }
    }
    if d.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, d.noise_sigma).unwrap();
        out.data.iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    out.clamp01();
    out
}

/// Random 90° rotation/flip, ≤ 8 px reflect-padded shift, crop-and-resize,
/// ±20% contrast and saturation, and Gaussian noise; output in `[0, 1]`.
pub fn augment<R: Rng>(img: &RgbImage, rng: &mut R) -> RgbImage {
    let d = AugmentDraw::sample(img.width, rng);
    apply_augment(img, &d, rng)
}

/// Mean binary cross-entropy on logits and its gradient.
pub fn bce_with_logits(logits: &[f64], labels: &[bool]) -> (f64, Vec<f64>) {
    let n = labels.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            // softplus(z) − y·z, computed stably
            loss += z.max(0.0) + (-z.abs()).exp().ln_1p() - if y { z } else { 0.0 };
            (1.0 / (1.0 + (-z).exp()) - f64::from(u8::from(y))) / n
        })
        .collect();
    (loss / n, grad)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClsTrainConfig {
    pub steps: u64,
    /// At least 32 keeps batch statistics stable.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: u64,
    pub augment: bool,
    pub training_set: TrainingSetConfig,
}

impl Default for ClsTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup: 100,
            augment: true,
            training_set: TrainingSetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClsStepLog {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub positives: usize,
    pub batch: usize,
}

/// Runs optimizer steps `opt.step_count()+1 ..= min(until, cfg.steps)`.
/// Each batch alternates positive and negative draws (uniform within a
/// class); a single-class set falls back to uniform draws.
#[allow(clippy::too_many_arguments)]
pub fn train_classifier<R: Rng>(
    model: &PatchClassifier,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    samples: &[PatchSample],
    cfg: &ClsTrainConfig,
    until: u64,
    rng: &mut R,
    mut log: impl FnMut(&ClsStepLog) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no classifier training patches"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let size = model.cfg.input_size;
    // Batches alternate classes so every batch is balanced to within one.
    let (positives, negatives): (Vec<&PatchSample>, Vec<&PatchSample>) =
        samples.iter().partition(|s| s.is_mitosis());
    let mut step = opt.step_count();
    while step < cfg.steps.min(until) {
        step += 1;
        let lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps);
        opt.cfg = AdamConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..opt.cfg
        };
        let mut patches = Vec::with_capacity(cfg.batch_size);
        let mut labels = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            let s = match (k % 2 == 0, &positives[..], &negatives[..]) {
                (_, [], _) | (_, _, []) => samples.choose(rng).unwrap(),
                (true, pos, _) => *pos.choose(rng).unwrap(),
                (false, _, neg) => *neg.choose(rng).unwrap(),
            };
            let mut p = RgbImage::from_source(&s.pixels);
            if cfg.augment {
                p = augment(&p, rng);
            }
            patches.push(resize_bilinear(&p, size, size));
            labels.push(s.is_mitosis());
        }
        let refs: Vec<&RgbImage> = patches.iter().collect();
        let mut g = Graph::training();
        let x = g.input(batch_tensor::<f32>(&refs)?);
        let z = model.logits(&mut g, store, x)?;
        let zv: Vec<f64> = g.value(z).data().iter().map(|v| f64::from(*v)).collect();
        let (loss, grad) = bce_with_logits(&zv, &labels);
        if !loss.is_finite() {
            return Err(Error::internal(format!(
                "non-finite classifier loss at step {step}"
            )));
        }
        let correct = zv
            .iter()
            .zip(&labels)
            .filter(|(z, y)| (**z > 0.0) == **y)
            .count();
        let gz = Tensor::new(g.shape(z), grad.iter().map(|&v| v as f32).collect())?;
        let root = g.scalar_with_grads(&[z], loss as f32, vec![gz]);
        g.backward(root)?;
        apply_buffer_updates(&mut g, store)?;
        let grads = g.take_param_grads();
        let grad_norm = opt.step(store, &grads);
        log(&ClsStepLog {
            step,
            lr,
            grad_norm,
            loss,
            accuracy: correct as f64 / labels.len() as f64,
            positives: labels.iter().filter(|&&y| y).count(),
            batch: labels.len(),
        })?;
    }
    Ok(())
}
