//! The first-stage detector: feature extractor, hybrid head and training.

use mitodet_tensor::{Adam, AdamConfig, Graph, ParamStore, Scalar, Tensor, Var};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureExtractor, PYRAMID_LEVELS};
use crate::detection_head::{
    detection_loss, postprocess, Detection, DetectionHead, HeadConfig, HeadOutputs, LevelGeom,
    LevelVars, LossBreakdown, LossConfig, PostprocessConfig, Rect,
};
use crate::error::{Error, Result};
use crate::imaging::{batch_tensor, dihedral_image, dihedral_point, RgbImage};
use crate::nn::apply_buffer_updates;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}

pub struct Detector {
    pub cfg: DetectorConfig,
    pub features: FeatureExtractor,
    pub head: DetectionHead,
}

impl Detector {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &DetectorConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let features = FeatureExtractor::new(store, &cfg.backbone, rng)?;
        let head = DetectionHead::new(store, "head", cfg.backbone.fpn_channels, &cfg.head, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            features,
            head,
        })
    }

    /// Head variables for every pyramid level.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Vec<(LevelGeom, LevelVars)>> {
        let pyramid = self.features.forward(g, store, images)?;
        let mut out = Vec::with_capacity(pyramid.len());
        for (&level, p) in PYRAMID_LEVELS.iter().zip(pyramid) {
            let [_, _, h, w] = g.shape(p);
            out.push((
                LevelGeom::new(level, h, w),
                self.head.forward_level(g, store, p)?,
            ));
        }
        Ok(out)
    }

    pub fn loss<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        gts: &[Vec<Rect>],
        cfg: &LossConfig,
    ) -> Result<(Var, LossBreakdown)> {
        let levels = self.forward(g, store, images)?;
        detection_loss(g, &levels, gts, cfg)
    }

    /// Inference-mode head maps with probabilities.
    pub fn head_outputs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<HeadOutputs<T>> {
        let mut g = Graph::inference();
        let x = g.input(images.clone());
        let pyramid = self.features.forward(&mut g, store, x)?;
        let levels: Vec<(u32, Var)> = PYRAMID_LEVELS.iter().copied().zip(pyramid).collect();
        self.head.outputs(&mut g, store, &levels)
    }

    /// Detections per image; all images must share a size divisible by 32.
    pub fn detect<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &[&RgbImage],
        cfg: &PostprocessConfig,
    ) -> Result<Vec<Vec<Detection>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let x = batch_tensor::<T>(images)?;
        let outputs = self.head_outputs(store, &x)?;
        let size = (images[0].width, images[0].height);
        (0..images.len())
            .map(|n| postprocess(&outputs, n, size, cfg))
            .collect()
    }
}

/// A square training crop with its boxes in crop coordinates.
#[derive(Clone, Debug)]
pub struct DetSample {
    pub image: image::RgbImage,
    pub boxes: Vec<Rect>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetTrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup: u64,
    /// Random flips and 90° rotations.
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for DetTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-4,
            warmup: 100,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

/// Learning rate at `step` (1-based): linear warm-up, then cosine decay to 5%.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if warmup > 0 && step <= warmup {
        return base * step as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let t = ((step - warmup) as f64 / span).min(1.0);
    base * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetStepLog {
    pub step: u64,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
}

fn augmented(sample: &DetSample, t: u8) -> (RgbImage, Vec<Rect>) {
    let img = RgbImage::from_source(&sample.image);
    if t == 0 {
        return (img, sample.boxes.clone());
    }
    let side = img.width as f64;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| {
            let (x1, y1) = dihedral_point(t, b.x1, b.y1, side);
            let (x2, y2) = dihedral_point(t, b.x2, b.y2, side);
            Rect::new(x1.min(x2), y1.min(y2), x1.max(x2), y1.max(y2))
        })
        .collect();
    (dihedral_image(&img, t), boxes)
}

/// Runs optimizer steps `opt.step_count()+1 ..= min(until, cfg.steps)`; the
/// schedule always spans `cfg.steps`, so training can proceed in chunks.
#[allow(clippy::too_many_arguments)]
pub fn train_detector<R: Rng>(
    det: &Detector,
    store: &mut ParamStore<f32>,
    opt: &mut Adam<f32>,
    samples: &[DetSample],
    cfg: &DetTrainConfig,
    until: u64,
    rng: &mut R,
    mut log: impl FnMut(&DetStepLog) -> Result<()>,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::invalid("no detector training samples"));
    }
    let side = samples[0].image.width();
    if samples
        .iter()
        .any(|s| s.image.width() != side || s.image.height() != side)
    {
        return Err(Error::invalid(
            "detector training crops must be square and equally sized",
        ));
    }
    let mut step = opt.step_count();
    while step < cfg.steps.min(until) {
        step += 1;
        let lr = lr_at(step, cfg.lr, cfg.warmup, cfg.steps);
        opt.cfg = AdamConfig {
            lr,
            weight_decay: cfg.weight_decay,
            ..opt.cfg
        };
        let batch: Vec<&DetSample> = (0..cfg.batch_size)
            .map(|_| samples.choose(rng).unwrap())
            .collect();
        let mut images = Vec::with_capacity(batch.len());
        let mut gts = Vec::with_capacity(batch.len());
        for s in batch {
            let t = if cfg.augment {
                rng.random_range(0..8u8)
            } else {
                0
            };
            let (img, boxes) = augmented(s, t);
            images.push(img);
            gts.push(boxes);
        }
        let refs: Vec<&RgbImage> = images.iter().collect();
        let x = batch_tensor::<f32>(&refs)?;
        let mut g = Graph::training();
        let xv = g.input(x);
        let (loss, breakdown) = det.loss(&mut g, store, xv, &gts, &cfg.loss)?;
        if !breakdown.total().is_finite() {
            return Err(Error::internal(format!(
                "non-finite detector loss at step {step}"
            )));
        }
        g.backward(loss)?;
        apply_buffer_updates(&mut g, store)?;
        let grads = g.take_param_grads();
        let grad_norm = opt.step(store, &grads);
        log(&DetStepLog {
            step,
            lr,
            grad_norm,
            loss: breakdown,
        })?;
    }
    Ok(())
}
