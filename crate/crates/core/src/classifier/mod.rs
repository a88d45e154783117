//! Second-stage patch classifier: a basic-block residual network with batch
//! normalization that scores candidate patches as mitosis or not.

mod train;

pub use train::{
    apply_augment, augment, bce_with_logits, build_training_set, read_patch_set, train_classifier,
    write_patch_set, AugmentDraw, ClsStepLog, ClsTrainConfig, PatchProvenance, PatchSample,
    SamplingSummary, TrainingSetConfig, PATCH_MANIFEST,
};

use std::path::PathBuf;

use mitodet_tensor::{Graph, ParamStore, Scalar, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detection_head::losses::sigmoid;
use crate::error::{Error, Result};
use crate::imaging::{batch_tensor, crop_centered, resize_bilinear, PixelSource, RgbImage};
use crate::nn::{BatchNorm, Conv2d, ConvOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    /// Basic blocks per stage.
    pub blocks: [usize; 4],
    pub width: f64,
    /// Network input side; every crop is resized to it.
    pub input_size: usize,
    /// Crop side for training patches, in source pixels.
    pub train_crop: usize,
    /// Crop side around candidates at inference.
    pub test_crop: usize,
    /// Optional parameter archive loaded over the random init.
    pub pretrained: Option<PathBuf>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            blocks: [3, 4, 6, 3],
            width: 1.0,
            input_size: 128,
            train_crop: 64,
            test_crop: 112,
            pretrained: None,
        }
    }
}

impl ClassifierConfig {
    pub fn stage_channels(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| ((c as f64 * self.width).round() as usize).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0)
            || self.train_crop == 0
            || self.test_crop == 0
            || self.input_size < 32
        {
            return Err(Error::invalid(
                "classifier width and crop sides must be positive, input_size >= 32",
            ));
        }
        if self.blocks.contains(&0) {
            return Err(Error::invalid(
                "every classifier stage needs at least one block",
            ));
        }
        Ok(())
    }
}

struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let opts = ConvOptions {
            stride,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, opts, rng)?,
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.bn.forward(g, store, y)
    }
}

struct BasicBlock {
    a: ConvBn,
    b: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.a.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.b.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

pub struct PatchClassifier {
    pub cfg: ClassifierConfig,
    stem: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    fc: Conv2d,
}

impl PatchClassifier {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &ClassifierConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let ch = cfg.stage_channels();
        let stem = ConvBn::new(store, "cls.stem", 3, ch[0], 7, 2, rng)?;
        let mut cin = ch[0];
        let mut stages = Vec::new();
        for (s, &n) in cfg.blocks.iter().enumerate() {
            let mut blocks = Vec::new();
            for b in 0..n {
                let name = format!("cls.layer{}.{b}", s + 1);
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let cout = ch[s];
                blocks.push(BasicBlock {
                    a: ConvBn::new(store, &format!("{name}.a"), cin, cout, 3, stride, rng)?,
                    b: ConvBn::new(store, &format!("{name}.b"), cout, cout, 3, 1, rng)?,
                    shortcut: if stride != 1 || cin != cout {
                        Some(ConvBn::new(
                            store,
                            &format!("{name}.shortcut"),
                            cin,
                            cout,
                            1,
                            stride,
                            rng,
                        )?)
                    } else {
                        None
                    },
                });
                cin = cout;
            }
            stages.push(blocks);
        }
        let fc_opts = ConvOptions {
            bias: true,
            init_std: Some(0.01),
            ..Default::default()
        };
        let fc = Conv2d::new(store, "cls.fc", cin, 1, 1, fc_opts, rng)?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            fc,
        })
    }

    /// Mitosis logits `[N, 1, 1, 1]`.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Var> {
        let [_, c, h, w] = g.shape(images);
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(Error::invalid(format!(
                "classifier expects 3x{s}x{s} patches, got {c}x{h}x{w}",
                s = self.cfg.input_size
            )));
        }
        let h = self.stem.forward(g, store, images)?;
        let h = g.relu(h);
        let mut h = g.max_pool2d(h, 3, 2, 1)?;
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, store, h)?;
            }
        }
        let pooled = g.global_avg_pool(h);
        self.fc.forward(g, store, pooled)
    }

    /// Mitosis probabilities for patches already at `input_size`.
    pub fn classify<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &[RgbImage],
        batch: usize,
    ) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(batch.max(1)) {
            let refs: Vec<&RgbImage> = chunk.iter().collect();
            let mut g = Graph::inference();
            let x = g.input(batch_tensor::<T>(&refs)?);
            let z = self.logits(&mut g, store, x)?;
            out.extend(g.value(z).data().iter().map(|v| sigmoid(v.to_f64_lossy())));
        }
        Ok(out)
    }
}

/// `side × side` window centered on `(cx, cy)`, reflect padded.
pub fn extract_patch(src: &impl PixelSource, cx: f64, cy: f64, side: usize) -> RgbImage {
    crop_centered(src, cx, cy, side)
}

/// Crop around `(cx, cy)` resized to the network input.
pub fn network_patch(
    src: &impl PixelSource,
    cx: f64,
    cy: f64,
    crop: usize,
    input_size: usize,
) -> RgbImage {
    resize_bilinear(&extract_patch(src, cx, cy, crop), input_size, input_size)
}

/// Parameters and layout for a classifier config, with the optional
/// pretrained archive applied.
pub fn build_classifier<R: Rng>(
    cfg: &ClassifierConfig,
    rng: &mut R,
) -> Result<(PatchClassifier, ParamStore<f32>, Vec<String>)> {
    let mut store = ParamStore::new();
    let model = PatchClassifier::new(&mut store, cfg, rng)?;
    let untouched = match &cfg.pretrained {
        Some(p) => {
            let (src, _) = ParamStore::<f32>::load(p)?;
            store.load_matching(&src)
        }
        None => Vec::new(),
    };
    Ok((model, store, untouched))
}
