//! Bottleneck residual feature extractor (GN + WS + CBAM) and the feature
//! pyramid built on top of it.

use std::path::Path;

use mitodet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Cbam, DEFAULT_REDUCTION};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvOptions};
use crate::normalization::{default_groups, GroupNorm};

/// Pyramid levels produced by [`Fpn`], lowest first.
pub const PYRAMID_LEVELS: [u32; 5] = [3, 4, 5, 6, 7];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Bottleneck blocks per stage (C2..C5).
    pub blocks: [usize; 4],
    /// Multiplies every convolution width.
    pub width: f64,
    pub gn_groups: usize,
    /// CBAM after stages C2..C5.
    pub cbam: [bool; 4],
    pub cbam_reduction: usize,
    /// Start the last GN scale of every block at zero.
    pub zero_init_residual: bool,
    pub fpn_channels: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            blocks: [3, 4, 6, 3],
            width: 1.0,
            gn_groups: 32,
            cbam: [true; 4],
            cbam_reduction: DEFAULT_REDUCTION,
            zero_init_residual: true,
            fpn_channels: 256,
        }
    }
}

impl BackboneConfig {
    fn scaled(&self, c: usize) -> usize {
        ((c as f64 * self.width).round() as usize).max(1)
    }

    pub fn stem_channels(&self) -> usize {
        self.scaled(64)
    }

    /// Output channels of C2..C5.
    pub fn stage_channels(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| self.scaled(c) * 4)
    }

    fn mid_channels(&self) -> [usize; 4] {
        [64, 128, 256, 512].map(|c| self.scaled(c))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) || self.gn_groups == 0 || self.fpn_channels == 0 {
            return Err(Error::invalid(
                "backbone width, gn_groups and fpn_channels must be positive",
            ));
        }
        if self.blocks.contains(&0) {
            return Err(Error::invalid("every stage needs at least one block"));
        }
        Ok(())
    }
}

struct ConvGn {
    conv: Conv2d,
    gn: GroupNorm,
}

impl ConvGn {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let opts = ConvOptions {
            stride,
            standardize: true,
            ..Default::default()
        };
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, opts, rng)?,
            gn: GroupNorm::new(
                store,
                &format!("{name}.gn"),
                cout,
                default_groups(cout, groups),
            )?,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        self.gn.forward(g, store, y)
    }
}

struct Bottleneck {
    reduce: ConvGn,
    spatial: ConvGn,
    expand: ConvGn,
    shortcut: Option<ConvGn>,
}

impl Bottleneck {
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, store, x)?;
        let h = g.relu(h);
        let h = self.spatial.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.expand.forward(g, store, h)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(g, store, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y))
    }
}

/// The residual trunk producing C2..C5.
pub struct Backbone {
    pub cfg: BackboneConfig,
    stem: ConvGn,
    stages: Vec<Vec<Bottleneck>>,
    cbam: Vec<Option<Cbam>>,
}

impl Backbone {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let gn = cfg.gn_groups;
        let stem_c = cfg.stem_channels();
        let stem = ConvGn::new(store, &format!("{prefix}.stem"), 3, stem_c, 7, 2, gn, rng)?;
        let mids = cfg.mid_channels();
        let outs = cfg.stage_channels();
        let mut cin = stem_c;
        let mut stages = Vec::new();
        let mut cbam = Vec::new();
        for s in 0..4 {
            let mut blocks = Vec::new();
            for b in 0..cfg.blocks[s] {
                let name = format!("{prefix}.layer{}.{b}", s + 1);
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let (mid, out) = (mids[s], outs[s]);
                let block = Bottleneck {
                    reduce: ConvGn::new(store, &format!("{name}.reduce"), cin, mid, 1, 1, gn, rng)?,
                    spatial: ConvGn::new(
                        store,
                        &format!("{name}.spatial"),
                        mid,
                        mid,
                        3,
                        stride,
                        gn,
                        rng,
                    )?,
                    expand: ConvGn::new(store, &format!("{name}.expand"), mid, out, 1, 1, gn, rng)?,
                    shortcut: if b == 0 {
                        Some(ConvGn::new(
                            store,
                            &format!("{name}.shortcut"),
                            cin,
                            out,
                            1,
                            stride,
                            gn,
                            rng,
                        )?)
                    } else {
                        None
                    },
                };
                if cfg.zero_init_residual {
                    let id = block.expand.gn.gamma();
                    store.set(id, Tensor::zeros(store.get(id).shape()))?;
                }
                blocks.push(block);
                cin = out;
            }
            stages.push(blocks);
            cbam.push(if cfg.cbam[s] {
                Some(Cbam::new(
                    store,
                    &format!("{prefix}.cbam{}", s + 2),
                    cin,
                    cfg.cbam_reduction,
                    rng,
                )?)
            } else {
                None
            });
        }
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            stages,
            cbam,
        })
    }

    /// Stem output after the stride-4 max pool.
    pub fn stem_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<Var> {
        let [_, c, h, w] = g.shape(images);
        if c != 3 {
            return Err(Error::invalid(format!(
                "expected 3-channel images, got {c}"
            )));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "input {h}x{w} is not divisible by 32"
            )));
        }
        let x = self.stem.forward(g, store, images)?;
        let x = g.relu(x);
        Ok(g.max_pool2d(x, 3, 2, 1)?)
    }

    /// Returns C2..C5 (strides 4, 8, 16, 32).
    pub fn extract_stages<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<[Var; 4]> {
        let mut x = self.stem_forward(g, store, images)?;
        let mut out = [x; 4];
        for (s, blocks) in self.stages.iter().enumerate() {
            for b in blocks {
                x = b.forward(g, store, x)?;
            }
            if let Some(att) = &self.cbam[s] {
                x = att.forward(g, store, x)?;
            }
            out[s] = x;
        }
        Ok(out)
    }
}

/// Top-down pyramid over C3..C5 plus two extra strided levels.
pub struct Fpn {
    lateral: [Conv2d; 3],
    smooth: [Conv2d; 3],
    p6: Conv2d,
    p7: Conv2d,
    pub channels: usize,
}

impl Fpn {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: [usize; 3],
        channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bias = ConvOptions {
            bias: true,
            ..Default::default()
        };
        let strided = ConvOptions { stride: 2, ..bias };
        let mut conv =
            |name: String, cin, k, o| Conv2d::new(store, &name, cin, channels, k, o, rng);
        let lateral = [
            conv(format!("{prefix}.lateral3"), in_channels[0], 1, bias)?,
            conv(format!("{prefix}.lateral4"), in_channels[1], 1, bias)?,
            conv(format!("{prefix}.lateral5"), in_channels[2], 1, bias)?,
        ];
        let smooth = [
            conv(format!("{prefix}.smooth3"), channels, 3, bias)?,
            conv(format!("{prefix}.smooth4"), channels, 3, bias)?,
            conv(format!("{prefix}.smooth5"), channels, 3, bias)?,
        ];
        let p6 = conv(format!("{prefix}.p6"), in_channels[2], 3, strided)?;
        let p7 = conv(format!("{prefix}.p7"), channels, 3, strided)?;
        Ok(Self {
            lateral,
            smooth,
            p6,
            p7,
            channels,
        })
    }

    /// Fuses C3..C5 into P3..P7.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        c3: Var,
        c4: Var,
        c5: Var,
    ) -> Result<[Var; 5]> {
        let (s3, s4, s5) = (g.shape(c3), g.shape(c4), g.shape(c5));
        if s3[0] != s4[0]
            || s4[0] != s5[0]
            || s4[2] != s3[2].div_ceil(2)
            || s5[2] != s4[2].div_ceil(2)
        {
            return Err(Error::internal(format!(
                "stage maps do not form a pyramid: {s3:?} {s4:?} {s5:?}"
            )));
        }
        let l5 = self.lateral[2].forward(g, store, c5)?;
        let l4 = self.lateral[1].forward(g, store, c4)?;
        let l3 = self.lateral[0].forward(g, store, c3)?;
        let up5 = g.upsample_nearest(l5, s4[2], s4[3]);
        let m4 = g.add(l4, up5)?;
        let up4 = g.upsample_nearest(m4, s3[2], s3[3]);
        let m3 = g.add(l3, up4)?;
        let p3 = self.smooth[0].forward(g, store, m3)?;
        let p4 = self.smooth[1].forward(g, store, m4)?;
        let p5 = self.smooth[2].forward(g, store, l5)?;
        let p6 = self.p6.forward(g, store, c5)?;
        let r6 = g.relu(p6);
        let p7 = self.p7.forward(g, store, r6)?;
        Ok([p3, p4, p5, p6, p7])
    }
}

/// Pyramid maps P3..P7 materialized as tensors.
#[derive(Clone, Debug)]
pub struct PyramidFeatures<T> {
    pub maps: Vec<Tensor<T>>,
}

impl<T: Scalar> PyramidFeatures<T> {
    pub fn level(&self, level: u32) -> Option<&Tensor<T>> {
        PYRAMID_LEVELS
            .iter()
            .position(|&l| l == level)
            .and_then(|i| self.maps.get(i))
    }
}

/// Backbone plus pyramid.
pub struct FeatureExtractor {
    pub backbone: Backbone,
    pub fpn: Fpn,
}

impl FeatureExtractor {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        cfg: &BackboneConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let backbone = Backbone::new(store, "backbone", cfg, rng)?;
        let c = cfg.stage_channels();
        let fpn = Fpn::new(store, "fpn", [c[1], c[2], c[3]], cfg.fpn_channels, rng)?;
        Ok(Self { backbone, fpn })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
    ) -> Result<[Var; 5]> {
        let [_, c3, c4, c5] = self.backbone.extract_stages(g, store, images)?;
        self.fpn.fuse(g, store, c3, c4, c5)
    }

    /// Inference-mode pyramid for a batch of images.
    pub fn pyramid<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        images: &Tensor<T>,
    ) -> Result<PyramidFeatures<T>> {
        let mut g = Graph::inference();
        let x = g.input(images.clone());
        let levels = self.forward(&mut g, store, x)?;
        Ok(PyramidFeatures {
            maps: levels.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}

/// Copies every same-named, same-shaped tensor of an external archive into
/// `store`; returns the names left at their initial values.
pub fn load_pretrained<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<Vec<String>> {
    let (other, _) = ParamStore::<T>::load(path)?;
    Ok(store.load_matching(&other))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn width_multiplier_scales_stage_channels() {
        let cfg = BackboneConfig {
            width: 0.25,
            ..Default::default()
        };
        assert_eq!(cfg.stage_channels(), [64, 128, 256, 512]);
        assert_eq!(
            BackboneConfig::default().stage_channels(),
            [256, 512, 1024, 2048]
        );
    }

    #[test]
    fn rejects_non_divisible_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = BackboneConfig {
            width: 1.0 / 16.0,
            blocks: [1; 4],
            ..Default::default()
        };
        let bb = Backbone::new(&mut store, "b", &cfg, &mut rng).unwrap();
        let mut g = Graph::inference();
        let x = g.input(Tensor::zeros([1, 3, 48, 64]));
        assert!(bb.extract_stages(&mut g, &store, x).is_err());
    }
}
