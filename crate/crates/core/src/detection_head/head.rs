use mitodet_tensor::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::anchors::ANCHORS_PER_CELL;
use crate::error::Result;
use crate::nn::{Conv2d, ConvOptions};
use crate::normalization::{default_groups, GroupNorm};

/// Number of foreground classes.
pub const NUM_CLASSES: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Width of the shared towers.
    pub channels: usize,
    pub num_convs: usize,
    pub gn_groups: usize,
    /// Initial foreground probability.
    pub prior: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            channels: 256,
            num_convs: 4,
            gn_groups: 32,
            prior: 0.01,
        }
    }
}

/// Graph handles for one pyramid level. Class maps are logits.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub cls_logits: Var,
    pub box_deltas: Var,
    pub af_logits: Var,
    /// Side distances in stride units (already exponentiated).
    pub af_dist: Var,
}

/// Materialized head maps for one level; class maps hold probabilities.
#[derive(Clone, Debug)]
pub struct LevelOutputs<T> {
    pub level: u32,
    pub cls: Tensor<T>,
    pub boxes: Tensor<T>,
    pub af_cls: Tensor<T>,
    pub af_box: Tensor<T>,
}

pub type HeadOutputs<T> = Vec<LevelOutputs<T>>;

struct Tower {
    layers: Vec<(Conv2d, GroupNorm)>,
}

impl Tower {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        mut x: Var,
    ) -> Result<Var> {
        for (conv, gn) in &self.layers {
            x = conv.forward(g, store, x)?;
            x = gn.forward(g, store, x)?;
            x = g.relu(x);
        }
        Ok(x)
    }
}

/// Anchor-based subnets plus the anchor-free branch, shared across levels.
pub struct DetectionHead {
    pub cfg: HeadConfig,
    cls_tower: Tower,
    box_tower: Tower,
    cls_out: Conv2d,
    box_out: Conv2d,
    af_cls_out: Conv2d,
    af_box_out: Conv2d,
}

impl DetectionHead {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_channels: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.channels;
        let opts = ConvOptions {
            bias: true,
            init_std: Some(0.01),
            ..Default::default()
        };
        let tower = |name: &str, store: &mut ParamStore<T>, rng: &mut R| -> Result<Tower> {
            let mut layers = Vec::new();
            for i in 0..cfg.num_convs {
                let cin = if i == 0 { in_channels } else { c };
                let conv = Conv2d::new(
                    store,
                    &format!("{prefix}.{name}.{i}.conv"),
                    cin,
                    c,
                    3,
                    opts,
                    rng,
                )?;
                let gn = GroupNorm::new(
                    store,
                    &format!("{prefix}.{name}.{i}.gn"),
                    c,
                    default_groups(c, cfg.gn_groups),
                )?;
                layers.push((conv, gn));
            }
            Ok(Tower { layers })
        };
        let cls_tower = tower("cls_tower", store, rng)?;
        let box_tower = tower("box_tower", store, rng)?;
        let tower_out = if cfg.num_convs == 0 { in_channels } else { c };
        let a = ANCHORS_PER_CELL;
        let cls_out = Conv2d::new(
            store,
            &format!("{prefix}.cls_out"),
            tower_out,
            NUM_CLASSES * a,
            3,
            opts,
            rng,
        )?;
        let box_out = Conv2d::new(
            store,
            &format!("{prefix}.box_out"),
            tower_out,
            4 * a,
            3,
            opts,
            rng,
        )?;
        let af_cls_out = Conv2d::new(
            store,
            &format!("{prefix}.af_cls_out"),
            tower_out,
            NUM_CLASSES,
            3,
            opts,
            rng,
        )?;
        let af_box_out = Conv2d::new(
            store,
            &format!("{prefix}.af_box_out"),
            tower_out,
            4,
            3,
            opts,
            rng,
        )?;
        let prior_bias = T::from_f64_lossy(-((1.0 - cfg.prior) / cfg.prior).ln());
        for conv in [&cls_out, &af_cls_out] {
            let id = conv.bias.expect("class convs carry a bias");
            let shape = store.get(id).shape();
            store.set(id, Tensor::full(shape, prior_bias))?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            cls_tower,
            box_tower,
            cls_out,
            box_out,
            af_cls_out,
            af_box_out,
        })
    }

    pub fn forward_level<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: Var,
    ) -> Result<LevelVars> {
        let ct = self.cls_tower.forward(g, store, p)?;
        let bt = self.box_tower.forward(g, store, p)?;
        let cls_logits = self.cls_out.forward(g, store, ct)?;
        let box_deltas = self.box_out.forward(g, store, bt)?;
        let af_logits = self.af_cls_out.forward(g, store, ct)?;
        let raw = self.af_box_out.forward(g, store, bt)?;
        let af_dist = g.exp(raw);
        Ok(LevelVars {
            cls_logits,
            box_deltas,
            af_logits,
            af_dist,
        })
    }

    /// Anchor-based maps only: `(class probabilities, box deltas)`.
    pub fn anchor_based_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: Var,
    ) -> Result<(Var, Var)> {
        let ct = self.cls_tower.forward(g, store, p)?;
        let bt = self.box_tower.forward(g, store, p)?;
        let cls = self.cls_out.forward(g, store, ct)?;
        let cls = g.sigmoid(cls);
        Ok((cls, self.box_out.forward(g, store, bt)?))
    }

    /// Anchor-free maps only: `(class probabilities, side distances)`.
    pub fn anchor_free_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: Var,
    ) -> Result<(Var, Var)> {
        let v = self.forward_level(g, store, p)?;
        Ok((g.sigmoid(v.af_logits), v.af_dist))
    }

    /// Runs every level and materializes probabilities.
    pub fn outputs<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        levels: &[(u32, Var)],
    ) -> Result<HeadOutputs<T>> {
        let mut out = Vec::with_capacity(levels.len());
        for &(level, p) in levels {
            let v = self.forward_level(g, store, p)?;
            let cls = g.sigmoid(v.cls_logits);
            let af_cls = g.sigmoid(v.af_logits);
            out.push(LevelOutputs {
                level,
                cls: g.value(cls).clone(),
                boxes: g.value(v.box_deltas).clone(),
                af_cls: g.value(af_cls).clone(),
                af_box: g.value(v.af_dist).clone(),
            });
        }
        Ok(out)
    }
}
