//! Training targets, online feature-level selection and the combined loss.

use mitodet_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::anchors::{
    assign_anchors, encode_box, generate_anchors, Anchor, AnchorLabel, ANCHORS_PER_CELL,
};
use super::boxes::Rect;
use super::head::LevelVars;
use super::losses::{
    focal_logit, focal_term, iou_loss, iou_loss_grad, sigmoid, smooth_l1, FocalParams,
};
use crate::error::{Error, Result};

/// Geometry of one pyramid level.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGeom {
    pub level: u32,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
}

impl LevelGeom {
    pub fn new(level: u32, height: usize, width: usize) -> Self {
        Self {
            level,
            stride: 1 << level,
            height,
            width,
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        super::anchors::cell_center(i, j, self.stride)
    }

    /// Cell containing an image point, if inside the map.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let s = self.stride as f64;
        let (j, i) = ((x / s).floor(), (y / s).floor());
        (i >= 0.0 && j >= 0.0 && (i as usize) < self.height && (j as usize) < self.width)
            .then_some((i as usize, j as usize))
    }

    /// Cells whose centers lie inside `region`.
    pub fn cells_inside(&self, region: &Rect) -> Vec<(usize, usize)> {
        let s = self.stride as f64;
        let lo = |v: f64| ((v / s - 0.5).ceil().max(0.0)) as usize;
        let hi = |v: f64, n: usize| {
            let h = (v / s - 0.5).floor();
            if h < 0.0 {
                None
            } else {
                Some((h as usize).min(n - 1))
            }
        };
        let (Some(i1), Some(j1)) = (hi(region.y2, self.height), hi(region.x2, self.width)) else {
            return Vec::new();
        };
        let (i0, j0) = (lo(region.y1), lo(region.x1));
        let mut out = Vec::new();
        for i in i0..=i1 {
            for j in j0..=j1 {
                let (cx, cy) = self.cell_center(i, j);
                if region.contains(cx, cy) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Cells of the shrunk box; when no cell center falls inside, the cell
/// holding the box center stands in. Empty only if the center is off-map.
pub fn effective_region(gt: &Rect, geom: &LevelGeom, shrink: f64) -> Vec<(usize, usize)> {
    let cells = geom.cells_inside(&gt.shrink(shrink));
    if !cells.is_empty() {
        return cells;
    }
    let (cx, cy) = gt.center();
    geom.cell_of(cx, cy).into_iter().collect()
}

/// Decodes stride-normalized side distances at cell `(i, j)`.
pub fn decode_distances(geom: &LevelGeom, i: usize, j: usize, d: [f64; 4]) -> Rect {
    let (x, y) = geom.cell_center(i, j);
    let s = geom.stride as f64;
    Rect::new(x - d[0] * s, y - d[1] * s, x + d[2] * s, y + d[3] * s)
}

/// Anchor-free predictions of one level for a single image.
#[derive(Clone, Debug)]
pub struct LevelPrediction {
    pub geom: LevelGeom,
    /// Foreground probability, `H × W`.
    pub prob: Vec<f64>,
    /// Side distances, `4 × H × W`.
    pub dist: Vec<f64>,
}

impl LevelPrediction {
    fn distances(&self, i: usize, j: usize) -> [f64; 4] {
        let hw = self.geom.height * self.geom.width;
        let p = i * self.geom.width + j;
        [0, 1, 2, 3].map(|k| self.dist[k * hw + p])
    }
}

/// Mean focal loss plus mean IoU loss over the instance's effective region;
/// `None` when the region is empty.
pub fn instance_level_loss(
    gt: &Rect,
    pred: &LevelPrediction,
    shrink: f64,
    fp: FocalParams,
) -> Option<f64> {
    let cells = effective_region(gt, &pred.geom, shrink);
    if cells.is_empty() {
        return None;
    }
    let n = cells.len() as f64;
    let mut focal = 0.0;
    let mut reg = 0.0;
    for &(i, j) in &cells {
        focal += focal_term(pred.prob[i * pred.geom.width + j], true, fp);
        reg += iou_loss(
            &decode_distances(&pred.geom, i, j, pred.distances(i, j)),
            gt,
        );
    }
    Some(focal / n + reg / n)
}

/// Index of the level with the lowest summed loss; ties go to the earlier
/// (finer) level, and with no usable level the first one is returned.
pub fn select_feature_level(
    gt: &Rect,
    levels: &[LevelPrediction],
    shrink: f64,
    fp: FocalParams,
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (k, pred) in levels.iter().enumerate() {
        if let Some(loss) = instance_level_loss(gt, pred, shrink, fp) {
            if best.is_none_or(|(_, b)| loss < b) {
                best = Some((k, loss));
            }
        }
    }
    best.map_or(0, |(k, _)| k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal: FocalParams,
    pub pos_iou: f64,
    pub neg_iou: f64,
    /// Effective-region scale for the anchor-free branch.
    pub shrink: f64,
    /// Cells inside this scale of a selected box but outside the effective
    /// region are ignored.
    pub ignore_shrink: f64,
    pub smooth_l1_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            focal: FocalParams::default(),
            pos_iou: 0.5,
            neg_iou: 0.4,
            shrink: 0.2,
            ignore_shrink: 0.5,
            smooth_l1_beta: 1.0 / 9.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub anchor_cls: f64,
    pub anchor_box: f64,
    pub free_cls: f64,
    pub free_box: f64,
    pub anchor_positives: usize,
    pub free_positives: usize,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.anchor_cls + self.anchor_box + self.free_cls + self.free_box
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum CellLabel {
    Negative,
    Ignore,
    Positive(usize),
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64_lossy()).collect()
}

/// Combined detector loss for a batch; `gts[n]` are the boxes of image `n`.
/// The returned variable carries analytic gradients into every head map.
pub fn detection_loss<T: Scalar>(
    g: &mut Graph<T>,
    levels: &[(LevelGeom, LevelVars)],
    gts: &[Vec<Rect>],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    if levels.is_empty() {
        return Err(Error::invalid("no pyramid levels"));
    }
    let batch = g.shape(levels[0].1.cls_logits)[0];
    if gts.len() != batch {
        return Err(Error::invalid(format!(
            "{} target lists for a batch of {batch}",
            gts.len()
        )));
    }
    let anchor_sets: Vec<Vec<Anchor>> = levels
        .iter()
        .map(|(geo, _)| {
            generate_anchors(geo.level, geo.height, geo.width, geo.stride).map(|s| s.anchors)
        })
        .collect::<Result<_>>()?;
    let all_anchors: Vec<Anchor> = anchor_sets.iter().flatten().copied().collect();

    let mut grads: Vec<[Tensor<T>; 4]> = levels
        .iter()
        .map(|(_, v)| {
            [v.cls_logits, v.box_deltas, v.af_logits, v.af_dist].map(|x| Tensor::zeros(g.shape(x)))
        })
        .collect();
    let mut out = LossBreakdown::default();
    // Raw (unnormalized) gradient sums per term, scaled at the end.
    let mut acc = [0.0f64; 4];
    let mut raw_grads: Vec<[Vec<f64>; 4]> = grads
        .iter()
        .map(|gs| [0, 1, 2, 3].map(|k| vec![0.0; gs[k].numel()]))
        .collect();

    for (n, boxes) in gts.iter().enumerate() {
        // Anchor-based branch.
        let labels = assign_anchors(&all_anchors, boxes, cfg.pos_iou, cfg.neg_iou);
        let mut offset = 0;
        for (li, (geo, vars)) in levels.iter().enumerate() {
            let hw = geo.height * geo.width;
            let logits = g.value(vars.cls_logits).sample(n);
            let deltas = g.value(vars.box_deltas).sample(n);
            let (cls_base, box_base) = (n * ANCHORS_PER_CELL * hw, n * 4 * ANCHORS_PER_CELL * hw);
            for (k, anchor) in anchor_sets[li].iter().enumerate() {
                let (cell, a) = (k / ANCHORS_PER_CELL, k % ANCHORS_PER_CELL);
                let ci = a * hw + cell;
                let label = labels[offset + k];
                let positive = match label {
                    AnchorLabel::Ignore => continue,
                    AnchorLabel::Negative => false,
                    AnchorLabel::Positive(_) => true,
                };
                let (l, d) = focal_logit(logits[ci].to_f64_lossy(), positive, cfg.focal);
                acc[0] += l;
                raw_grads[li][0][cls_base + ci] += d;
                if let AnchorLabel::Positive(gi) = label {
                    out.anchor_positives += 1;
                    let target = encode_box(anchor, &boxes[gi])?;
                    let pred = [0, 1, 2, 3].map(|c| deltas[(a * 4 + c) * hw + cell].to_f64_lossy());
                    let (l, d) = smooth_l1(&pred, &target, cfg.smooth_l1_beta);
                    acc[1] += l;
                    for c in 0..4 {
                        raw_grads[li][1][box_base + (a * 4 + c) * hw + cell] += d[c];
                    }
                }
            }
            offset += anchor_sets[li].len();
        }

        // Anchor-free branch with online level selection.
        let preds: Vec<LevelPrediction> = levels
            .iter()
            .map(|(geo, vars)| LevelPrediction {
                geom: *geo,
                prob: g
                    .value(vars.af_logits)
                    .sample(n)
                    .iter()
                    .map(|z| sigmoid(z.to_f64_lossy()))
                    .collect(),
                dist: to_f64(g.value(vars.af_dist).sample(n)),
            })
            .collect();
        let mut cell_labels: Vec<Vec<CellLabel>> = levels
            .iter()
            .map(|(geo, _)| vec![CellLabel::Negative; geo.height * geo.width])
            .collect();
        // Smaller boxes win contested cells: visit largest first.
        let mut order: Vec<usize> = (0..boxes.len()).collect();
        order.sort_by(|&a, &b| boxes[b].area().total_cmp(&boxes[a].area()).then(a.cmp(&b)));
        let mut selected = vec![0usize; boxes.len()];
        for &gi in &order {
            selected[gi] = select_feature_level(&boxes[gi], &preds, cfg.shrink, cfg.focal);
        }
        for &gi in &order {
            let gt = &boxes[gi];
            for (li, (geo, _)) in levels.iter().enumerate() {
                let region = effective_region(gt, geo, cfg.shrink);
                if li == selected[gi] {
                    for (i, j) in geo.cells_inside(&gt.shrink(cfg.ignore_shrink)) {
                        let c = &mut cell_labels[li][i * geo.width + j];
                        if *c == CellLabel::Negative {
                            *c = CellLabel::Ignore;
                        }
                    }
                    for (i, j) in region {
                        cell_labels[li][i * geo.width + j] = CellLabel::Positive(gi);
                    }
                } else {
                    for (i, j) in region {
                        let c = &mut cell_labels[li][i * geo.width + j];
                        if *c == CellLabel::Negative {
                            *c = CellLabel::Ignore;
                        }
                    }
                }
            }
        }
        for (li, (geo, _)) in levels.iter().enumerate() {
            let hw = geo.height * geo.width;
            let logits = g.value(levels[li].1.af_logits).sample(n);
            for (p, &label) in cell_labels[li].iter().enumerate() {
                let positive = match label {
                    CellLabel::Ignore => continue,
                    CellLabel::Negative => false,
                    CellLabel::Positive(_) => true,
                };
                let (l, d) = focal_logit(logits[p].to_f64_lossy(), positive, cfg.focal);
                acc[2] += l;
                raw_grads[li][2][n * hw + p] += d;
                if let CellLabel::Positive(gi) = label {
                    out.free_positives += 1;
                    let (i, j) = (p / geo.width, p % geo.width);
                    let d4 = preds[li].distances(i, j);
                    let pred = decode_distances(geo, i, j, d4);
                    let (l, gb) = iou_loss_grad(&pred, &boxes[gi]);
                    acc[3] += l;
                    let s = geo.stride as f64;
                    let dd = [-s * gb[0], -s * gb[1], s * gb[2], s * gb[3]];
                    for c in 0..4 {
                        raw_grads[li][3][n * 4 * hw + c * hw + p] += dd[c];
                    }
                }
            }
        }
    }

    let na = out.anchor_positives.max(1) as f64;
    let nf = out.free_positives.max(1) as f64;
    let norm = [na, na, nf, nf];
    out.anchor_cls = acc[0] / na;
    out.anchor_box = acc[1] / na;
    out.free_cls = acc[2] / nf;
    out.free_box = acc[3] / nf;
    let mut inputs = Vec::new();
    let mut grad_list = Vec::new();
    for (li, (_, vars)) in levels.iter().enumerate() {
        for (k, v) in [
            vars.cls_logits,
            vars.box_deltas,
            vars.af_logits,
            vars.af_dist,
        ]
        .into_iter()
        .enumerate()
        {
            let t = &mut grads[li][k];
            for (dst, &src) in t.data_mut().iter_mut().zip(&raw_grads[li][k]) {
                *dst = T::from_f64_lossy(src / norm[k]);
            }
            inputs.push(v);
            grad_list.push(std::mem::replace(t, Tensor::zeros([1, 1, 1, 1])));
        }
    }
    let total = g.scalar_with_grads(&inputs, T::from_f64_lossy(out.total()), grad_list);
    Ok((total, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_region_uses_shrunk_box_or_center_cell() {
        let geo = LevelGeom::new(3, 8, 8);
        // A 40 px box shrunk to 8 px around (20, 20): only the cell centered at (20, 20).
        let gt = Rect::new(0.0, 0.0, 40.0, 40.0);
        assert_eq!(effective_region(&gt, &geo, 0.2), vec![(2, 2)]);
        // Tiny box between centers falls back to the containing cell.
        let tiny = Rect::new(9.0, 9.0, 11.0, 11.0);
        assert_eq!(effective_region(&tiny, &geo, 0.2), vec![(1, 1)]);
        let off = Rect::new(500.0, 500.0, 510.0, 510.0);
        assert!(effective_region(&off, &geo, 0.2).is_empty());
    }

    #[test]
    fn decoding_hand_case() {
        let geo = LevelGeom::new(3, 4, 4);
        let r = decode_distances(&geo, 1, 2, [1.0, 0.5, 2.0, 0.25]);
        assert_eq!(
            r,
            Rect::new(20.0 - 8.0, 12.0 - 4.0, 20.0 + 16.0, 12.0 + 2.0)
        );
    }

    #[test]
    fn ties_prefer_the_finer_level() {
        let mk = |level| LevelPrediction {
            geom: LevelGeom::new(level, 4, 4),
            prob: vec![0.5; 16],
            dist: vec![1.0; 64],
        };
        // Same box decoded at both levels would differ, so plant an exact tie
        // with two identical level-3 predictions.
        let levels = vec![mk(3), mk(3)];
        let gt = Rect::new(4.0, 4.0, 20.0, 20.0);
        assert_eq!(
            select_feature_level(&gt, &levels, 0.2, FocalParams::default()),
            0
        );
    }
}
