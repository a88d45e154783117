use super::boxes::{iou, Rect};
use crate::error::{Error, Result};

pub const ANCHORS_PER_CELL: usize = 9;
/// Height/width ratios.
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const SCALES: [f64; 3] = [1.0, 1.259_921_049_894_873_2, 1.587_401_051_968_199_5];
/// Anchor base side in units of the level stride.
pub const BASE_SIZE_FACTOR: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Anchor {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Anchor {
    pub fn to_rect(&self) -> Rect {
        Rect::from_center(self.cx, self.cy, self.w, self.h)
    }
}

/// Anchors of one level, index `(i * width + j) * 9 + a` with `a` running
/// ratio-major, then scale.
#[derive(Clone, Debug)]
pub struct AnchorSet {
    pub level: u32,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

pub fn cell_center(i: usize, j: usize, stride: usize) -> (f64, f64) {
    let s = stride as f64;
    ((j as f64 + 0.5) * s, (i as f64 + 0.5) * s)
}

pub fn generate_anchors(
    level: u32,
    height: usize,
    width: usize,
    stride: usize,
) -> Result<AnchorSet> {
    if stride != 1usize << level {
        return Err(Error::invalid(format!(
            "stride {stride} does not match level {level}"
        )));
    }
    let base = BASE_SIZE_FACTOR * stride as f64;
    let mut shapes = Vec::with_capacity(ANCHORS_PER_CELL);
    for r in ASPECT_RATIOS {
        for s in SCALES {
            let side = base * s;
            shapes.push((side / r.sqrt(), side * r.sqrt()));
        }
    }
    let mut anchors = Vec::with_capacity(height * width * ANCHORS_PER_CELL);
    for i in 0..height {
        for j in 0..width {
            let (cx, cy) = cell_center(i, j, stride);
            anchors.extend(shapes.iter().map(|&(w, h)| Anchor { cx, cy, w, h }));
        }
    }
    Ok(AnchorSet {
        level,
        stride,
        height,
        width,
        anchors,
    })
}

/// Center-offset / log-size parameterization `(tx, ty, tw, th)`.
pub fn encode_box(anchor: &Anchor, gt: &Rect) -> Result<[f64; 4]> {
    let (gw, gh) = (gt.width(), gt.height());
    if !(anchor.w > 0.0 && anchor.h > 0.0 && gw > 0.0 && gh > 0.0) {
        return Err(Error::invalid("box dimensions must be positive"));
    }
    let (gx, gy) = gt.center();
    Ok([
        (gx - anchor.cx) / anchor.w,
        (gy - anchor.cy) / anchor.h,
        (gw / anchor.w).ln(),
        (gh / anchor.h).ln(),
    ])
}

pub fn decode_box(anchor: &Anchor, delta: &[f64; 4]) -> Rect {
    let cx = anchor.cx + delta[0] * anchor.w;
    let cy = anchor.cy + delta[1] * anchor.h;
    Rect::from_center(cx, cy, anchor.w * delta[2].exp(), anchor.h * delta[3].exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

/// IoU-threshold assignment; every gt also claims its best-overlapping anchor.
pub fn assign_anchors(
    anchors: &[Anchor],
    gts: &[Rect],
    pos_thr: f64,
    neg_thr: f64,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() {
        return labels;
    }
    let rects: Vec<Rect> = anchors.iter().map(Anchor::to_rect).collect();
    let mut best_anchor = vec![(0.0f64, usize::MAX); gts.len()];
    for (ai, r) in rects.iter().enumerate() {
        let mut best = (0.0f64, 0usize);
        for (gi, gt) in gts.iter().enumerate() {
            // Cheap reject before the exact overlap.
            if r.x2 <= gt.x1 || gt.x2 <= r.x1 || r.y2 <= gt.y1 || gt.y2 <= r.y1 {
                continue;
            }
            let v = iou(r, gt);
            if v > best.0 {
                best = (v, gi);
            }
            if v > best_anchor[gi].0 {
                best_anchor[gi] = (v, ai);
            }
        }
        labels[ai] = if best.0 >= pos_thr {
            AnchorLabel::Positive(best.1)
        } else if best.0 < neg_thr {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
    }
    for (gi, &(v, ai)) in best_anchor.iter().enumerate() {
        if v > 0.0 {
            labels[ai] = AnchorLabel::Positive(gi);
        }
    }
    labels
}
