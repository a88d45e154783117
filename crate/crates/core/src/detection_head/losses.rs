//! Loss terms with analytic gradients.

use serde::{Deserialize, Serialize};

use super::boxes::Rect;

pub const PROB_CLAMP: f64 = 1e-7;
pub const IOU_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalParams {
    /// Weight of the positive class; `None` weights both classes by 1.
    pub alpha: Option<f64>,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self {
            alpha: Some(0.25),
            gamma: 2.0,
        }
    }
}

impl FocalParams {
    fn alpha_t(&self, positive: bool) -> f64 {
        match (self.alpha, positive) {
            (None, _) => 1.0,
            (Some(a), true) => a,
            (Some(a), false) => 1.0 - a,
        }
    }
}

/// Per-element focal loss of a probability.
pub fn focal_term(p: f64, positive: bool, fp: FocalParams) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pt = if positive { p } else { 1.0 - p };
    -fp.alpha_t(positive) * (1.0 - pt).powf(fp.gamma) * pt.ln()
}

/// Derivative of [`focal_term`] with respect to `p` (zero where clamped).
pub fn focal_term_grad(p: f64, positive: bool, fp: FocalParams) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let g = fp.gamma;
    let a = fp.alpha_t(positive);
    if positive {
        // d/dp of -a (1-p)^g ln p
        let pow_m1 = if g == 0.0 {
            0.0
        } else {
            g * (1.0 - p).powf(g - 1.0)
        };
        -a * (-pow_m1 * p.ln() + (1.0 - p).powf(g) / p)
    } else {
        // d/dp of -a p^g ln(1-p)
        let pow_m1 = if g == 0.0 { 0.0 } else { g * p.powf(g - 1.0) };
        -a * (pow_m1 * (1.0 - p).ln() - p.powf(g) / (1.0 - p))
    }
}

/// Focal loss and its derivative with respect to the logit `z`, p = σ(z).
pub fn focal_logit(z: f64, positive: bool, fp: FocalParams) -> (f64, f64) {
    let p = sigmoid(z);
    let loss = focal_term(p, positive, fp);
    let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if pc != p {
        return (loss, 0.0);
    }
    let g = fp.gamma;
    let a = fp.alpha_t(positive);
    let grad = if positive {
        a * (1.0 - p).powf(g) * (g * p * p.ln() - (1.0 - p))
    } else {
        a * p.powf(g) * (p - g * (1.0 - p) * (1.0 - p).ln())
    };
    (loss, grad)
}

/// Summed focal loss over `p`/`y` divided by max(#positives, 1).
pub fn focal_loss(p: &[f64], y: &[bool], fp: FocalParams) -> f64 {
    let npos = y.iter().filter(|&&v| v).count().max(1) as f64;
    p.iter()
        .zip(y)
        .map(|(&p, &y)| focal_term(p, y, fp))
        .sum::<f64>()
        / npos
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a probability (clamped like the focal loss).
pub fn cross_entropy(p: f64, positive: bool) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -if positive { p.ln() } else { (1.0 - p).ln() }
}

/// −ln(max(IoU, 1e-6)).
pub fn iou_loss(pred: &Rect, gt: &Rect) -> f64 {
    -super::boxes::iou(pred, gt).max(IOU_FLOOR).ln()
}

/// [`iou_loss`] and its gradient with respect to `(x1, y1, x2, y2)` of `pred`.
pub fn iou_loss_grad(pred: &Rect, gt: &Rect) -> (f64, [f64; 4]) {
    let iw = pred.x2.min(gt.x2) - pred.x1.max(gt.x1);
    let ih = pred.y2.min(gt.y2) - pred.y1.max(gt.y1);
    let pa = pred.width() * pred.height();
    let ga = gt.area();
    if iw <= 0.0 || ih <= 0.0 {
        return (-IOU_FLOOR.ln(), [0.0; 4]);
    }
    let inter = iw * ih;
    let union = pa + ga - inter;
    let v = inter / union;
    if v < IOU_FLOOR {
        return (-IOU_FLOOR.ln(), [0.0; 4]);
    }
    // d(iw)/d(x1), d(iw)/d(x2), and likewise for ih.
    let diw = [
        if pred.x1 > gt.x1 { -1.0 } else { 0.0 },
        if pred.x2 < gt.x2 { 1.0 } else { 0.0 },
    ];
    let dih = [
        if pred.y1 > gt.y1 { -1.0 } else { 0.0 },
        if pred.y2 < gt.y2 { 1.0 } else { 0.0 },
    ];
    let di = [diw[0] * ih, dih[0] * iw, diw[1] * ih, dih[1] * iw];
    let (w, h) = (pred.width(), pred.height());
    let dpa = [-h, -w, h, w];
    // L = ln U − ln I
    let mut g = [0.0; 4];
    for k in 0..4 {
        g[k] = (dpa[k] - di[k]) / union - di[k] / inter;
    }
    (-v.ln(), g)
}

/// Smooth-L1 summed over four deltas, with gradient.
pub fn smooth_l1(pred: &[f64; 4], target: &[f64; 4], beta: f64) -> (f64, [f64; 4]) {
    let mut loss = 0.0;
    let mut g = [0.0; 4];
    for k in 0..4 {
        let d = pred[k] - target[k];
        if d.abs() < beta {
            loss += 0.5 * d * d / beta;
            g[k] = d / beta;
        } else {
            loss += d.abs() - 0.5 * beta;
            g[k] = d.signum();
        }
    }
    (loss, g)
}
