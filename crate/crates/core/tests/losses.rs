//! Focal, IoU and smooth-L1 terms: reference values and finite differences.

use mitodet::detection_head::losses::{
    cross_entropy, focal_logit, focal_loss, focal_term, focal_term_grad, iou_loss, iou_loss_grad,
    smooth_l1, FocalParams,
};
use mitodet::detection_head::Rect;
use proptest::prelude::*;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn focal_at_gamma_zero_balanced_is_cross_entropy() {
    // α = 0.5 weights both classes equally; the unweighted form is alpha = None.
    let plain = FocalParams {
        alpha: None,
        gamma: 0.0,
    };
    let half = FocalParams {
        alpha: Some(0.5),
        gamma: 0.0,
    };
    for k in 1..1000 {
        let p = k as f64 / 1000.0;
        for y in [true, false] {
            let ce = cross_entropy(p, y);
            assert!((focal_term(p, y, plain) - ce).abs() < 1e-6);
            assert!((focal_term(p, y, half) - 0.5 * ce).abs() < 1e-6);
        }
    }
}

#[test]
fn focal_reference_value() {
    let fp = FocalParams {
        alpha: Some(1.0),
        gamma: 2.0,
    };
    // 0.25 · ln 2
    assert!((focal_term(0.5, true, fp) - 0.1733).abs() < 1e-4);
    // α = 1 gives the negative class zero weight.
    let v = focal_loss(&[0.5, 0.5], &[true, false], fp);
    assert!((v - 0.25 * 2f64.ln()).abs() < 1e-12);
}

#[test]
fn focal_loss_normalizes_by_positives() {
    let fp = FocalParams::default();
    let p = [0.9, 0.2, 0.1, 0.3];
    let y = [true, false, false, true];
    let sum: f64 = p.iter().zip(&y).map(|(&p, &y)| focal_term(p, y, fp)).sum();
    assert!((focal_loss(&p, &y, fp) - sum / 2.0).abs() < 1e-12);
    // No positives: divide by one.
    let y0 = [false; 4];
    let sum0: f64 = p.iter().map(|&p| focal_term(p, false, fp)).sum();
    assert!((focal_loss(&p, &y0, fp) - sum0).abs() < 1e-12);
}

#[test]
fn identical_boxes_have_zero_iou_loss() {
    let b = Rect::new(3.0, 4.0, 17.5, 30.0);
    assert!(iou_loss(&b, &b).abs() < 1e-12);
    let (l, g) = iou_loss_grad(&b, &b);
    assert!(l.abs() < 1e-12);
    assert!(g.iter().all(|v| v.is_finite()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn focal_probability_gradient_matches_differences(
        p in 0.02f64..0.98,
        y in any::<bool>(),
        gamma in 0.0f64..5.0,
        alpha in prop::option::of(0.05f64..0.95),
    ) {
        let fp = FocalParams { alpha, gamma };
        let h = 1e-6;
        let num = (focal_term(p + h, y, fp) - focal_term(p - h, y, fp)) / (2.0 * h);
        prop_assert!(rel_err(focal_term_grad(p, y, fp), num) < 1e-3);
    }

    #[test]
    fn focal_logit_gradient_matches_differences(
        z in -8.0f64..8.0,
        y in any::<bool>(),
        gamma in 0.0f64..5.0,
        alpha in prop::option::of(0.05f64..0.95),
    ) {
        let fp = FocalParams { alpha, gamma };
        let h = 1e-5;
        let (l, g) = focal_logit(z, y, fp);
        let p = 1.0 / (1.0 + (-z).exp());
        prop_assert!((l - focal_term(p, y, fp)).abs() < 1e-12);
        let num = (focal_logit(z + h, y, fp).0 - focal_logit(z - h, y, fp).0) / (2.0 * h);
        prop_assert!(rel_err(g, num) < 1e-3 || (g - num).abs() < 1e-9);
    }

    #[test]
    fn iou_loss_gradient_matches_differences(
        x1 in 0.0f64..20.0, y1 in 0.0f64..20.0, w in 4.0f64..30.0, h in 4.0f64..30.0,
        dx in -6.0f64..6.0, dy in -6.0f64..6.0, dw in -3.0f64..3.0, dh in -3.0f64..3.0,
    ) {
        let gt = Rect::new(x1, y1, x1 + w, y1 + h);
        let pred = Rect::new(x1 + dx, y1 + dy, x1 + dx + w + dw, y1 + dy + h + dh);
        // Stay away from the kinks where an edge of one box meets the other's.
        let edges = [
            (pred.x1 - gt.x1).abs(), (pred.x2 - gt.x2).abs(),
            (pred.y1 - gt.y1).abs(), (pred.y2 - gt.y2).abs(),
        ];
        prop_assume!(edges.iter().all(|&e| e > 1e-3));
        prop_assume!(mitodet::detection_head::iou(&pred, &gt) > 1e-3);
        let (l, g) = iou_loss_grad(&pred, &gt);
        prop_assert!((l - iou_loss(&pred, &gt)).abs() < 1e-9);
        let eps = 1e-6;
        let coords = [pred.x1, pred.y1, pred.x2, pred.y2];
        for k in 0..4 {
            let mut plus = coords;
            let mut minus = coords;
            plus[k] += eps;
            minus[k] -= eps;
            let r = |c: [f64; 4]| Rect::new(c[0], c[1], c[2], c[3]);
            let num = (iou_loss(&r(plus), &gt) - iou_loss(&r(minus), &gt)) / (2.0 * eps);
            prop_assert!(rel_err(g[k], num) < 1e-3 || (g[k] - num).abs() < 1e-8, "coord {}: {} vs {}", k, g[k], num);
        }
    }

    #[test]
    fn smooth_l1_gradient_matches_differences(
        pred in prop::array::uniform4(-3.0f64..3.0),
        target in prop::array::uniform4(-3.0f64..3.0),
    ) {
        let beta = 1.0 / 9.0;
        prop_assume!(pred.iter().zip(&target).all(|(p, t)| ((p - t).abs() - beta).abs() > 1e-3));
        let (_, g) = smooth_l1(&pred, &target, beta);
        let eps = 1e-7;
        for k in 0..4 {
            let mut a = pred;
            let mut b = pred;
            a[k] += eps;
            b[k] -= eps;
            let num = (smooth_l1(&a, &target, beta).0 - smooth_l1(&b, &target, beta).0) / (2.0 * eps);
            prop_assert!(rel_err(g[k], num) < 1e-3);
        }
    }
}
