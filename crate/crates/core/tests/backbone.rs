//! Pyramid geometry, head widths, the pyramid fusion against direct
//! convolutions, and finite-difference checks of the full detector loss.

use mitodet::backbone::{BackboneConfig, FeatureExtractor, Fpn};
use mitodet::detection_head::{HeadConfig, LossConfig, Rect};
use mitodet::detector::{Detector, DetectorConfig};
use mitodet_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn pyramid_and_head_shapes_at_224() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    let det = Detector::new(&mut store, &DetectorConfig::default(), &mut rng).unwrap();
    let x = Tensor::from_fn([1, 3, 224, 224], |_| rng.random_range(-1.0f32..1.0));

    let pyr = det.features.pyramid(&store, &x).unwrap();
    let sides: Vec<[usize; 4]> = pyr.maps.iter().map(|m| m.shape()).collect();
    let want = [28, 14, 7, 4, 2];
    for (s, w) in sides.iter().zip(want) {
        assert_eq!(*s, [1, 256, w, w]);
    }

    let out = det.head_outputs(&store, &x).unwrap();
    assert_eq!(out.len(), 5);
    for (lv, w) in out.iter().zip(want) {
        assert_eq!(lv.cls.shape(), [1, 9, w, w]);
        assert_eq!(lv.boxes.shape(), [1, 36, w, w]);
        assert_eq!(lv.af_cls.shape(), [1, 1, w, w]);
        assert_eq!(lv.af_box.shape(), [1, 4, w, w]);
        // Initial foreground probability sits near the prior.
        let mean = lv.cls.data().iter().sum::<f32>() / lv.cls.numel() as f32;
        assert!((mean - 0.01).abs() < 2e-3, "{mean}");
        assert!(lv.af_box.data().iter().all(|&d| d > 0.0));
    }
}

#[test]
fn stage_strides() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f32>::new();
    let cfg = BackboneConfig {
        width: 0.125,
        blocks: [1, 1, 1, 1],
        ..Default::default()
    };
    let fx = FeatureExtractor::new(&mut store, &cfg, &mut rng).unwrap();
    let mut g = Graph::inference();
    let x = g.input(Tensor::zeros([2, 3, 256, 192]));
    let stages = fx.backbone.extract_stages(&mut g, &store, x).unwrap();
    let c = cfg.stage_channels();
    for (k, (&v, stride)) in stages.iter().zip([4, 8, 16, 32]).enumerate() {
        assert_eq!(g.shape(v), [2, c[k], 256 / stride, 192 / stride]);
    }
}

#[test]
fn residual_branches_start_at_zero_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f32>::new();
    let cfg = BackboneConfig {
        width: 0.125,
        ..Default::default()
    };
    FeatureExtractor::new(&mut store, &cfg, &mut rng).unwrap();
    let expand: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).ends_with(".expand.gn.gamma"))
        .collect();
    assert_eq!(expand.len(), cfg.blocks.iter().sum::<usize>());
    assert!(expand.iter().all(|&id| store.get(id).max_abs() == 0.0));
    // Every other GN scale starts at one.
    assert!(store
        .ids()
        .filter(|&id| store.name(id).ends_with(".gn.gamma") && !expand.contains(&id))
        .all(|id| store.get(id).data().iter().all(|&v| v == 1.0)));
}

/// Plain zero-padded convolution, `k/2` padding.
fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, ci, h, wd] = x.shape();
    let [co, _, k, _] = w.shape();
    let p = (k / 2) as isize;
    let oh = (h + 2 * (k / 2) - k) / stride + 1;
    let ow = (wd + 2 * (k / 2) - k) / stride + 1;
    Tensor::from_fn([n, co, oh, ow], |[s, o, i, j]| {
        let mut acc = b.data()[o];
        for c in 0..ci {
            for u in 0..k {
                for v in 0..k {
                    let y = (i * stride) as isize + u as isize - p;
                    let xx = (j * stride) as isize + v as isize - p;
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                        acc += w.at([o, c, u, v]) * x.at([s, c, y as usize, xx as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn upsample(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let [n, c, sh, sw] = x.shape();
    Tensor::from_fn([n, c, h, w], |[s, ch, i, j]| {
        x.at([s, ch, i * sh / h, j * sw / w])
    })
}

fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

#[test]
fn pyramid_fusion_matches_direct_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let fpn = Fpn::new(&mut store, "fpn", [6, 8, 10], 5, &mut rng).unwrap();
    // Non-zero biases so their placement is checked too.
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with(".bias") {
            let t = Tensor::from_fn(store.get(id).shape(), |_| rng.random_range(-0.5..0.5));
            store.set(id, t).unwrap();
        }
    }
    let mut rand = |s| Tensor::from_fn(s, |_| rng.random_range(-1.0..1.0));
    // Odd sides exercise the ceil-halving between levels.
    let (c3, c4, c5) = (
        rand([2, 6, 13, 11]),
        rand([2, 8, 7, 6]),
        rand([2, 10, 4, 3]),
    );

    let mut g = Graph::inference();
    let (v3, v4, v5) = (
        g.input(c3.clone()),
        g.input(c4.clone()),
        g.input(c5.clone()),
    );
    let ps = fpn.fuse(&mut g, &store, v3, v4, v5).unwrap();

    let param = |n: &str| store.get(store.id(n).unwrap()).clone();
    let conv = |x: &Tensor<f64>, name: &str, stride| {
        conv_oracle(
            x,
            &param(&format!("fpn.{name}.weight")),
            &param(&format!("fpn.{name}.bias")),
            stride,
        )
    };
    let l5 = conv(&c5, "lateral5", 1);
    let m4 = add(&conv(&c4, "lateral4", 1), &upsample(&l5, 7, 6));
    let m3 = add(&conv(&c3, "lateral3", 1), &upsample(&m4, 13, 11));
    let p6 = conv(&c5, "p6", 2);
    let want = [
        conv(&m3, "smooth3", 1),
        conv(&m4, "smooth4", 1),
        conv(&l5, "smooth5", 1),
        p6.clone(),
        conv(&p6.map(|v| v.max(0.0)), "p7", 2),
    ];
    for (k, (&v, w)) in ps.iter().zip(&want).enumerate() {
        let got = g.value(v);
        assert_eq!(got.shape(), w.shape(), "P{}", k + 3);
        for (a, b) in got.data().iter().zip(w.data()) {
            assert!((a - b).abs() < 1e-10, "P{}: {a} vs {b}", k + 3);
        }
    }
}

fn tiny_detector(seed: u64) -> (Detector, ParamStore<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = DetectorConfig {
        backbone: BackboneConfig {
            blocks: [1, 1, 1, 1],
            width: 1.0 / 32.0,
            gn_groups: 2,
            cbam_reduction: 2,
            zero_init_residual: false,
            fpn_channels: 4,
            ..Default::default()
        },
        head: HeadConfig {
            channels: 4,
            num_convs: 1,
            gn_groups: 2,
            prior: 0.1,
        },
    };
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &cfg, &mut rng).unwrap();
    (det, store)
}

fn detector_loss(
    det: &Detector,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    gts: &[Vec<Rect>],
) -> f64 {
    let mut g = Graph::training();
    let xv = g.input(x.clone());
    let (l, _) = det
        .loss(&mut g, store, xv, gts, &LossConfig::default())
        .unwrap();
    g.value(l).data()[0]
}

#[test]
fn detector_loss_gradient_matches_differences() {
    let (det, mut store) = tiny_detector(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn([2, 3, 64, 64], |_| rng.random_range(-1.0..1.0));
    let gts = vec![
        vec![
            Rect::new(10.0, 12.0, 26.0, 30.0),
            Rect::new(40.0, 5.0, 58.0, 21.0),
        ],
        vec![Rect::new(20.0, 30.0, 50.0, 62.0)],
    ];

    let mut g = Graph::training();
    let xv = g.input(x.clone());
    let (l, parts) = det
        .loss(&mut g, &store, xv, &gts, &LossConfig::default())
        .unwrap();
    assert!(parts.anchor_positives > 0 && parts.free_positives > 0);
    g.backward(l).unwrap();
    let grads = g.take_param_grads();

    // Probe a few entries of tensors spread across the network.
    let names = [
        "backbone.stem.conv.weight",
        "backbone.layer2.0.spatial.gn.gamma",
        "backbone.cbam3.mlp1.weight",
        "fpn.lateral4.weight",
        "fpn.p6.weight",
        "head.cls_out.weight",
        "head.box_out.bias",
        "head.af_box_out.weight",
    ];
    let h = 1e-6;
    let mut checked = 0;
    for name in names {
        let Some(id) = store.id(name) else {
            panic!(
                "no parameter {name}: {:?}",
                store.manifest().iter().map(|m| &m.0).collect::<Vec<_>>()
            );
        };
        let analytic = grads[&id].clone();
        for _ in 0..3 {
            let i = rng.random_range(0..analytic.numel());
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let fp = detector_loss(&det, &store, &x, &gts);
            store.get_mut(id).data_mut()[i] = orig - h;
            let fm = detector_loss(&det, &store, &x, &gts);
            store.get_mut(id).data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "{name}[{i}]: analytic {a} numeric {num}");
            checked += 1;
        }
    }
    assert_eq!(checked, 24);
}
