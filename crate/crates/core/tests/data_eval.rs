//! Synthesis, crops, ingestion and centroid matching.

use std::collections::BTreeSet;
use std::path::Path;

use mitodet::data_eval::{
    compute_metrics, f1_score, ingest, make_training_crops, match_detections, metrics_from_counts,
    remap_annotations, synthesize_dataset, AnnotationRecord, Counts, DatasetFormat,
    DatasetManifest, LoadedDataset, PixelBox, Split, SynthSpec,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn spec_256() -> SynthSpec {
    SynthSpec {
        size: 256,
        mitoses: [5, 5],
        distractors: [0, 0],
        test_fraction: 0.25,
        ..Default::default()
    }
}

/// Centroid of dark pixels inside the (slightly grown) annotation box.
fn remeasure(img: &image::RgbImage, b: PixelBox) -> (f64, f64) {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for y in (b.y1 as u32).saturating_sub(2)..=(b.y2 as u32 + 2).min(img.height() - 1) {
        for x in (b.x1 as u32).saturating_sub(2)..=(b.x2 as u32 + 2).min(img.width() - 1) {
            if img.get_pixel(x, y).0[1] < 115 {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
    }
    (sx / n, sy / n)
}

#[test]
fn synthetic_counts_and_centroids() {
    let d = synthesize_dataset(3, 4, &spec_256()).unwrap();
    assert_eq!(d.manifest.count(Split::Train), 3);
    assert_eq!(d.manifest.count(Split::Test), 1);
    assert!(d.manifest.distractors.is_empty());
    for (e, img) in d.manifest.entries.iter().zip(&d.images) {
        assert_eq!(img.dimensions(), (256, 256));
        let anns: Vec<_> = d.manifest.annotations_for(&e.image_id).collect();
        assert_eq!(anns.len(), 5);
        for a in anns {
            let (x, y) = remeasure(img, a.bbox.unwrap());
            let err = (x - a.centroid.0).hypot(y - a.centroid.1);
            assert!(err <= 1.0, "{}: centroid off by {err:.2} px", e.image_id);
        }
    }
}

#[test]
fn synthetic_counts_stay_in_range_and_objects_keep_apart() {
    let spec = SynthSpec {
        size: 256,
        ..Default::default()
    };
    let d = synthesize_dataset(9, 5, &spec).unwrap();
    for e in &d.manifest.entries {
        let m: Vec<_> = d.manifest.annotations_for(&e.image_id).collect();
        let x: Vec<_> = d.manifest.distractors_for(&e.image_id).collect();
        assert!((3..=8).contains(&m.len()) && (3..=8).contains(&x.len()));
        let all: Vec<_> = m.iter().chain(&x).collect();
        for (i, a) in all.iter().enumerate() {
            for b in &all[i + 1..] {
                let d = (a.centroid.0 - b.centroid.0).hypot(a.centroid.1 - b.centroid.1);
                assert!(d >= spec.min_separation - 1.0, "{d}");
            }
        }
    }
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in std::fs::read_dir(&p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn written_dataset_is_byte_reproducible_and_reads_back() {
    let spec = SynthSpec {
        size: 128,
        mitoses: [1, 3],
        distractors: [1, 2],
        min_separation: 30.0,
        ..Default::default()
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synthesize_dataset(21, 5, &spec)
        .unwrap()
        .write(a.path())
        .unwrap();
    synthesize_dataset(21, 5, &spec)
        .unwrap()
        .write(b.path())
        .unwrap();
    assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));

    let back = DatasetManifest::read(a.path()).unwrap();
    let orig = synthesize_dataset(21, 5, &spec).unwrap().manifest;
    assert_eq!(back.entries, orig.entries);
    assert_eq!(back.annotations, orig.annotations);
    assert_eq!(back.distractors, orig.distractors);
    let loaded = LoadedDataset::load(back).unwrap();
    assert_eq!(
        loaded.images,
        synthesize_dataset(21, 5, &spec).unwrap().images
    );
}

/// A single 512² image with ten well-spread boxed objects.
fn ten_object_image() -> LoadedDataset {
    let spec = SynthSpec {
        size: 512,
        mitoses: [10, 10],
        distractors: [0, 0],
        test_fraction: 0.0,
        ..Default::default()
    };
    let d = synthesize_dataset(5, 1, &spec).unwrap();
    assert_eq!(d.manifest.annotations.len(), 10);
    LoadedDataset {
        manifest: d.manifest,
        images: d.images,
    }
}

#[test]
fn every_gt_gets_a_crop_plus_negatives() {
    let data = ten_object_image();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let crops = make_training_crops(&data, Split::Train, 224, 2, &mut rng).unwrap();
    assert!(crops.len() >= 12);
    assert_eq!(crops.len(), 12);
    let gts = data.gts(0);
    for (crop, gt) in crops.iter().zip(&gts) {
        // The gt's whole box lies inside its own crop.
        let r = gt.training_box();
        let (x0, y0) = (crop.origin.0 as f64, crop.origin.1 as f64);
        assert!(r.x1 >= x0 && r.y1 >= y0 && r.x2 <= x0 + 224.0 && r.y2 <= y0 + 224.0);
        assert!(crop
            .annotations
            .iter()
            .any(|a| (a.centroid.0 + x0, a.centroid.1 + y0) == gt.centroid));
    }
    for c in &crops {
        assert_eq!(c.image.dimensions(), (224, 224));
        assert_eq!(
            c.image,
            image::imageops::crop_imm(
                &data.images[0],
                c.origin.0 as u32,
                c.origin.1 as u32,
                224,
                224
            )
            .to_image()
        );
        // Inverse remap: every kept annotation maps back exactly.
        for a in &c.annotations {
            let (x, y) = (
                a.centroid.0 + c.origin.0 as f64,
                a.centroid.1 + c.origin.1 as f64,
            );
            let orig = gts
                .iter()
                .find(|g| g.centroid == (x, y))
                .expect("remapped centroid maps back");
            let (ob, cb) = (orig.bbox.unwrap(), a.bbox.unwrap());
            let (ox, oy) = (c.origin.0 as f64, c.origin.1 as f64);
            assert_eq!(cb.x1, (ob.x1 - ox).max(0.0));
            assert_eq!(cb.x2, (ob.x2 - ox).min(223.0));
            assert_eq!(cb.y1, (ob.y1 - oy).max(0.0));
            assert_eq!(cb.y2, (ob.y2 - oy).min(223.0));
        }
        // And nothing whose centroid lies inside the window is dropped.
        let inside = gts
            .iter()
            .filter(|g| {
                let (x, y) = (
                    g.centroid.0 - c.origin.0 as f64,
                    g.centroid.1 - c.origin.1 as f64,
                );
                (0.0..224.0).contains(&x) && (0.0..224.0).contains(&y)
            })
            .count();
        assert_eq!(inside, c.annotations.len());
    }
}

#[test]
fn crops_larger_than_the_image_are_rejected() {
    let data = ten_object_image();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(make_training_crops(&data, Split::Train, 1024, 0, &mut rng).is_err());
}

#[test]
fn remap_keeps_only_contained_centroids() {
    let a = AnnotationRecord::from_box("x", PixelBox::new(90.0, 90.0, 110.0, 110.0));
    let b = AnnotationRecord::from_centroid("x", 10.0, 10.0);
    let kept = remap_annotations([&a, &b], 95, 95, 50);
    assert_eq!(kept.len(), 1);
    assert_eq!(kept[0].centroid, (5.0, 5.0));
    assert_eq!(kept[0].bbox, Some(PixelBox::new(0.0, 0.0, 15.0, 15.0)));
}

#[test]
fn match_radius_boundary() {
    let gts = [(100.0, 100.0)];
    for (dx, tp) in [(19.0, true), (20.0, true), (21.0, false)] {
        let m = match_detections(&[(100.0 + dx, 100.0)], &gts, 20.0).unwrap();
        assert_eq!(m.tp(), usize::from(tp), "{dx} px");
        assert_eq!(m.fp.len(), usize::from(!tp));
        assert_eq!(m.fn_.len(), usize::from(!tp));
    }
    assert!(match_detections(&[], &gts, 0.0).is_err());

    // One-to-one, nearest first.
    let m = match_detections(&[(110.0, 100.0), (105.0, 100.0)], &gts, 20.0).unwrap();
    assert_eq!(
        m.tp_pairs.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>(),
        [(1, 0)]
    );
    assert_eq!(m.fp, [0]);
}

/// Maximum-cardinality bipartite matching by augmenting paths.
fn max_matching(dets: &[(f64, f64)], gts: &[(f64, f64)], r: f64) -> usize {
    fn augment(
        d: usize,
        adj: &[Vec<usize>],
        owner: &mut [Option<usize>],
        seen: &mut [bool],
    ) -> bool {
        for &g in &adj[d] {
            if !seen[g] {
                seen[g] = true;
                if owner[g].is_none_or(|o| augment(o, adj, owner, seen)) {
                    owner[g] = Some(d);
                    return true;
                }
            }
        }
        false
    }
    let adj: Vec<Vec<usize>> = dets
        .iter()
        .map(|d| {
            (0..gts.len())
                .filter(|&g| (d.0 - gts[g].0).hypot(d.1 - gts[g].1) <= r)
                .collect()
        })
        .collect();
    let mut owner = vec![None; gts.len()];
    (0..dets.len())
        .filter(|&d| augment(d, &adj, &mut owner, &mut vec![false; gts.len()]))
        .count()
}

#[test]
fn greedy_against_optimal_on_dense_clouds() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mut differ, mut unambiguous) = (0, 0);
    for _ in 0..300 {
        let cloud = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            (0..20)
                .map(|_| (rng.random_range(0.0..200.0), rng.random_range(0.0..200.0)))
                .collect()
        };
        let (dets, gts) = (cloud(&mut rng), cloud(&mut rng));
        let greedy = match_detections(&dets, &gts, 20.0).unwrap().tp();
        let opt = max_matching(&dets, &gts, 20.0);
        // The fast oracle agrees with exhaustive search where that is affordable.
        assert_eq!(
            max_matching(&dets[..6], &gts[..6], 20.0),
            optimal_tp(&dets[..6], &gts[..6], 20.0)
        );
        assert!(greedy <= opt && 2 * greedy >= opt);
        // Without a shared candidate the assignment is forced.
        let degree = |a: &(f64, f64), set: &[(f64, f64)]| {
            set.iter()
                .filter(|b| (a.0 - b.0).hypot(a.1 - b.1) <= 20.0)
                .count()
        };
        if dets.iter().all(|d| degree(d, &gts) <= 1) && gts.iter().all(|g| degree(g, &dets) <= 1) {
            unambiguous += 1;
            assert_eq!(greedy, opt);
        }
        differ += usize::from(greedy != opt);
    }
    eprintln!(
        "greedy below optimal in {differ}/300 clouds; {unambiguous} unambiguous clouds all equal"
    );
}

#[test]
fn metric_reference_values() {
    let m = metrics_from_counts(Counts {
        tp: 99,
        fp: 0,
        fn_: 4,
    });
    assert!((m.recall - 0.961).abs() < 1e-3);
    assert!((f1_score(0.86, 0.92) - 0.888).abs() < 1e-3);
    let z = metrics_from_counts(Counts::default());
    assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
}

/// Largest one-to-one matching within the radius, by exhaustive search.
fn optimal_tp(dets: &[(f64, f64)], gts: &[(f64, f64)], r: f64) -> usize {
    fn go(
        d: usize,
        dets: &[(f64, f64)],
        gts: &[(f64, f64)],
        used: &mut Vec<bool>,
        r: f64,
    ) -> usize {
        if d == dets.len() {
            return 0;
        }
        let mut best = go(d + 1, dets, gts, used, r);
        for g in 0..gts.len() {
            if !used[g] && (dets[d].0 - gts[g].0).hypot(dets[d].1 - gts[g].1) <= r {
                used[g] = true;
                best = best.max(1 + go(d + 1, dets, gts, used, r));
                used[g] = false;
            }
        }
        best
    }
    go(0, dets, gts, &mut vec![false; gts.len()], r)
}

fn points(max: usize) -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..120.0, 0.0f64..120.0), 0..max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn greedy_is_a_maximal_half_approximation(dets in points(7), gts in points(7), r in 5.0f64..40.0) {
        let m = match_detections(&dets, &gts, r).unwrap();
        let opt = optimal_tp(&dets, &gts, r);
        prop_assert!(m.tp() <= opt);
        prop_assert!(2 * m.tp() >= opt);
        // Maximal: no unmatched detection is within reach of an unmatched gt.
        for &d in &m.fp {
            for &g in &m.fn_ {
                prop_assert!((dets[d].0 - gts[g].0).hypot(dets[d].1 - gts[g].1) > r);
            }
        }
    }

    #[test]
    fn greedy_is_optimal_for_separated_objects(
        gts in prop::collection::btree_set((0u32..6, 0u32..6), 0..10),
        jitter in prop::collection::vec((-15.0f64..15.0, -15.0f64..15.0, any::<bool>()), 10),
        extra in points(4),
    ) {
        // Objects 60 px apart with detections within 15 px: at most one
        // candidate per object, so greedy cannot go wrong.
        let gts: Vec<(f64, f64)> = gts.iter().map(|&(i, j)| (i as f64 * 60.0, j as f64 * 60.0)).collect();
        let mut dets: Vec<(f64, f64)> = gts
            .iter()
            .zip(&jitter)
            .filter(|(_, j)| j.2)
            .map(|(g, j)| (g.0 + j.0, g.1 + j.1))
            .collect();
        dets.extend(extra.iter().map(|&(x, y)| (x + 1000.0, y)));
        let m = match_detections(&dets, &gts, 22.0).unwrap();
        prop_assert_eq!(m.tp(), optimal_tp(&dets, &gts, 22.0));
    }

    #[test]
    fn counts_are_consistent(dets in points(12), gts in points(12), r in 1.0f64..60.0) {
        let m = match_detections(&dets, &gts, r).unwrap();
        prop_assert_eq!(m.tp() + m.fn_.len(), gts.len());
        prop_assert_eq!(m.tp() + m.fp.len(), dets.len());
        let used_d: BTreeSet<_> = m.tp_pairs.iter().map(|p| p.0).collect();
        let used_g: BTreeSet<_> = m.tp_pairs.iter().map(|p| p.1).collect();
        prop_assert_eq!(used_d.len(), m.tp());
        prop_assert_eq!(used_g.len(), m.tp());
        prop_assert!(m.tp_pairs.iter().all(|p| p.2 <= r));
        let met = compute_metrics(&m);
        prop_assert!((0.0..=1.0).contains(&met.f1));
    }

    #[test]
    fn counts_ignore_input_order(dets in points(10), gts in points(10), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Shift off the lattice so exact distance ties are improbable.
        let dets: Vec<_> = dets.iter().map(|&(x, y)| (x + rng.random::<f64>() * 1e-3, y)).collect();
        let (mut d2, mut g2) = (dets.clone(), gts.clone());
        d2.shuffle(&mut rng);
        g2.shuffle(&mut rng);
        let a = match_detections(&dets, &gts, 20.0).unwrap();
        let b = match_detections(&d2, &g2, 20.0).unwrap();
        prop_assert_eq!((a.tp(), a.fp.len(), a.fn_.len()), (b.tp(), b.fp.len(), b.fn_.len()));
    }

    #[test]
    fn larger_radius_never_loses_matches(dets in points(10), gts in points(10), r in 1.0f64..40.0, dr in 0.0f64..30.0) {
        let a = match_detections(&dets, &gts, r).unwrap();
        let b = match_detections(&dets, &gts, r + dr).unwrap();
        prop_assert!(b.tp() >= a.tp());
    }
}

fn write_png(path: &Path, w: u32, h: u32) {
    image::RgbImage::from_pixel(w, h, image::Rgb([200, 150, 190]))
        .save(path)
        .unwrap();
}

#[test]
fn mask_layouts_import() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("train")).unwrap();
    std::fs::create_dir_all(root.join("test")).unwrap();
    // PNG mask with two separate blobs.
    write_png(&root.join("train/a.png"), 64, 64);
    let mut mask = image::GrayImage::new(64, 64);
    for (x, y) in [(10, 10), (11, 10), (12, 10), (11, 11), (40, 40), (41, 41)] {
        mask.put_pixel(x, y, image::Luma([255]));
    }
    mask.save(root.join("train/a_mask.png")).unwrap();
    // CSV: one object per line as row,col pairs.
    write_png(&root.join("test/b.png"), 64, 64);
    std::fs::write(root.join("test/b.csv"), "20,30,20,31,21,30\n").unwrap();

    let rep = ingest(root, DatasetFormat::Masks).unwrap();
    assert!(rep.issues.is_empty(), "{:?}", rep.issues);
    assert_eq!(rep.manifest.entries.len(), 2);
    let a: Vec<_> = rep.manifest.annotations_for("a").collect();
    assert_eq!(a.len(), 2);
    assert_eq!(a[0].bbox, Some(PixelBox::new(10.0, 10.0, 12.0, 11.0)));
    assert_eq!(a[1].centroid, (41.0, 41.0));
    let b: Vec<_> = rep.manifest.annotations_for("b").collect();
    // Row 20..21 is y, column 30..31 is x.
    assert_eq!(b[0].bbox, Some(PixelBox::new(30.0, 20.0, 31.0, 21.0)));
    assert_eq!(rep.manifest.entries[1].split, Split::Test);
}

#[test]
fn box_layout_imports_and_reports_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("p1.png"), 100, 80);
    write_png(&root.join("p2.png"), 100, 80);
    std::fs::write(
        root.join("images.csv"),
        "image_id,path,split,patient\np1,p1.png,train,A\np2,p2.png,test,B\nmissing,nope.png,train,C\n",
    )
    .unwrap();
    std::fs::write(
        root.join("boxes.csv"),
        "image_id,x1,y1,x2,y2\np1,10,10,19,21\np2,5,5,4,9\np2,50,60,70,79\np9,1,1,2,2\n",
    )
    .unwrap();
    let rep = ingest(root, DatasetFormat::Boxes).unwrap();
    assert_eq!(rep.manifest.entries.len(), 2);
    assert_eq!(rep.manifest.annotations.len(), 2);
    assert_eq!(rep.manifest.annotations[0].centroid, (14.5, 15.5));
    // Missing image, inverted box, unknown image.
    assert_eq!(rep.issues.len(), 3, "{:?}", rep.issues);
}

#[test]
fn shared_patients_across_splits_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_png(&root.join("p1.png"), 32, 32);
    write_png(&root.join("p2.png"), 32, 32);
    std::fs::write(
        root.join("images.csv"),
        "image_id,path,split,patient\np1,p1.png,train,A\np2,p2.png,test,A\n",
    )
    .unwrap();
    std::fs::write(root.join("boxes.csv"), "image_id,x1,y1,x2,y2\n").unwrap();
    assert!(ingest(root, DatasetFormat::Boxes).is_err());
}
