//! Each verb end to end on a tiny configuration.

mod common;

use common::*;
use mitodet::cascade::{read_detections, write_detections, DetectionRow};
use mitodet::data_eval::matching::parse_report;
use mitodet::data_eval::{compute_metrics, match_detections, DatasetManifest, Split};
use mitodet::detection_head::{Branch, Detection, Rect};

#[test]
fn synth_is_byte_reproducible_and_audited() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    for out in ["a", "b"] {
        ok(
            &["synth", "--seed", "7", "--n-images", "20", "--out", out],
            root,
        );
    }
    let a = tree_bytes(&root.join("a"));
    assert_eq!(a, tree_bytes(&root.join("b")));
    let m = DatasetManifest::read(&root.join("a")).unwrap();
    assert_eq!(m.entries.len(), 20);
    assert!(read(root.join("a/VERSION")).starts_with("mitodet "));
    assert!(read(root.join("a/config.resolved.toml")).contains("seed = 7"));

    ok(
        &["synth", "--seed", "8", "--n-images", "20", "--out", "c"],
        root,
    );
    assert_ne!(a, tree_bytes(&root.join("c")));
}

#[test]
fn failures_exit_nonzero_with_one_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("bad.toml"), "seed = 1\nlearning_rate = 3\n").unwrap();
    let out = mitodet(&["synth", "--config", "bad.toml", "--out", "x"], root);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error[invalid-argument]: "), "{err}");
    assert!(line.contains("learning_rate"), "{line}");

    std::fs::write(root.join("bad.toml"), "[train_det]\nstep = 3\n").unwrap();
    assert!(
        !mitodet(&["synth", "--config", "bad.toml", "--out", "x"], root)
            .status
            .success()
    );

    let out = mitodet(
        &[
            "evaluate",
            "--detections",
            "none.csv",
            "--data",
            "nowhere",
            "--out",
            "e",
        ],
        root,
    );
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.lines().last().unwrap().starts_with("error["), "{err}");
}

#[test]
fn resumed_training_continues_the_step_count() {
    let (_dir, root) = workspace();
    ok(
        &[
            "train-det",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            "det",
        ],
        &root,
    );
    for f in [
        "detector.ckpt",
        "train_log.csv",
        "VERSION",
        "config.resolved.toml",
    ] {
        assert!(root.join("det").join(f).exists(), "{f}");
    }
    let log = ok(
        &[
            "train-det",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            "det",
            "--resume",
            "--steps",
            "8",
        ],
        &root,
    );
    assert!(
        log.contains("resuming detector training at step 4"),
        "{log}"
    );
    let steps: Vec<u64> = csv_rows(root.join("det/train_log.csv"))
        .iter()
        .map(|r| r[0].parse().unwrap())
        .collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());

    // A changed architecture cannot resume the checkpoint.
    let cfg = TINY_CONFIG.replace("fpn_channels = 8", "fpn_channels = 16");
    std::fs::write(root.join("other.toml"), cfg).unwrap();
    let out = mitodet(
        &[
            "train-det",
            "--config",
            "other.toml",
            "--data",
            "data",
            "--out",
            "det",
            "--resume",
            "--steps",
            "10",
        ],
        &root,
    );
    assert!(!out.status.success());
}

#[test]
fn detector_loss_falls_over_training() {
    let (_dir, root) = workspace();
    ok(
        &[
            "train-det",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            "det",
            "--steps",
            "200",
        ],
        &root,
    );
    let loss: Vec<f64> = csv_rows(root.join("det/train_log.csv"))
        .iter()
        .map(|r| r[3].parse().unwrap())
        .collect();
    assert_eq!(loss.len(), 200);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let (first, last) = (mean(&loss[..20]), mean(&loss[180..]));
    assert!(last < 0.7 * first, "loss {first:.3} -> {last:.3}");
}

#[test]
fn detector_training_is_reproducible_across_processes() {
    let (_dir, root) = workspace();
    for out in ["a", "b"] {
        ok(
            &[
                "train-det",
                "--config",
                "tiny.toml",
                "--data",
                "data",
                "--out",
                out,
                "--steps",
                "30",
            ],
            &root,
        );
    }
    for file in ["train_log.csv", "detector.ckpt"] {
        let (a, b) = (root.join("a").join(file), root.join("b").join(file));
        assert!(
            std::fs::read(a).unwrap() == std::fs::read(b).unwrap(),
            "{file} differs between runs"
        );
    }
}

#[test]
fn mining_classifier_training_and_inference() {
    let (_dir, root) = workspace();
    ok(
        &[
            "train-det",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--out",
            "det",
        ],
        &root,
    );
    // A low threshold so the untrained detector yields plenty of candidates.
    ok(
        &[
            "mine",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--detector",
            "det/detector.ckpt",
            "--score-thr",
            "0.002",
            "--out",
            "hard",
        ],
        &root,
    );
    let report = parse_report(&read(root.join("hard/metrics.txt"))).unwrap();
    let patches = csv_rows(root.join("hard/patches.csv"));
    assert_eq!(patches.len(), report.0.fp);
    assert!(report.0.fp > 0);
    assert!(patches.iter().all(|r| r[2] == "detector-fp"));
    // The exported count agrees with a fresh match of the stage-one table.
    let manifest = DatasetManifest::read(&root.join("data")).unwrap();
    let rows = read_detections(&root.join("hard/stage_one.csv")).unwrap();
    let mut fp = 0;
    for e in manifest.entries_in(Split::Train) {
        let dets: Vec<_> = rows
            .iter()
            .filter(|r| r.image_id == e.image_id)
            .map(|r| mitodet::cascade::pixel_center(&r.det.bbox))
            .collect();
        let gts: Vec<_> = manifest
            .annotations_for(&e.image_id)
            .map(|a| a.centroid)
            .collect();
        fp += match_detections(&dets, &gts, 20.0).unwrap().fp.len();
    }
    assert_eq!(fp, patches.len());

    ok(
        &[
            "train-cls",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--hard",
            "hard",
            "--out",
            "cls",
        ],
        &root,
    );
    let sampling = csv_rows(root.join("cls/sampling_log.csv"));
    assert_eq!(sampling.len(), 4);
    for r in &sampling {
        let (pos, neg): (i64, i64) = (r[2].parse().unwrap(), r[3].parse().unwrap());
        assert!((pos - neg).abs() <= 1, "{r:?}");
    }
    let set = csv_rows(root.join("cls/training_set.csv"));
    assert_eq!(
        set[2],
        ["detector-fp".to_string(), patches.len().to_string()]
    );

    ok(
        &[
            "infer",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--detector",
            "det/detector.ckpt",
            "--classifier",
            "cls/classifier.ckpt",
            "--score-thr",
            "0.002",
            "--cls-threshold",
            "0",
            "--out",
            "pred",
        ],
        &root,
    );
    let header = read(root.join("pred/detections.csv"))
        .lines()
        .next()
        .unwrap()
        .to_string();
    assert_eq!(header, "image_id,x1,y1,x2,y2,det_score,cls_score");
    let stage_one = read_detections(&root.join("pred/stage_one.csv")).unwrap();
    let finals = read_detections(&root.join("pred/detections.csv")).unwrap();
    // Threshold zero keeps every candidate, now carrying a probability.
    assert_eq!(stage_one.len(), finals.len());
    assert!(finals.iter().all(|r| r.det.cls_score.is_some()));
    assert!(stage_one.iter().all(|r| r.det.cls_score.is_none()));

    let test_ids: Vec<_> = manifest
        .entries_in(Split::Test)
        .map(|e| e.image_id.clone())
        .collect();
    for id in &test_ids {
        let ov = image::open(root.join(format!("pred/overlays/{id}.png")))
            .unwrap()
            .to_rgb8();
        let src = image::open(root.join(format!("data/images/{id}.png")))
            .unwrap()
            .to_rgb8();
        let mine: Vec<_> = finals.iter().filter(|r| &r.image_id == id).collect();
        // Every box's top-left corner carries the outline colour...
        for r in &mine {
            let (x, y) = (r.det.bbox.x1.round() as u32, r.det.bbox.y1.round() as u32);
            assert_eq!(ov.get_pixel(x.min(127), y.min(127)).0, [0, 255, 0]);
        }
        // ...and an image without boxes is copied unchanged.
        if mine.is_empty() {
            assert_eq!(ov, src);
        }
    }

    // A strict threshold keeps a subset.
    ok(
        &[
            "infer",
            "--config",
            "tiny.toml",
            "--data",
            "data",
            "--detector",
            "det/detector.ckpt",
            "--classifier",
            "cls/classifier.ckpt",
            "--score-thr",
            "0.002",
            "--cls-threshold",
            "0.9",
            "--no-overlays",
            "--out",
            "strict",
        ],
        &root,
    );
    let strict = read_detections(&root.join("strict/detections.csv")).unwrap();
    assert!(strict.iter().all(|r| finals.contains(r)));
    assert!(!root.join("strict/overlays").exists());
}

fn table_at_offset(root: &std::path::Path, name: &str, dx: f64) -> std::path::PathBuf {
    let manifest = DatasetManifest::read(&root.join("data")).unwrap();
    let rows: Vec<DetectionRow> = manifest
        .entries_in(Split::Test)
        .flat_map(|e| manifest.annotations_for(&e.image_id))
        .map(|a| {
            // Pixel-index centroid (cx, cy) is the centre of [cx+0.5 ± 6].
            let (x, y) = (a.centroid.0 + 0.5 + dx, a.centroid.1 + 0.5);
            DetectionRow {
                image_id: a.image_id.clone(),
                det: Detection::new(
                    Rect::new(x - 6.0, y - 6.0, x + 6.0, y + 6.0),
                    0.9,
                    Branch::AnchorFree,
                ),
            }
        })
        .collect();
    assert!(!rows.is_empty());
    let path = root.join(name);
    write_detections(&path, &rows).unwrap();
    path
}

#[test]
fn evaluation_scores_perfect_and_shifted_tables() {
    // One mitosis per image, so a shifted detection has no other object to hit.
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    std::fs::write(
        root.join("tiny.toml"),
        TINY_CONFIG.replace("mitoses = [1, 3]", "mitoses = [1, 1]"),
    )
    .unwrap();
    ok(&["synth", "--config", "tiny.toml", "--out", "data"], &root);
    table_at_offset(&root, "perfect.csv", 0.0);
    table_at_offset(&root, "shifted.csv", 25.0);

    let out = mitodet(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--detections",
            "perfect.csv",
            "--data",
            "data",
            "--out",
            "ev",
        ],
        &root,
    );
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(report_value(&stdout, "f1"), 1.0);
    assert_eq!(stdout, read(root.join("ev/metrics.txt")));

    ok(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--detections",
            "shifted.csv",
            "--data",
            "data",
            "--out",
            "ev2",
        ],
        &root,
    );
    let shifted = read(root.join("ev2/metrics.txt"));
    assert_eq!(report_value(&shifted, "f1"), 0.0);
    assert_eq!(report_value(&shifted, "tp"), 0.0);

    // The report equals the library's metrics over the same matches.
    ok(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--detections",
            "perfect.csv",
            "--data",
            "data",
            "--radius",
            "3",
            "--out",
            "ev3",
        ],
        &root,
    );
    let (counts, metrics) = parse_report(&read(root.join("ev3/metrics.txt"))).unwrap();
    let manifest = DatasetManifest::read(&root.join("data")).unwrap();
    let rows = read_detections(&root.join("perfect.csv")).unwrap();
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for e in manifest.entries_in(Split::Test) {
        let dets: Vec<_> = rows
            .iter()
            .filter(|r| r.image_id == e.image_id)
            .map(|r| mitodet::cascade::pixel_center(&r.det.bbox))
            .collect();
        let gts: Vec<_> = manifest
            .annotations_for(&e.image_id)
            .map(|a| a.centroid)
            .collect();
        let m = match_detections(&dets, &gts, 3.0).unwrap();
        let single = compute_metrics(&m);
        assert!((0.0..=1.0).contains(&single.f1));
        tp += m.tp();
        fp += m.fp.len();
        fn_ += m.fn_.len();
    }
    assert_eq!((counts.tp, counts.fp, counts.fn_), (tp, fp, fn_));
    assert!((metrics.f1 - 1.0).abs() < 1e-6);

    // Evaluation output is byte-reproducible.
    ok(
        &[
            "evaluate",
            "--config",
            "tiny.toml",
            "--detections",
            "shifted.csv",
            "--data",
            "data",
            "--out",
            "ev4",
        ],
        &root,
    );
    assert_eq!(tree_bytes(&root.join("ev2")), tree_bytes(&root.join("ev4")));
}
