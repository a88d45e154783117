use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mitodet::cascade::{
    detect_tiled, overlay, pixel_center, read_detections, refine, score_candidates,
    write_detections, DetectionRow,
};
use mitodet::checkpoint::{save_checkpoint, Checkpoint};
use mitodet::classifier::{
    build_classifier, build_training_set, read_patch_set, train_classifier, write_patch_set,
    ClassifierConfig, PatchClassifier, PatchProvenance, PatchSample, PATCH_MANIFEST,
};
use mitodet::data_eval::matching::{format_report, match_rows, write_match_rows};
use mitodet::data_eval::{
    ingest, make_training_crops, match_detections, metrics_from_counts, synthesize_dataset, Counts,
    DatasetManifest, LoadedDataset, Split,
};
use mitodet::detector::{train_detector, Detector, DetectorConfig};
use mitodet::imaging::{load_rgb8, save_png, RgbImage};
use mitodet_tensor::{Adam, AdamConfig, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

pub const DETECTOR_CKPT: &str = "detector.ckpt";
pub const CLASSIFIER_CKPT: &str = "classifier.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const SAMPLING_LOG: &str = "sampling_log.csv";
pub const STAGE_ONE_TABLE: &str = "stage_one.csv";
pub const DETECTION_TABLE: &str = "detections.csv";
pub const METRICS_REPORT: &str = "metrics.txt";
pub const MATCH_TABLE: &str = "matches.csv";

const DETECTOR_KIND: &str = "detector";
const CLASSIFIER_KIND: &str = "classifier";

/// Stream of the master seed reserved for one command, so verbs never share
/// random draws.
fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn load_dataset(root: &Path) -> Result<LoadedDataset> {
    let manifest = DatasetManifest::read(root)
        .with_context(|| format!("reading dataset {}", root.display()))?;
    Ok(LoadedDataset::load(manifest)?)
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    cfg.write_audit(out)?;
    let ds = synthesize_dataset(cfg.seed, cfg.synth.n_images, &cfg.synth.spec)?;
    ds.write(out)?;
    log::info!(
        "wrote {} images ({} train / {} test), {} mitoses, {} distractors",
        ds.images.len(),
        ds.manifest.count(Split::Train),
        ds.manifest.count(Split::Test),
        ds.manifest.annotations.len(),
        ds.manifest.distractors.len()
    );
    Ok(())
}

/// Imports a dataset into the native layout under `out`.
pub fn prepare(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    cfg.write_audit(out)?;
    let report = ingest(input, cfg.data.format)?;
    let mut issues = csv::Writer::from_path(out.join("ingest_issues.csv"))?;
    issues.write_record(["path", "message"])?;
    for i in &report.issues {
        log::warn!("{i}");
        issues.write_record([i.path.display().to_string(), i.message.clone()])?;
    }
    issues.flush()?;
    let mut manifest = report.manifest.clone();
    let images_dir = out.join("images");
    std::fs::create_dir_all(&images_dir)?;
    for e in manifest.entries.iter_mut() {
        let img = load_rgb8(&report.manifest.image_path(e))?;
        e.path = PathBuf::from("images").join(format!("{}.png", e.image_id));
        save_png(&img, &out.join(&e.path))?;
    }
    manifest.root = out.to_path_buf();
    manifest.validate()?;
    manifest.write(out)?;
    log::info!(
        "prepared {} train / {} test images, {} annotations, {} issues",
        manifest.count(Split::Train),
        manifest.count(Split::Test),
        manifest.annotations.len(),
        report.issues.len()
    );
    Ok(())
}

fn adam_config() -> AdamConfig {
    AdamConfig::default()
}

fn load_detector(path: &Path) -> Result<(Detector, ParamStore<f32>)> {
    let ck = Checkpoint::load(path, DETECTOR_KIND)?;
    let cfg: DetectorConfig =
        toml::from_str(ck.config()).with_context(|| format!("{}: bad config", path.display()))?;
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &cfg, &mut rng_for(0, 0))?;
    ck.restore(path, &mut store, adam_config())?;
    Ok((det, store))
}

fn load_classifier(path: &Path) -> Result<(PatchClassifier, ParamStore<f32>)> {
    let ck = Checkpoint::load(path, CLASSIFIER_KIND)?;
    let mut cfg: ClassifierConfig =
        toml::from_str(ck.config()).with_context(|| format!("{}: bad config", path.display()))?;
    cfg.pretrained = None;
    let mut store = ParamStore::new();
    let cls = PatchClassifier::new(&mut store, &cfg, &mut rng_for(0, 0))?;
    ck.restore(path, &mut store, adam_config())?;
    Ok((cls, store))
}

struct CsvLog {
    file: File,
}

impl CsvLog {
    fn open(path: &Path, header: &str, append: bool) -> Result<Self> {
        let exists = path.exists();
        let mut file = std::fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)?;
        if !append || !exists {
            writeln!(file, "{header}")?;
        }
        Ok(Self { file })
    }

    fn row(&mut self, line: String) -> mitodet::Result<()> {
        writeln!(self.file, "{line}")?;
        Ok(())
    }
}

pub fn train_det(cfg: &RunConfig, data_dir: &Path, out: &Path, resume: bool) -> Result<()> {
    cfg.write_audit(out)?;
    let data = load_dataset(data_dir)?;
    let ckpt = out.join(DETECTOR_CKPT);
    let config_text = toml::to_string(&cfg.detector)?;
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &cfg.detector, &mut rng_for(cfg.seed, 10))?;
    let mut opt = if resume && ckpt.exists() {
        let ck = Checkpoint::load(&ckpt, DETECTOR_KIND)?;
        if ck.config() != config_text {
            bail!(mitodet::Error::InvalidArgument(
                "detector config differs from the checkpoint being resumed".into()
            ));
        }
        let opt = ck.restore(&ckpt, &mut store, adam_config())?;
        log::info!("resuming detector training at step {}", opt.step_count());
        opt
    } else {
        if let Some(p) = &cfg.run.backbone_pretrained {
            let untouched = mitodet::backbone::load_pretrained(&mut store, p)?;
            log::info!(
                "pretrained weights loaded; {} tensors kept their init",
                untouched.len()
            );
        }
        Adam::new(adam_config())
    };
    let start = opt.step_count();
    let crops = make_training_crops(
        &data,
        Split::Train,
        cfg.crops.crop,
        cfg.crops.negatives_per_image,
        &mut rng_for(cfg.seed, 11),
    )?;
    let samples: Vec<_> = crops.iter().map(|c| c.to_sample()).collect();
    log::info!("{} training crops of {} px", samples.len(), cfg.crops.crop);
    let mut log_file = CsvLog::open(
        &out.join(TRAIN_LOG),
        "step,lr,grad_norm,loss,anchor_cls,anchor_box,free_cls,free_box,anchor_positives,free_positives",
        start > 0,
    )?;
    let t0 = Instant::now();
    // Resumed runs draw from a stream keyed by the start step.
    let mut rng = rng_for(cfg.seed, 12 + 1000 * start);
    let every = cfg.run.checkpoint_every.max(1);
    let log_every = cfg.run.log_every.max(1);
    let total = cfg.train_det.steps;
    while opt.step_count() < total {
        let until = (opt.step_count() / every + 1) * every;
        train_detector(
            &det,
            &mut store,
            &mut opt,
            &samples,
            &cfg.train_det,
            until,
            &mut rng,
            |s| {
                let l = &s.loss;
                log_file.row(format!(
                    "{},{:.6e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                    s.step,
                    s.lr,
                    s.grad_norm,
                    l.total(),
                    l.anchor_cls,
                    l.anchor_box,
                    l.free_cls,
                    l.free_box,
                    l.anchor_positives,
                    l.free_positives
                ))?;
                if s.step % log_every == 0 || s.step == total {
                    log::info!(
                        "det step {}/{} loss {:.4} ({:.1}s)",
                        s.step,
                        total,
                        l.total(),
                        t0.elapsed().as_secs_f64()
                    );
                }
                Ok(())
            },
        )
        .map_err(anyhow::Error::from)?;
        save_checkpoint(&ckpt, DETECTOR_KIND, &config_text, &store, &opt)?;
    }
    log::info!(
        "detector checkpoint at step {} -> {}",
        opt.step_count(),
        ckpt.display()
    );
    Ok(())
}

fn dataset_images(data: &LoadedDataset, split: Split) -> Vec<(String, usize)> {
    data.indices(split)
        .into_iter()
        .map(|i| (data.manifest.entries[i].image_id.clone(), i))
        .collect()
}

/// Runs the detector over the training split and exports every unmatched
/// detection as a hard-negative patch.
pub fn mine(cfg: &RunConfig, data_dir: &Path, detector: &Path, out: &Path) -> Result<()> {
    cfg.write_audit(out)?;
    let data = load_dataset(data_dir)?;
    let (det, store) = load_detector(detector)?;
    let mut samples = Vec::new();
    let mut counts = Counts::default();
    let mut rows = Vec::new();
    let t0 = Instant::now();
    for (id, idx) in dataset_images(&data, Split::Train) {
        let src = &data.images[idx];
        let img = RgbImage::from_source(src);
        let dets = detect_tiled(&det, &store, &img, &cfg.cascade)?;
        let centers: Vec<(f64, f64)> = dets.iter().map(|d| pixel_center(&d.bbox)).collect();
        let gts: Vec<(f64, f64)> = data.gts(idx).iter().map(|a| a.centroid).collect();
        let m = match_detections(&centers, &gts, cfg.eval.radius)?;
        counts.add(&m);
        for &fp in &m.fp {
            let (cx, cy) = centers[fp];
            samples.push(PatchSample::cut(
                src,
                &id,
                cx,
                cy,
                cfg.classifier.train_crop,
                PatchProvenance::DetectorFp,
            ));
        }
        rows.extend(dets.iter().map(|&d| DetectionRow {
            image_id: id.clone(),
            det: d,
        }));
    }
    write_patch_set(out, &samples)?;
    write_detections(&out.join(STAGE_ONE_TABLE), &rows)?;
    let metrics = metrics_from_counts(counts);
    std::fs::write(
        out.join(METRICS_REPORT),
        format_report(
            counts,
            metrics,
            cfg.eval.radius,
            data.indices(Split::Train).len(),
        ),
    )?;
    log::info!(
        "mined {} hard negatives (train tp {} fp {} fn {}, f1 {:.4}) in {:.1}s",
        samples.len(),
        counts.tp,
        counts.fp,
        counts.fn_,
        metrics.f1,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

pub fn train_cls(
    cfg: &RunConfig,
    data_dir: &Path,
    hard: Option<&Path>,
    out: &Path,
    resume: bool,
) -> Result<()> {
    cfg.write_audit(out)?;
    let data = load_dataset(data_dir)?;
    let hard_set = match hard {
        Some(dir) => read_patch_set(dir)
            .with_context(|| format!("reading {}", dir.join(PATCH_MANIFEST).display()))?,
        None => Vec::new(),
    };
    let (set, summary) = build_training_set(
        &data,
        Split::Train,
        &hard_set,
        cfg.classifier.train_crop,
        &cfg.train_cls.training_set,
        &mut rng_for(cfg.seed, 20),
    )?;
    let ckpt = out.join(CLASSIFIER_CKPT);
    let mut model_cfg = cfg.classifier.clone();
    model_cfg.pretrained = None;
    let config_text = toml::to_string(&model_cfg)?;
    let (model, mut store, untouched) =
        build_classifier(&cfg.classifier, &mut rng_for(cfg.seed, 21))?;
    if cfg.classifier.pretrained.is_some() {
        log::info!(
            "pretrained classifier weights loaded; {} tensors kept their init",
            untouched.len()
        );
    }
    let mut opt = if resume && ckpt.exists() {
        let ck = Checkpoint::load(&ckpt, CLASSIFIER_KIND)?;
        if ck.config() != config_text {
            bail!(mitodet::Error::InvalidArgument(
                "classifier config differs from the checkpoint being resumed".into()
            ));
        }
        let opt = ck.restore(&ckpt, &mut store, adam_config())?;
        log::info!("resuming classifier training at step {}", opt.step_count());
        opt
    } else {
        Adam::new(adam_config())
    };
    let start = opt.step_count();
    let mut sampling = CsvLog::open(
        &out.join(SAMPLING_LOG),
        "step,batch,positives,negatives",
        start > 0,
    )?;
    if start == 0 {
        let mut w = csv::Writer::from_path(out.join("training_set.csv"))?;
        w.write_record(["provenance", "count"])?;
        w.write_record(["gt-positive", &summary.positives.to_string()])?;
        w.write_record(["background", &summary.background.to_string()])?;
        w.write_record(["detector-fp", &summary.detector_fp.to_string()])?;
        w.flush()?;
    }
    log::info!(
        "classifier set: {} positives from {} annotations, {} background, {} detector-fp",
        summary.positives,
        summary.annotations,
        summary.background,
        summary.detector_fp
    );
    let mut log_file = CsvLog::open(
        &out.join(TRAIN_LOG),
        "step,lr,grad_norm,loss,accuracy",
        start > 0,
    )?;
    let t0 = Instant::now();
    let log_every = cfg.run.log_every.max(1);
    let total = cfg.train_cls.steps;
    let mut rng = rng_for(cfg.seed, 22 + 1000 * start);
    let every = cfg.run.checkpoint_every.max(1);
    while opt.step_count() < total {
        let until = (opt.step_count() / every + 1) * every;
        train_classifier(
            &model,
            &mut store,
            &mut opt,
            &set,
            &cfg.train_cls,
            until,
            &mut rng,
            |s| {
                log_file.row(format!(
                    "{},{:.6e},{:.6},{:.6},{:.4}",
                    s.step, s.lr, s.grad_norm, s.loss, s.accuracy
                ))?;
                sampling.row(format!(
                    "{},{},{},{}",
                    s.step,
                    s.batch,
                    s.positives,
                    s.batch - s.positives
                ))?;
                if s.step % log_every == 0 || s.step == total {
                    log::info!(
                        "cls step {}/{} loss {:.4} acc {:.3} ({:.1}s)",
                        s.step,
                        total,
                        s.loss,
                        s.accuracy,
                        t0.elapsed().as_secs_f64()
                    );
                }
                Ok(())
            },
        )
        .map_err(anyhow::Error::from)?;
        save_checkpoint(&ckpt, CLASSIFIER_KIND, &config_text, &store, &opt)?;
    }
    log::info!(
        "classifier checkpoint at step {} -> {}",
        opt.step_count(),
        ckpt.display()
    );
    Ok(())
}

/// Where `infer` reads images from.
pub enum ImageSource<'a> {
    Dataset(&'a Path),
    Directory(&'a Path),
}

fn collect_images(src: ImageSource<'_>, split: Split) -> Result<Vec<(String, image::RgbImage)>> {
    match src {
        ImageSource::Dataset(root) => {
            let data = load_dataset(root)?;
            Ok(dataset_images(&data, split)
                .into_iter()
                .map(|(id, i)| (id, data.images[i].clone()))
                .collect())
        }
        ImageSource::Directory(dir) => {
            let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            paths.sort();
            paths
                .into_iter()
                .map(|p| {
                    let id = p.file_stem().unwrap().to_string_lossy().to_string();
                    Ok((id, load_rgb8(&p)?))
                })
                .collect()
        }
    }
}

pub fn infer(
    cfg: &RunConfig,
    images: ImageSource<'_>,
    detector: &Path,
    classifier: Option<&Path>,
    overlays: bool,
    out: &Path,
) -> Result<()> {
    cfg.write_audit(out)?;
    let (det, det_store) = load_detector(detector)?;
    let cls = classifier.map(load_classifier).transpose()?;
    let images = collect_images(images, cfg.eval.split)?;
    if overlays {
        std::fs::create_dir_all(out.join("overlays"))?;
    }
    let mut stage_rows = Vec::new();
    let mut final_rows = Vec::new();
    let t0 = Instant::now();
    for (id, src) in &images {
        let img = RgbImage::from_source(src);
        let stage_one = detect_tiled(&det, &det_store, &img, &cfg.cascade)?;
        let final_dets = match &cls {
            Some((model, store)) => {
                let scored =
                    score_candidates(model, store, &img, &stage_one, cfg.cascade.cls_batch)?;
                refine(&scored, cfg.cascade.cls_threshold)
            }
            None => stage_one.clone(),
        };
        if overlays {
            save_png(
                &overlay(src, &final_dets),
                &out.join("overlays").join(format!("{id}.png")),
            )?;
        }
        let row = |d: &mitodet::detection_head::Detection| DetectionRow {
            image_id: id.clone(),
            det: *d,
        };
        stage_rows.extend(stage_one.iter().map(row));
        final_rows.extend(final_dets.iter().map(row));
    }
    write_detections(&out.join(STAGE_ONE_TABLE), &stage_rows)?;
    write_detections(&out.join(DETECTION_TABLE), &final_rows)?;
    log::info!(
        "{} images: {} stage-one, {} final detections ({:.1}s)",
        images.len(),
        stage_rows.len(),
        final_rows.len(),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

/// Matches a detection table against the annotations of one split.
pub fn evaluate(cfg: &RunConfig, detections: &Path, data_dir: &Path, out: &Path) -> Result<String> {
    cfg.write_audit(out)?;
    let manifest = DatasetManifest::read(data_dir)?;
    let rows = read_detections(detections)?;
    let mut by_image: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        by_image
            .entry(r.image_id.as_str())
            .or_default()
            .push(pixel_center(&r.det.bbox));
    }
    let split = cfg.eval.split;
    let entries: Vec<_> = manifest.entries_in(split).collect();
    let known: std::collections::HashSet<&str> =
        entries.iter().map(|e| e.image_id.as_str()).collect();
    let foreign = by_image.keys().filter(|k| !known.contains(*k)).count();
    if foreign > 0 {
        log::warn!("{foreign} images in the detection table are not in the {split} split; ignored");
    }
    let mut counts = Counts::default();
    let mut audit = Vec::new();
    for e in &entries {
        let dets = by_image
            .get(e.image_id.as_str())
            .cloned()
            .unwrap_or_default();
        let gts: Vec<(f64, f64)> = manifest
            .annotations_for(&e.image_id)
            .map(|a| a.centroid)
            .collect();
        let m = match_detections(&dets, &gts, cfg.eval.radius)?;
        counts.add(&m);
        audit.extend(match_rows(&e.image_id, &m));
    }
    let report = format_report(
        counts,
        metrics_from_counts(counts),
        cfg.eval.radius,
        entries.len(),
    );
    std::fs::write(out.join(METRICS_REPORT), &report)?;
    write_match_rows(&out.join(MATCH_TABLE), &audit)?;
    Ok(report)
}
