//! `mitodet` — synthesize or import data, train both stages, run the cascade
//! and score it.
//!
//! Typical workflow:
//!
//! ```text
//! mitodet synth     --out data
//! mitodet train-det --data data --out det
//! mitodet mine      --data data --detector det/detector.ckpt --out hard
//! mitodet train-cls --data data --hard hard --out cls
//! mitodet infer     --data data --detector det/detector.ckpt --classifier cls/classifier.ckpt --out pred
//! mitodet evaluate  --data data --detections pred/detections.csv --out eval
//! ```

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mitodet::data_eval::{DatasetFormat, Split};

use crate::commands::ImageSource;
use crate::config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "mitodet", version, about = "Two-stage mitosis detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_images: Option<usize>,
    },
    /// Import a dataset into the native layout.
    Prepare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// native | masks | boxes
        #[arg(long)]
        format: Option<DatasetFormat>,
    },
    /// Train the first-stage detector.
    TrainDet {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Export unmatched detections on the training split as hard negatives.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: PathBuf,
        #[arg(long)]
        score_thr: Option<f64>,
    },
    /// Train the patch classifier.
    TrainCls {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `mine`.
        #[arg(long)]
        hard: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: bool,
    },
    /// Run the cascade and write detection tables and overlays.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Dataset root; images of `eval.split` are processed.
        #[arg(long, conflicts_with = "images")]
        data: Option<PathBuf>,
        /// Directory of PNG images.
        #[arg(long)]
        images: Option<PathBuf>,
        #[arg(long)]
        detector: PathBuf,
        /// Without it only the detector runs.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        score_thr: Option<f64>,
        #[arg(long)]
        cls_threshold: Option<f64>,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        no_overlays: bool,
    },
    /// Score a detection table against a dataset split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        radius: Option<f64>,
        #[arg(long)]
        split: Option<Split>,
    },
}

fn resolve(common: &Common, edit: impl FnOnce(&mut RunConfig)) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    edit(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, n_images } => {
            let cfg = resolve(&common, |c| {
                if let Some(n) = n_images {
                    c.synth.n_images = n;
                }
            })?;
            commands::synth(&cfg, &common.out)
        }
        Command::Prepare {
            common,
            input,
            format,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(f) = format {
                    c.data.format = f;
                }
            })?;
            commands::prepare(&cfg, &input, &common.out)
        }
        Command::TrainDet {
            common,
            data,
            steps,
            resume,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(s) = steps {
                    c.train_det.steps = s;
                }
            })?;
            commands::train_det(&cfg, &data, &common.out, resume)
        }
        Command::Mine {
            common,
            data,
            detector,
            score_thr,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(t) = score_thr {
                    c.cascade.detector.score_thr = t;
                }
            })?;
            commands::mine(&cfg, &data, &detector, &common.out)
        }
        Command::TrainCls {
            common,
            data,
            hard,
            steps,
            resume,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(s) = steps {
                    c.train_cls.steps = s;
                }
            })?;
            commands::train_cls(&cfg, &data, hard.as_deref(), &common.out, resume)
        }
        Command::Infer {
            common,
            data,
            images,
            detector,
            classifier,
            score_thr,
            cls_threshold,
            split,
            no_overlays,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(t) = score_thr {
                    c.cascade.detector.score_thr = t;
                }
                if let Some(t) = cls_threshold {
                    c.cascade.cls_threshold = t;
                }
                if let Some(s) = split {
                    c.eval.split = s;
                }
            })?;
            let source = match (&data, &images) {
                (Some(d), _) => ImageSource::Dataset(d),
                (None, Some(i)) => ImageSource::Directory(i),
                (None, None) => {
                    return Err(mitodet::Error::InvalidArgument(
                        "infer needs --data or --images".into(),
                    )
                    .into())
                }
            };
            commands::infer(
                &cfg,
                source,
                &detector,
                classifier.as_deref(),
                !no_overlays,
                &common.out,
            )
        }
        Command::Evaluate {
            common,
            detections,
            data,
            radius,
            split,
        } => {
            let cfg = resolve(&common, |c| {
                if let Some(r) = radius {
                    c.eval.radius = r;
                }
                if let Some(s) = split {
                    c.eval.split = s;
                }
            })?;
            let report = commands::evaluate(&cfg, &detections, &data, &common.out)?;
            print!("{report}");
            Ok(())
        }
    }
}

/// Category for the error line: the library's kind when available.
fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(m) = cause.downcast_ref::<mitodet::Error>() {
            return m.kind();
        }
        if cause.downcast_ref::<mitodet_tensor::Error>().is_some() {
            return "tensor-error";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io-error";
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return "invalid-argument";
        }
    }
    "error"
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", error_kind(&e));
            ExitCode::FAILURE
        }
    }
}
