//! Datasets: annotation model, on-disk layouts, synthetic fields, training
//! crops, and centroid-distance evaluation.

pub mod annotations;
pub mod crops;
pub mod ingest;
pub mod io;
pub mod matching;
pub mod synth;

pub use annotations::{
    AnnotationRecord, DatasetManifest, ManifestEntry, PixelBox, Provenance, Split, DEFAULT_BOX_SIDE,
};
pub use crops::{make_training_crops, remap_annotations, LoadedDataset, TrainingCrop};
pub use ingest::{ingest, DatasetFormat, IngestIssue, IngestReport};
pub use matching::{
    compute_metrics, f1_score, match_detections, metrics_from_counts, Counts, MatchResult, Metrics,
    DEFAULT_MATCH_RADIUS,
};
pub use synth::{synthesize_dataset, SynthDataset, SynthSpec};
