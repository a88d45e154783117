use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detection_head::Rect;
use crate::error::{Error, Result};

/// Inclusive integer pixel extents `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Continuous box covering every listed pixel.
    pub fn to_rect(&self) -> Rect {
        Rect::new(self.x1, self.y1, self.x2 + 1.0, self.y2 + 1.0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }
}

/// One ground-truth object.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub centroid: (f64, f64),
    pub bbox: Option<PixelBox>,
    /// `(x, y)` pixels.
    pub mask: Option<Vec<(u32, u32)>>,
}

/// Box side used when a record carries no extent.
pub const DEFAULT_BOX_SIDE: f64 = 16.0;

impl AnnotationRecord {
    pub fn from_centroid(image_id: &str, x: f64, y: f64) -> Self {
        Self {
            image_id: image_id.to_string(),
            centroid: (x, y),
            bbox: None,
            mask: None,
        }
    }

    /// Centroid is the rounded pixel mean, box the inclusive extent.
    pub fn from_mask(image_id: &str, pixels: Vec<(u32, u32)>) -> Result<Self> {
        if pixels.is_empty() {
            return Err(Error::invalid("empty mask"));
        }
        let n = pixels.len() as f64;
        let mx = pixels.iter().map(|p| p.0 as f64).sum::<f64>() / n;
        let my = pixels.iter().map(|p| p.1 as f64).sum::<f64>() / n;
        let ext = |f: fn(&(u32, u32)) -> u32| {
            let v = pixels.iter().map(f);
            (v.clone().min().unwrap() as f64, v.max().unwrap() as f64)
        };
        let (x1, x2) = ext(|p| p.0);
        let (y1, y2) = ext(|p| p.1);
        Ok(Self {
            image_id: image_id.to_string(),
            centroid: (mx.round(), my.round()),
            bbox: Some(PixelBox::new(x1, y1, x2, y2)),
            mask: Some(pixels),
        })
    }

    pub fn from_box(image_id: &str, b: PixelBox) -> Self {
        Self {
            image_id: image_id.to_string(),
            centroid: b.center(),
            bbox: Some(b),
            mask: None,
        }
    }

    /// Continuous box used for detector targets.
    pub fn training_box(&self) -> Rect {
        match self.bbox {
            Some(b) => b.to_rect(),
            None => Rect::from_center(
                self.centroid.0 + 0.5,
                self.centroid.1 + 0.5,
                DEFAULT_BOX_SIDE,
                DEFAULT_BOX_SIDE,
            ),
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        let (x, y) = self.centroid;
        if !(x >= 0.0 && y >= 0.0 && x < width as f64 && y < height as f64) {
            return Err(Error::invalid(format!(
                "centroid ({x}, {y}) of {} outside {width}x{height}",
                self.image_id
            )));
        }
        if let Some(b) = self.bbox {
            if !b.contains(x, y) {
                return Err(Error::invalid(format!(
                    "centroid ({x}, {y}) outside its box in {}",
                    self.image_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    IcprLike,
    BoxLike,
    Synthetic,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::IcprLike => "icpr-like",
            Provenance::BoxLike => "box-like",
            Provenance::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "icpr-like" => Ok(Provenance::IcprLike),
            "box-like" => Ok(Provenance::BoxLike),
            "synthetic" => Ok(Provenance::Synthetic),
            other => Err(Error::invalid(format!("unknown provenance '{other}'"))),
        }
    }
}

pub const ICPR_SPACING_UM: f64 = 0.2456;
pub const BOX_SPACING_UM: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub image_id: String,
    /// Relative to the dataset root unless absolute.
    pub path: PathBuf,
    pub split: Split,
    pub spacing_um: f64,
    pub patient: Option<String>,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub annotations: Vec<AnnotationRecord>,
    /// Look-alike objects, recorded for diagnostics only.
    pub distractors: Vec<AnnotationRecord>,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> + '_ {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    pub fn image_path(&self, e: &ManifestEntry) -> PathBuf {
        if e.path.is_absolute() {
            e.path.clone()
        } else {
            self.root.join(&e.path)
        }
    }

    pub fn annotations_for<'a>(
        &'a self,
        image_id: &'a str,
    ) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.annotations
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    pub fn distractors_for<'a>(
        &'a self,
        image_id: &'a str,
    ) -> impl Iterator<Item = &'a AnnotationRecord> + 'a {
        self.distractors
            .iter()
            .filter(move |a| a.image_id == image_id)
    }

    /// Disjoint ids across splits, disjoint patients across splits, and every
    /// annotation attached to a listed image.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for e in &self.entries {
            if !ids.insert(e.image_id.as_str()) {
                return Err(Error::invalid(format!(
                    "image id '{}' listed twice",
                    e.image_id
                )));
            }
        }
        let patients = |s: Split| -> BTreeSet<&str> {
            self.entries_in(s)
                .filter_map(|e| e.patient.as_deref())
                .collect()
        };
        if let Some(p) = patients(Split::Train)
            .intersection(&patients(Split::Test))
            .next()
        {
            return Err(Error::invalid(format!(
                "patient '{p}' appears in both splits"
            )));
        }
        for a in self.annotations.iter().chain(&self.distractors) {
            if !ids.contains(a.image_id.as_str()) {
                return Err(Error::invalid(format!(
                    "annotation for unknown image '{}'",
                    a.image_id
                )));
            }
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        super::io::read_native(root)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        super::io::write_native(self, root)
    }
}
