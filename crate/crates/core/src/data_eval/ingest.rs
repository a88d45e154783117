//! Importers for the supported on-disk layouts.
//!
//! * `native` — the layout written by [`DatasetManifest::write`].
//! * `masks` — `<dir>/{train,test}/<id>.png` with either `<id>_mask.png`
//!   (non-zero pixels; each 8-connected component is one object) or
//!   `<id>.csv` (one object per line, flattened `row,col` pixel pairs).
//! * `boxes` — `<dir>/images.csv` (`image_id,path,split,patient`) and
//!   `<dir>/boxes.csv` (`image_id,x1,y1,x2,y2`, inclusive pixel extents).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::annotations::{
    AnnotationRecord, DatasetManifest, ManifestEntry, PixelBox, Provenance, Split, BOX_SPACING_UM,
    ICPR_SPACING_UM,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Native,
    Masks,
    Boxes,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "native" => Ok(Self::Native),
            "masks" => Ok(Self::Masks),
            "boxes" => Ok(Self::Boxes),
            other => Err(Error::invalid(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// A record that could not be imported.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestIssue {
    pub path: PathBuf,
    pub message: String,
}

impl fmt::Display for IngestIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path.display(), self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct IngestReport {
    pub manifest: DatasetManifest,
    pub issues: Vec<IngestIssue>,
}

pub fn ingest(dir: &Path, format: DatasetFormat) -> Result<IngestReport> {
    let report = match format {
        DatasetFormat::Native => IngestReport {
            manifest: DatasetManifest::read(dir)?,
            issues: Vec::new(),
        },
        DatasetFormat::Masks => ingest_masks(dir)?,
        DatasetFormat::Boxes => ingest_boxes(dir)?,
    };
    report.manifest.validate()?;
    Ok(report)
}

/// 8-connected components of the listed pixels, each sorted.
pub fn connected_components(pixels: &[(u32, u32)]) -> Vec<Vec<(u32, u32)>> {
    let mut remaining: std::collections::BTreeSet<(u32, u32)> = pixels.iter().copied().collect();
    let mut out = Vec::new();
    while let Some(&seed) = remaining.iter().next() {
        remaining.remove(&seed);
        let mut comp = vec![seed];
        let mut stack = vec![seed];
        while let Some((x, y)) = stack.pop() {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 {
                        continue;
                    }
                    let n = (nx as u32, ny as u32);
                    if remaining.remove(&n) {
                        comp.push(n);
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

fn mask_pixels(path: &Path) -> Result<Vec<(u32, u32)>> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_luma8();
    Ok(img
        .enumerate_pixels()
        .filter(|(_, _, p)| p.0[0] > 0)
        .map(|(x, y, _)| (x, y))
        .collect())
}

fn csv_objects(path: &Path) -> Result<Vec<Vec<(u32, u32)>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let nums: Vec<u32> = line
            .split(',')
            .map(|t| t.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: non-integer coordinate", i + 1)))?;
        if nums.is_empty() || !nums.len().is_multiple_of(2) {
            return Err(Error::format(
                path,
                format!("line {}: odd number of coordinates", i + 1),
            ));
        }
        out.push(nums.chunks(2).map(|rc| (rc[1], rc[0])).collect());
    }
    Ok(out)
}

fn ingest_masks(dir: &Path) -> Result<IngestReport> {
    let mut report = IngestReport {
        manifest: DatasetManifest {
            root: dir.to_path_buf(),
            ..Default::default()
        },
        issues: Vec::new(),
    };
    for split in [Split::Train, Split::Test] {
        let sub = dir.join(split.to_string());
        if !sub.is_dir() {
            continue;
        }
        let mut images: Vec<PathBuf> = std::fs::read_dir(&sub)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
                    && !p
                        .file_stem()
                        .is_some_and(|s| s.to_string_lossy().ends_with("_mask"))
            })
            .collect();
        images.sort();
        for path in images {
            let id = path.file_stem().unwrap().to_string_lossy().to_string();
            let (w, h) = match image::image_dimensions(&path) {
                Ok(d) => d,
                Err(e) => {
                    report.issues.push(IngestIssue {
                        path: path.clone(),
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            let mask_png = sub.join(format!("{id}_mask.png"));
            let mask_csv = sub.join(format!("{id}.csv"));
            let objects = if mask_png.exists() {
                mask_pixels(&mask_png).map(|px| connected_components(&px))
            } else if mask_csv.exists() {
                csv_objects(&mask_csv)
            } else {
                Ok(Vec::new())
            };
            let objects = match objects {
                Ok(o) => o,
                Err(e) => {
                    report.issues.push(IngestIssue {
                        path: if mask_png.exists() {
                            mask_png
                        } else {
                            mask_csv
                        },
                        message: e.to_string(),
                    });
                    continue;
                }
            };
            for obj in objects {
                let rec = AnnotationRecord::from_mask(&id, obj).and_then(|r| {
                    r.validate(w as usize, h as usize)?;
                    Ok(r)
                });
                match rec {
                    Ok(r) => report.manifest.annotations.push(r),
                    Err(e) => report.issues.push(IngestIssue {
                        path: path.clone(),
                        message: e.to_string(),
                    }),
                }
            }
            report.manifest.entries.push(ManifestEntry {
                image_id: id.clone(),
                path: PathBuf::from(split.to_string()).join(format!("{id}.png")),
                split,
                spacing_um: ICPR_SPACING_UM,
                patient: None,
                provenance: Provenance::IcprLike,
            });
        }
    }
    Ok(report)
}

fn ingest_boxes(dir: &Path) -> Result<IngestReport> {
    let mut report = IngestReport {
        manifest: DatasetManifest {
            root: dir.to_path_buf(),
            ..Default::default()
        },
        issues: Vec::new(),
    };
    let ipath = dir.join("images.csv");
    let mut sizes = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&ipath)?;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let issue = |m: String| IngestIssue {
            path: ipath.clone(),
            message: format!("line {line}: {m}"),
        };
        let rec = match rec {
            Ok(r) if r.len() >= 3 => r,
            Ok(_) => {
                report
                    .issues
                    .push(issue("expected image_id,path,split[,patient]".into()));
                continue;
            }
            Err(e) => {
                report.issues.push(issue(e.to_string()));
                continue;
            }
        };
        let split = match rec[2].parse::<Split>() {
            Ok(s) => s,
            Err(e) => {
                report.issues.push(issue(e.to_string()));
                continue;
            }
        };
        let id = rec[0].trim().to_string();
        let rel = PathBuf::from(rec[1].trim());
        let full = if rel.is_absolute() {
            rel.clone()
        } else {
            dir.join(&rel)
        };
        match image::image_dimensions(&full) {
            Ok(d) => {
                sizes.insert(id.clone(), d);
            }
            Err(e) => {
                report
                    .issues
                    .push(issue(format!("{}: {e}", full.display())));
                continue;
            }
        }
        let patient = rec
            .get(3)
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::to_string);
        report.manifest.entries.push(ManifestEntry {
            image_id: id,
            path: rel,
            split,
            spacing_um: BOX_SPACING_UM,
            patient,
            provenance: Provenance::BoxLike,
        });
    }
    let bpath = dir.join("boxes.csv");
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_path(&bpath)?;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let parsed = rec.map_err(Error::from).and_then(|r| {
            if r.len() != 5 {
                return Err(Error::invalid("expected image_id,x1,y1,x2,y2"));
            }
            let v: Vec<f64> = (1..5)
                .map(|k| {
                    r[k].trim()
                        .parse::<f64>()
                        .map_err(|_| Error::invalid(format!("bad number '{}'", &r[k])))
                })
                .collect::<Result<_>>()?;
            if v[2] < v[0] || v[3] < v[1] {
                return Err(Error::invalid("inverted box"));
            }
            let id = r[0].trim();
            let &(w, h) = sizes
                .get(id)
                .ok_or_else(|| Error::invalid(format!("unknown image '{id}'")))?;
            let rec = AnnotationRecord::from_box(id, PixelBox::new(v[0], v[1], v[2], v[3]));
            rec.validate(w as usize, h as usize)?;
            Ok(rec)
        });
        match parsed {
            Ok(r) => report.manifest.annotations.push(r),
            Err(e) => report.issues.push(IngestIssue {
                path: bpath.clone(),
                message: format!("line {line}: {e}"),
            }),
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn components_are_eight_connected() {
        let px = [(0, 0), (1, 1), (5, 5), (5, 6), (9, 0)];
        let comps = connected_components(&px);
        assert_eq!(comps.len(), 3);
        assert_eq!(comps[0], vec![(0, 0), (1, 1)]);
    }
}
