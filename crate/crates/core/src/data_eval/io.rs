//! Native dataset layout:
//!
//! ```text
//! <root>/manifest.csv      image_id,path,split,spacing_um,patient,provenance
//! <root>/annotations.csv   image_id,centroid_x,centroid_y,x1,y1,x2,y2
//! <root>/distractors.csv   same columns, optional
//! <root>/images/<id>.png
//! ```
//!
//! Absent optional fields are left blank.

use std::path::{Path, PathBuf};

use super::annotations::{AnnotationRecord, DatasetManifest, ManifestEntry, PixelBox};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const ANNOTATIONS_FILE: &str = "annotations.csv";
pub const DISTRACTORS_FILE: &str = "distractors.csv";

const MANIFEST_HEADER: [&str; 6] = [
    "image_id",
    "path",
    "split",
    "spacing_um",
    "patient",
    "provenance",
];
const ANNOTATION_HEADER: [&str; 7] = [
    "image_id",
    "centroid_x",
    "centroid_y",
    "x1",
    "y1",
    "x2",
    "y2",
];

fn opt_f64(field: &str, path: &Path, line: usize) -> Result<Option<f64>> {
    let t = field.trim();
    if t.is_empty() {
        return Ok(None);
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::format(path, format!("line {line}: bad number '{t}'")))
}

fn req_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    opt_f64(field, path, line)?
        .ok_or_else(|| Error::format(path, format!("line {line}: missing number")))
}

fn check_header(
    rdr: &mut csv::Reader<std::fs::File>,
    expected: &[&str],
    path: &Path,
) -> Result<()> {
    let h = rdr.headers()?;
    if h.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::format(
            path,
            format!("expected header {}", expected.join(",")),
        ));
    }
    Ok(())
}

/// Parses one annotation row.
pub fn parse_annotation_row(
    rec: &csv::StringRecord,
    path: &Path,
    line: usize,
) -> Result<AnnotationRecord> {
    if rec.len() != ANNOTATION_HEADER.len() {
        return Err(Error::format(
            path,
            format!("line {line}: expected 7 fields, got {}", rec.len()),
        ));
    }
    let image_id = rec[0].trim().to_string();
    if image_id.is_empty() {
        return Err(Error::format(path, format!("line {line}: empty image_id")));
    }
    let cx = opt_f64(&rec[1], path, line)?;
    let cy = opt_f64(&rec[2], path, line)?;
    let coords: Vec<Option<f64>> = (3..7)
        .map(|i| opt_f64(&rec[i], path, line))
        .collect::<Result<_>>()?;
    let bbox = match coords.as_slice() {
        [Some(x1), Some(y1), Some(x2), Some(y2)] => {
            if x2 < x1 || y2 < y1 {
                return Err(Error::format(path, format!("line {line}: inverted box")));
            }
            Some(PixelBox::new(*x1, *y1, *x2, *y2))
        }
        [None, None, None, None] => None,
        _ => return Err(Error::format(path, format!("line {line}: partial box"))),
    };
    let centroid = match (cx, cy, bbox) {
        (Some(x), Some(y), _) => (x, y),
        (None, None, Some(b)) => b.center(),
        _ => {
            return Err(Error::format(
                path,
                format!("line {line}: needs a centroid or a box"),
            ))
        }
    };
    Ok(AnnotationRecord {
        image_id,
        centroid,
        bbox,
        mask: None,
    })
}

fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    check_header(&mut rdr, &ANNOTATION_HEADER, path)?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        out.push(parse_annotation_row(&rec?, path, i + 2)?);
    }
    Ok(out)
}

fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ANNOTATION_HEADER)?;
    for a in records {
        let b = |f: fn(&PixelBox) -> f64| a.bbox.map(|b| f(&b).to_string()).unwrap_or_default();
        w.write_record([
            a.image_id.clone(),
            a.centroid.0.to_string(),
            a.centroid.1.to_string(),
            b(|b| b.x1),
            b(|b| b.y1),
            b(|b| b.x2),
            b(|b| b.y2),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_native(root: &Path) -> Result<DatasetManifest> {
    let mpath = root.join(MANIFEST_FILE);
    let mut rdr = csv::Reader::from_path(&mpath)?;
    check_header(&mut rdr, &MANIFEST_HEADER, &mpath)?;
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(Error::format(
                &mpath,
                format!("line {line}: expected 6 fields"),
            ));
        }
        let patient = rec[4].trim();
        entries.push(ManifestEntry {
            image_id: rec[0].trim().to_string(),
            path: PathBuf::from(rec[1].trim()),
            split: rec[2]
                .parse()
                .map_err(|e: Error| Error::format(&mpath, format!("line {line}: {e}")))?,
            spacing_um: req_f64(&rec[3], &mpath, line)?,
            patient: (!patient.is_empty()).then(|| patient.to_string()),
            provenance: rec[5]
                .parse()
                .map_err(|e: Error| Error::format(&mpath, format!("line {line}: {e}")))?,
        });
    }
    let annotations = read_annotations(&root.join(ANNOTATIONS_FILE))?;
    let dpath = root.join(DISTRACTORS_FILE);
    let distractors = if dpath.exists() {
        read_annotations(&dpath)?
    } else {
        Vec::new()
    };
    let m = DatasetManifest {
        root: root.to_path_buf(),
        entries,
        annotations,
        distractors,
    };
    m.validate()?;
    Ok(m)
}

pub fn write_native(m: &DatasetManifest, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut w = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    w.write_record(MANIFEST_HEADER)?;
    for e in &m.entries {
        w.write_record([
            e.image_id.clone(),
            e.path.to_string_lossy().replace('\\', "/"),
            e.split.to_string(),
            e.spacing_um.to_string(),
            e.patient.clone().unwrap_or_default(),
            e.provenance.to_string(),
        ])?;
    }
    w.flush()?;
    write_annotations(&root.join(ANNOTATIONS_FILE), &m.annotations)?;
    write_annotations(&root.join(DISTRACTORS_FILE), &m.distractors)?;
    Ok(())
}
