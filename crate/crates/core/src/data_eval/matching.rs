//! Centroid matching and detection metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_MATCH_RADIUS: f64 = 20.0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    /// `(detection index, gt index, distance px)`.
    pub tp_pairs: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.tp_pairs.len()
    }
}

/// One-to-one greedy assignment by ascending distance (ties by detection
/// index, then gt index); pairs farther than `radius` never match.
pub fn match_detections(
    dets: &[(f64, f64)],
    gts: &[(f64, f64)],
    radius: f64,
) -> Result<MatchResult> {
    if !(radius > 0.0) {
        return Err(Error::invalid("match radius must be positive"));
    }
    let mut pairs = Vec::new();
    for (di, d) in dets.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            let dist = (d.0 - g.0).hypot(d.1 - g.1);
            if dist <= radius {
                pairs.push((dist, di, gi));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut det_used = vec![false; dets.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for (dist, di, gi) in pairs {
        if !det_used[di] && !gt_used[gi] {
            det_used[di] = true;
            gt_used[gi] = true;
            out.tp_pairs.push((di, gi, dist));
        }
    }
    out.tp_pairs.sort_by_key(|p| (p.0, p.1));
    out.fp = (0..dets.len()).filter(|&i| !det_used[i]).collect();
    out.fn_ = (0..gts.len()).filter(|&i| !gt_used[i]).collect();
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn add(&mut self, m: &MatchResult) {
        self.tp += m.tp();
        self.fp += m.fp.len();
        self.fn_ += m.fn_.len();
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Harmonic-mean F1 of a precision/recall pair; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    ratio(2.0 * precision * recall, precision + recall)
}

pub fn metrics_from_counts(c: Counts) -> Metrics {
    let precision = ratio(c.tp as f64, (c.tp + c.fp) as f64);
    let recall = ratio(c.tp as f64, (c.tp + c.fn_) as f64);
    Metrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
    }
}

pub fn compute_metrics(m: &MatchResult) -> Metrics {
    let mut c = Counts::default();
    c.add(m);
    metrics_from_counts(c)
}

/// `key: value` report.
pub fn format_report(c: Counts, m: Metrics, radius: f64, images: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "images: {images}");
    let _ = writeln!(s, "radius_px: {radius}");
    let _ = writeln!(s, "tp: {}", c.tp);
    let _ = writeln!(s, "fp: {}", c.fp);
    let _ = writeln!(s, "fn: {}", c.fn_);
    let _ = writeln!(s, "precision: {:.6}", m.precision);
    let _ = writeln!(s, "recall: {:.6}", m.recall);
    let _ = writeln!(s, "f1: {:.6}", m.f1);
    s
}

/// Reads the numeric fields of a report produced by [`format_report`].
pub fn parse_report(text: &str) -> Result<(Counts, Metrics)> {
    let mut c = Counts::default();
    let mut m = Metrics::default();
    let mut seen = 0;
    for line in text.lines() {
        let Some((k, v)) = line.split_once(':') else {
            continue;
        };
        let v = v.trim();
        let num = || {
            v.parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad report value '{v}'")))
        };
        match k.trim() {
            "tp" => c.tp = num()? as usize,
            "fp" => c.fp = num()? as usize,
            "fn" => c.fn_ = num()? as usize,
            "precision" => m.precision = num()?,
            "recall" => m.recall = num()?,
            "f1" => m.f1 = num()?,
            _ => continue,
        }
        seen += 1;
    }
    if seen < 6 {
        return Err(Error::invalid("incomplete metrics report"));
    }
    Ok((c, m))
}

/// One row of the audit table written next to a report.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchRow {
    pub image_id: String,
    pub kind: &'static str,
    pub det_index: Option<usize>,
    pub gt_index: Option<usize>,
    pub distance: Option<f64>,
}

pub fn match_rows(image_id: &str, m: &MatchResult) -> Vec<MatchRow> {
    let mut rows: Vec<MatchRow> = m
        .tp_pairs
        .iter()
        .map(|&(d, g, dist)| MatchRow {
            image_id: image_id.to_string(),
            kind: "tp",
            det_index: Some(d),
            gt_index: Some(g),
            distance: Some(dist),
        })
        .collect();
    rows.extend(m.fp.iter().map(|&d| MatchRow {
        image_id: image_id.to_string(),
        kind: "fp",
        det_index: Some(d),
        gt_index: None,
        distance: None,
    }));
    rows.extend(m.fn_.iter().map(|&g| MatchRow {
        image_id: image_id.to_string(),
        kind: "fn",
        det_index: None,
        gt_index: Some(g),
        distance: None,
    }));
    rows
}

pub fn write_match_rows(path: &Path, rows: &[MatchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["image_id", "kind", "det_index", "gt_index", "distance_px"])?;
    for r in rows {
        w.write_record([
            r.image_id.clone(),
            r.kind.to_string(),
            r.det_index.map(|v| v.to_string()).unwrap_or_default(),
            r.gt_index.map(|v| v.to_string()).unwrap_or_default(),
            r.distance.map(|v| format!("{v:.4}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_boundary() {
        for (d, tp) in [(19.0, 1), (20.0, 1), (21.0, 0)] {
            let m = match_detections(&[(d, 0.0)], &[(0.0, 0.0)], 20.0).unwrap();
            assert_eq!(m.tp(), tp);
            assert_eq!(m.fp.len(), 1 - tp);
            assert_eq!(m.fn_.len(), 1 - tp);
        }
    }

    #[test]
    fn closest_detection_wins() {
        let m = match_detections(&[(10.0, 0.0), (5.0, 0.0)], &[(0.0, 0.0)], 20.0).unwrap();
        assert_eq!(m.tp_pairs, vec![(1, 0, 5.0)]);
        assert_eq!(m.fp, vec![0]);
    }

    #[test]
    fn zero_counts_give_zero_metrics() {
        assert_eq!(compute_metrics(&MatchResult::default()), Metrics::default());
    }

    #[test]
    fn report_round_trip() {
        let c = Counts {
            tp: 3,
            fp: 1,
            fn_: 2,
        };
        let m = metrics_from_counts(c);
        let (c2, m2) = parse_report(&format_report(c, m, 20.0, 1)).unwrap();
        assert_eq!(c, c2);
        assert!((m.f1 - m2.f1).abs() < 1e-6);
    }
}
