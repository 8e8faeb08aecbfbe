//! Detection/grading reports and their JSON and CSV forms.
//!
//! JSON: one document `{"vertebrae": [...], "ivvs": [...]}`. Numbers carry at
//! most nine significant digits, so reading a written report gives it back
//! unchanged.
//!
//! CSV: `<stem>_vertebrae.csv` with columns
//! `level, confidence, centroid_slice, centroid_row, centroid_col, slice_lo,
//! slice_hi, row_min, row_max, col_min, col_max, n_slices`, and
//! `<stem>_ivvs.csv` with `upper, lower, center_row, center_col,
//! rotation_rad, width_px, height_px, slice_lo, slice_hi, graded` followed by
//! one column per grading probability (`pfirrmann_1` ... `herniation_2`),
//! empty for ungraded pairs. Polygons are only in the JSON form.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::{Bounds3, VBPolygon, Vertebra3D};
use crate::geometry::Point;
use crate::grading::GradingScores;
use crate::ivv::IVVSpec;
use crate::level::Level;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed report {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePolygon {
    pub slice: usize,
    /// TL, TR, BR, BL.
    pub corners: [Point; 4],
    pub centroid: Point,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertebraRecord {
    pub level: Level,
    /// Mean landmark response.
    pub confidence: f64,
    /// `[slice, row, col]`.
    pub centroid: [f64; 3],
    pub bounds: Bounds3,
    pub polygons: Vec<SlicePolygon>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IvvRecord {
    /// `[upper, lower]`.
    pub level_pair: [Level; 2],
    pub center: Point,
    pub rotation_rad: f64,
    pub width_px: f64,
    pub height_px: f64,
    pub slice_range: [usize; 2],
    pub grading: Option<GradingScores>,
}

/// Vertebrae bottom to top, then intervertebral volumes bottom to top.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionReport {
    pub vertebrae: Vec<VertebraRecord>,
    pub ivvs: Vec<IvvRecord>,
}

/// Round to nine significant digits.
pub fn round_sig(v: f64) -> f64 {
    if v == 0.0 || !v.is_finite() {
        return v;
    }
    format!("{v:.8e}").parse().expect("formatted float parses")
}

fn round_point(p: Point) -> Point {
    Point::new(round_sig(p.row), round_sig(p.col))
}

impl VertebraRecord {
    pub fn new(level: Level, vert: &Vertebra3D) -> Self {
        let (s, c) = vert.centroid_3d;
        let b = vert.bounds;
        Self {
            level,
            confidence: round_sig(vert.score()),
            centroid: [round_sig(s), round_sig(c.row), round_sig(c.col)],
            bounds: Bounds3 {
                row_min: round_sig(b.row_min),
                row_max: round_sig(b.row_max),
                col_min: round_sig(b.col_min),
                col_max: round_sig(b.col_max),
                ..b
            },
            polygons: vert
                .polygons
                .values()
                .map(|p| SlicePolygon {
                    slice: p.slice_index,
                    corners: p.corners.map(round_point),
                    centroid: round_point(p.centroid),
                })
                .collect(),
        }
    }

    /// Rebuild the 3D instance; every polygon takes the record's confidence.
    pub fn to_vertebra(&self) -> Option<Vertebra3D> {
        if self.polygons.is_empty() {
            return None;
        }
        let polys: BTreeMap<usize, VBPolygon> = self
            .polygons
            .iter()
            .map(|p| {
                (
                    p.slice,
                    VBPolygon {
                        slice_index: p.slice,
                        corners: p.corners,
                        centroid: p.centroid,
                        score: self.confidence,
                    },
                )
            })
            .collect();
        Some(Vertebra3D::from_polygons(polys))
    }
}

impl IvvRecord {
    pub fn new(upper: Level, lower: Level, spec: &IVVSpec, grading: Option<GradingScores>) -> Self {
        Self {
            level_pair: [upper, lower],
            center: round_point(spec.center),
            rotation_rad: round_sig(spec.rotation_rad),
            width_px: round_sig(spec.width_px),
            height_px: round_sig(spec.height_px),
            slice_range: [spec.slice_range.0, spec.slice_range.1],
            grading: grading.map(|g| g.map_values(round_sig)),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn report_to_json(report: &DetectionReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serialises");
    s.push('\n');
    s
}

/// CSV paths for an output path: `<dir>/<stem>_vertebrae.csv` and
/// `<dir>/<stem>_ivvs.csv`.
pub fn csv_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let dir = path.parent().unwrap_or(Path::new(""));
    (
        dir.join(format!("{stem}_vertebrae.csv")),
        dir.join(format!("{stem}_ivvs.csv")),
    )
}

/// Write the report; returns the files written.
pub fn write_report(report: &DetectionReport, format: ReportFormat, path: &Path) -> Result<Vec<PathBuf>, ReportError> {
    match format {
        ReportFormat::Json => {
            std::fs::write(path, report_to_json(report)).map_err(io_err(path))?;
            Ok(vec![path.to_path_buf()])
        }
        ReportFormat::Csv => {
            let (vp, ip) = csv_paths(path);
            std::fs::write(&vp, vertebrae_csv(report)?).map_err(io_err(&vp))?;
            std::fs::write(&ip, ivvs_csv(report)?).map_err(io_err(&ip))?;
            Ok(vec![vp, ip])
        }
    }
}

pub fn read_report(path: &Path) -> Result<DetectionReport, ReportError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| ReportError::Malformed {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub const VERTEBRA_COLUMNS: [&str; 12] = [
    "level",
    "confidence",
    "centroid_slice",
    "centroid_row",
    "centroid_col",
    "slice_lo",
    "slice_hi",
    "row_min",
    "row_max",
    "col_min",
    "col_max",
    "n_slices",
];

pub const IVV_COLUMNS: [&str; 10] = [
    "upper",
    "lower",
    "center_row",
    "center_col",
    "rotation_rad",
    "width_px",
    "height_px",
    "slice_lo",
    "slice_hi",
    "graded",
];

/// Grading columns of the IVV table, after [`IVV_COLUMNS`].
pub fn grading_columns() -> Vec<String> {
    let g = GradingScores::from_raw(&GradingScores::uniform_raw()).expect("uniform scores are valid");
    g.columns()
        .iter()
        .flat_map(|(name, v)| (1..=v.len()).map(move |i| format!("{name}_{i}")))
        .collect()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ReportError> {
    let bytes = w.into_inner().map_err(|e| ReportError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn vertebrae_csv(report: &DetectionReport) -> Result<String, ReportError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(VERTEBRA_COLUMNS)?;
    for v in &report.vertebrae {
        let b = &v.bounds;
        w.write_record([
            v.level.to_string(),
            v.confidence.to_string(),
            v.centroid[0].to_string(),
            v.centroid[1].to_string(),
            v.centroid[2].to_string(),
            b.slice_lo.to_string(),
            b.slice_hi.to_string(),
            b.row_min.to_string(),
            b.row_max.to_string(),
            b.col_min.to_string(),
            b.col_max.to_string(),
            v.polygons.len().to_string(),
        ])?;
    }
    finish(w)
}

pub fn ivvs_csv(report: &DetectionReport) -> Result<String, ReportError> {
    let grading_cols = grading_columns();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(IVV_COLUMNS.iter().map(|s| s.to_string()).chain(grading_cols.iter().cloned()))?;
    for r in &report.ivvs {
        let mut row = vec![
            r.level_pair[0].to_string(),
            r.level_pair[1].to_string(),
            r.center.row.to_string(),
            r.center.col.to_string(),
            r.rotation_rad.to_string(),
            r.width_px.to_string(),
            r.height_px.to_string(),
            r.slice_range[0].to_string(),
            r.slice_range[1].to_string(),
            r.grading.is_some().to_string(),
        ];
        match &r.grading {
            Some(g) => row.extend(g.columns().iter().flat_map(|(_, v)| v.iter().map(|x| x.to_string()))),
            None => row.extend(std::iter::repeat_n(String::new(), grading_cols.len())),
        }
        w.write_record(row)?;
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(level: Level, row: f64) -> VertebraRecord {
        let c = Point::new(row, 50.0);
        let corners = [
            Point::new(row - 8.0, 35.0),
            Point::new(row - 8.0, 65.0),
            Point::new(row + 8.0, 65.0),
            Point::new(row + 8.0, 35.0),
        ];
        let poly = |s| VBPolygon { slice_index: s, corners, centroid: c, score: 0.9 };
        let vert = Vertebra3D::from_polygons([(2, poly(2)), (3, poly(3))].into_iter().collect());
        VertebraRecord::new(level, &vert)
    }

    #[test]
    fn empty_report() {
        let r = DetectionReport::default();
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"vertebrae":[],"ivvs":[]}"#
        );
        assert_eq!(vertebrae_csv(&r).unwrap().lines().count(), 1);
        assert_eq!(ivvs_csv(&r).unwrap().lines().count(), 1);
    }

    #[test]
    fn two_vertebrae_csv_rows() {
        let r = DetectionReport {
            vertebrae: vec![record(Level::L5, 80.0), record(Level::L4, 50.0)],
            ivvs: vec![],
        };
        let text = vertebrae_csv(&r).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("L5,0.9,2.5,80,50,2,3,72,88,35,65,2"));
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let spec = IVVSpec {
            center: Point::new(1.0 / 3.0, 2.0 / 7.0),
            rotation_rad: 0.1234567891234,
            width_px: 60.0,
            height_px: 30.0,
            slice_range: (2, 3),
            level_pair: None,
        };
        let g = GradingScores::from_raw(&GradingScores::uniform_raw()).unwrap();
        let r = DetectionReport {
            vertebrae: vec![record(Level::L5, 80.0 + 1.0 / 3.0)],
            ivvs: vec![IvvRecord::new(Level::L5, Level::L4, &spec, Some(g))],
        };
        write_report(&r, ReportFormat::Json, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), r);
        assert_eq!(r.ivvs[0].center.row, 0.333333333);
    }

    #[test]
    fn round_sig_keeps_nine_digits() {
        assert_eq!(round_sig(123.456789012345), 123.456789);
        assert_eq!(round_sig(-0.000123456789123), -0.000123456789);
        assert_eq!(round_sig(0.0), 0.0);
    }

    #[test]
    fn grading_column_count() {
        assert_eq!(grading_columns().len(), 31);
        assert_eq!(grading_columns()[0], "pfirrmann_1");
        assert_eq!(grading_columns()[30], "herniation_2");
    }
}
