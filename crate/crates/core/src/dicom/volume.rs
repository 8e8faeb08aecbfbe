use std::path::Path;

use log::{debug, warn};
use ndarray::{s, Array3};
use thiserror::Error;

use super::{looks_like_dicom, parse_dicom_file, DicomError, SliceRecord};

const SPACING_TOL_MM: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spacing {
    pub sag_mm: f64,
    pub row_mm: f64,
    pub col_mm: f64,
}

/// An `S × H × W` sagittal scan.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
    pub spacing: Spacing,
    pub slice_positions: Vec<f64>,
}

impl Volume {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn pixel_spacing(&self) -> (f64, f64) {
        (self.spacing.row_mm, self.spacing.col_mm)
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("no slices in series")]
    EmptySeries,
    #[error("slice {index} has geometry {found} but the series has {expected}")]
    InconsistentGeometry {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: DicomError,
    },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Stack slices into a volume ordered by ascending sagittal position.
///
/// Ties are broken by instance number (missing numbers last), then input order.
pub fn assemble_volume(slices: Vec<SliceRecord>) -> Result<Volume, VolumeError> {
    let first = slices.first().ok_or(VolumeError::EmptySeries)?;
    let (rows, cols, spacing) = (first.rows, first.cols, first.pixel_spacing);
    for (index, s) in slices.iter().enumerate() {
        let same = s.rows == rows
            && s.cols == cols
            && (s.pixel_spacing.0 - spacing.0).abs() <= SPACING_TOL_MM
            && (s.pixel_spacing.1 - spacing.1).abs() <= SPACING_TOL_MM
            && s.pixels.dim() == (s.rows, s.cols);
        if !same {
            return Err(VolumeError::InconsistentGeometry {
                index,
                expected: format!("{rows}x{cols} @ {spacing:?}"),
                found: format!("{}x{} @ {:?}", s.rows, s.cols, s.pixel_spacing),
            });
        }
    }

    let mut order: Vec<usize> = (0..slices.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&slices[a], &slices[b]);
        sa.slice_position
            .total_cmp(&sb.slice_position)
            .then_with(|| match (sa.instance_number, sb.instance_number) {
                (Some(x), Some(y)) => x.cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            })
            .then_with(|| a.cmp(&b))
    });

    let positions: Vec<f64> = order.iter().map(|&i| slices[i].slice_position).collect();
    if positions.windows(2).any(|w| w[0] == w[1]) {
        warn!("series contains duplicate slice positions; keeping all slices");
    }
    let mut gaps: Vec<f64> = positions.windows(2).map(|w| w[1] - w[0]).collect();
    let sag_mm = if gaps.is_empty() { 0.0 } else { median(&mut gaps) };

    let mut data = Array3::<f64>::zeros((slices.len(), rows, cols));
    for (k, &i) in order.iter().enumerate() {
        data.slice_mut(s![k, .., ..]).assign(&slices[i].pixels);
    }
    Ok(Volume {
        data,
        spacing: Spacing {
            sag_mm,
            row_mm: spacing.0,
            col_mm: spacing.1,
        },
        slice_positions: positions,
    })
}

/// Parse every DICOM file directly inside `dir`, in file-name order. Files
/// that do not look like DICOM are skipped.
pub fn load_series(dir: &Path) -> Result<Vec<SliceRecord>, VolumeError> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut slices = Vec::new();
    for path in paths {
        let bytes = std::fs::read(&path)?;
        if !looks_like_dicom(&bytes) {
            debug!("skipping non-DICOM file {}", path.display());
            continue;
        }
        let record = parse_dicom_file(&bytes).map_err(|source| VolumeError::File {
            path: path.display().to_string(),
            source,
        })?;
        slices.push(record);
    }
    Ok(slices)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn slice(pos: f64, n: usize, inst: Option<i64>) -> SliceRecord {
        SliceRecord {
            rows: n,
            cols: n,
            pixel_spacing: (1.0, 1.0),
            slice_position: pos,
            instance_number: inst,
            pixels: Array2::from_elem((n, n), pos),
        }
    }

    #[test]
    fn sorts_by_position() {
        let v = assemble_volume(vec![slice(10.0, 4, None), slice(0.0, 4, None), slice(5.0, 4, None)])
            .unwrap();
        assert_eq!(v.slice_positions, vec![0.0, 5.0, 10.0]);
        assert_eq!(v.data[[2, 0, 0]], 10.0);
        assert_eq!(v.spacing.sag_mm, 5.0);
    }

    #[test]
    fn single_slice_has_zero_sagittal_spacing() {
        let v = assemble_volume(vec![slice(3.0, 4, None)]).unwrap();
        assert_eq!(v.dims(), (1, 4, 4));
        assert_eq!(v.spacing.sag_mm, 0.0);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let err = assemble_volume(vec![slice(0.0, 4, None), slice(1.0, 5, None)]).unwrap_err();
        assert!(matches!(err, VolumeError::InconsistentGeometry { index: 1, .. }));
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(matches!(assemble_volume(vec![]), Err(VolumeError::EmptySeries)));
    }

    #[test]
    fn duplicate_positions_tie_break_on_instance_number() {
        let mut a = slice(1.0, 2, Some(9));
        a.pixels.fill(9.0);
        let mut b = slice(1.0, 2, Some(3));
        b.pixels.fill(3.0);
        let v = assemble_volume(vec![a, b]).unwrap();
        assert_eq!(v.data[[0, 0, 0]], 3.0);
        assert_eq!(v.data[[1, 0, 0]], 9.0);
    }

    #[test]
    fn median_gap_is_used() {
        let v = assemble_volume(vec![
            slice(0.0, 2, None),
            slice(1.0, 2, None),
            slice(2.0, 2, None),
            slice(10.0, 2, None),
        ])
        .unwrap();
        assert_eq!(v.spacing.sag_mm, 1.0);
    }
}
