//! Oriented intervertebral volumes between consecutive vertebrae.

use ndarray::{s, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decode::Vertebra3D;
use crate::dicom::Volume;
use crate::geometry::Point;
use crate::interp::{sample_bicubic, Border};
use crate::level::Level;

/// `(slices, rows, cols)` of a grading input.
pub const IVV_DIMS: (usize, usize, usize) = (9, 112, 224);

#[derive(Debug, Error, PartialEq)]
pub enum IvvError {
    #[error("vertebrae share no slices")]
    NoSharedSlices,
    #[error("upper vertebra centroid (row {upper}) is not above the lower one (row {lower})")]
    NotAbove { upper: f64, lower: f64 },
}

/// Rotated extraction rectangle, `width = 2 * height`, over an inclusive
/// slice range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IVVSpec {
    pub center: Point,
    /// Angle of the upper vertebra's lower endplate, positive from the column
    /// axis toward increasing rows.
    pub rotation_rad: f64,
    pub width_px: f64,
    pub height_px: f64,
    pub slice_range: (usize, usize),
    /// `(upper, lower)` when known.
    pub level_pair: Option<(Level, Level)>,
}

/// Place the window between `upper` and `lower` (upper is higher in the
/// image, i.e. has the smaller centroid row).
pub fn locate_ivv(upper: &Vertebra3D, lower: &Vertebra3D) -> Result<IVVSpec, IvvError> {
    let (ua, ub) = upper.slice_range();
    let (la, lb) = lower.slice_range();
    let lo = ua.max(la);
    let hi = ub.min(lb);
    if lo > hi {
        return Err(IvvError::NoSharedSlices);
    }
    let cu = upper.centroid_3d.1;
    let cl = lower.centroid_3d.1;
    if cu.row >= cl.row {
        return Err(IvvError::NotAbove { upper: cu.row, lower: cl.row });
    }
    let up = upper.central_polygon();
    let [_, _, br, bl] = up.corners;
    let rotation_rad = (br.row - bl.row).atan2(br.col - bl.col);
    let width_px = 2.0 * up.width().max(lower.central_polygon().width());
    Ok(IVVSpec {
        center: Point::new(0.5 * (cu.row + cl.row), 0.5 * (cu.col + cl.col)),
        rotation_rad,
        width_px,
        height_px: 0.5 * width_px,
        slice_range: (lo, hi),
        level_pair: None,
    })
}

/// Slice indices sampled for the `IVV_DIMS.0` output planes: nearest slice to
/// evenly spaced positions over the range, ties toward the lower end.
pub fn sampled_slices(range: (usize, usize)) -> Vec<usize> {
    let (lo, hi) = range;
    let n = IVV_DIMS.0;
    (0..n)
        .map(|k| {
            let pos = lo as f64 + k as f64 * (hi - lo) as f64 / (n - 1) as f64;
            let base = pos.floor();
            let idx = if pos - base > 0.5 { base + 1.0 } else { base };
            (idx as usize).min(hi)
        })
        .collect()
}

/// Sample the rotated rectangle on a `112 × 224` grid per sampled slice with
/// bicubic interpolation, zero outside the scan.
pub fn extract_ivv_volume(volume: &Volume, spec: &IVVSpec) -> Array3<f64> {
    let (ns, _, _) = volume.dims();
    let (_, oh, ow) = IVV_DIMS;
    let (sin, cos) = spec.rotation_rad.sin_cos();
    let mut out = Array3::<f64>::zeros(IVV_DIMS);
    for (k, slice) in sampled_slices(spec.slice_range).into_iter().enumerate() {
        if slice >= ns {
            continue;
        }
        let plane = volume.data.slice(s![slice, .., ..]);
        for i in 0..oh {
            let v = (i as f64 + 0.5) / oh as f64 * spec.height_px - 0.5 * spec.height_px;
            for j in 0..ow {
                let u = (j as f64 + 0.5) / ow as f64 * spec.width_px - 0.5 * spec.width_px;
                let col = spec.center.col + u * cos - v * sin;
                let row = spec.center.row + u * sin + v * cos;
                out[[k, i, j]] = sample_bicubic(plane, row, col, Border::Zero);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::VBPolygon;
    use crate::dicom::Spacing;
    use std::collections::BTreeMap;
    use std::f64::consts::PI;

    fn rect_poly(slice: usize, center: Point, width: f64, height: f64, angle: f64) -> VBPolygon {
        let (sin, cos) = angle.sin_cos();
        let rot = |dr: f64, dc: f64| {
            Point::new(center.row + dc * sin + dr * cos, center.col + dc * cos - dr * sin)
        };
        VBPolygon {
            slice_index: slice,
            corners: [
                rot(-height / 2.0, -width / 2.0),
                rot(-height / 2.0, width / 2.0),
                rot(height / 2.0, width / 2.0),
                rot(height / 2.0, -width / 2.0),
            ],
            centroid: center,
            score: 1.0,
        }
    }

    fn vert(slices: std::ops::RangeInclusive<usize>, center: Point, width: f64, angle: f64) -> Vertebra3D {
        let polys: BTreeMap<usize, VBPolygon> = slices
            .map(|s| (s, rect_poly(s, center, width, 16.0, angle)))
            .collect();
        Vertebra3D::from_polygons(polys)
    }

    #[test]
    fn stacked_squares() {
        let upper = vert(0..=4, Point::new(40.0, 50.0), 30.0, 0.0);
        let lower = vert(1..=6, Point::new(60.0, 50.0), 28.0, 0.0);
        let spec = locate_ivv(&upper, &lower).unwrap();
        assert_eq!(spec.center, Point::new(50.0, 50.0));
        assert_eq!(spec.rotation_rad, 0.0);
        assert_eq!(spec.width_px, 60.0);
        assert_eq!(spec.height_px, 30.0);
        assert_eq!(spec.slice_range, (1, 4));
    }

    #[test]
    fn rotated_upper_endplate() {
        let angle = 10.0 * PI / 180.0;
        let upper = vert(0..=2, Point::new(40.0, 50.0), 30.0, angle);
        let lower = vert(0..=2, Point::new(60.0, 50.0), 28.0, 0.0);
        let spec = locate_ivv(&upper, &lower).unwrap();
        assert!((spec.rotation_rad - angle).abs() < 1e-9);
    }

    #[test]
    fn disjoint_ranges_fail() {
        let upper = vert(0..=2, Point::new(40.0, 50.0), 30.0, 0.0);
        let lower = vert(3..=5, Point::new(60.0, 50.0), 28.0, 0.0);
        assert_eq!(locate_ivv(&upper, &lower), Err(IvvError::NoSharedSlices));
    }

    #[test]
    fn nine_slice_range_is_sampled_in_order() {
        assert_eq!(sampled_slices((3, 11)), (3..=11).collect::<Vec<_>>());
        assert_eq!(sampled_slices((2, 2)), vec![2; 9]);
        // Range of 5: positions 0, .5, 1, ... ; halves go to the lower slice.
        assert_eq!(sampled_slices((0, 4)), vec![0, 0, 1, 1, 2, 2, 3, 3, 4]);
    }

    #[test]
    fn constant_scan_gives_constant_output() {
        let volume = Volume {
            data: Array3::from_elem((3, 200, 200), 7.0),
            spacing: Spacing { sag_mm: 1.0, row_mm: 1.0, col_mm: 1.0 },
            slice_positions: vec![0.0, 1.0, 2.0],
        };
        let spec = IVVSpec {
            center: Point::new(100.0, 100.0),
            rotation_rad: 0.0,
            width_px: 60.0,
            height_px: 30.0,
            slice_range: (0, 2),
            level_pair: None,
        };
        let out = extract_ivv_volume(&volume, &spec);
        assert_eq!(out.dim(), IVV_DIMS);
        assert!(out.iter().all(|v| (v - 7.0).abs() < 1e-12));
    }
}
