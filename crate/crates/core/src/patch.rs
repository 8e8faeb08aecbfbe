//! Square physical-size patches over a slice, resampled to network
//! resolution, and median reassembly of per-patch outputs.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3};
use thiserror::Error;

use crate::interp::resample_bicubic;
use crate::target::{CHANNELS, DET_CHANNELS};

/// Default network input edge in pixels.
pub const DEFAULT_OUT_PX: usize = 224;

#[derive(Debug, Error, PartialEq)]
pub enum PatchError {
    #[error("overlap fraction {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("patch edge {0} mm must be positive")]
    InvalidEdge(f64),
    #[error("slice dimensions {0:?} must be at least 1x1")]
    EmptySlice((usize, usize)),
    #[error("pixel spacing {0:?} must be positive")]
    InvalidSpacing((f64, f64)),
    #[error("patch output {index} has {channels} channels, expected {CHANNELS}")]
    ChannelMismatch { index: usize, channels: usize },
}

/// A rectangle of the slice, in slice pixels. The origin may lie outside the
/// slice for hand-built specs; planned grids are always in bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub origin: (isize, isize),
    pub size: (usize, usize),
}

impl PatchSpec {
    /// Output pixels per input pixel along `(rows, cols)`.
    pub fn scale(&self, out_dims: (usize, usize)) -> (f64, f64) {
        (
            out_dims.0 as f64 / self.size.0 as f64,
            out_dims.1 as f64 / self.size.1 as f64,
        )
    }

    pub fn contains(&self, r: usize, c: usize) -> bool {
        let (r, c) = (r as isize, c as isize);
        r >= self.origin.0
            && c >= self.origin.1
            && r < self.origin.0 + self.size.0 as isize
            && c < self.origin.1 + self.size.1 as isize
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub specs: Vec<PatchSpec>,
    pub slice_dims: (usize, usize),
    pub edge_mm: f64,
    pub overlap_frac: f64,
}

fn axis_starts(dim: usize, edge: usize, stride: usize) -> Vec<usize> {
    let mut starts = vec![0];
    let mut s = 0;
    while s + edge < dim {
        let next = s + stride;
        if next + edge >= dim {
            starts.push(dim - edge);
            break;
        }
        starts.push(next);
        s = next;
    }
    starts
}

/// Lay a grid of overlapping squares (square in mm) over a slice.
pub fn plan_patches(
    slice_dims: (usize, usize),
    pixel_spacing: (f64, f64),
    edge_mm: f64,
    overlap_frac: f64,
) -> Result<PatchGrid, PatchError> {
    if !(0.0..1.0).contains(&overlap_frac) {
        return Err(PatchError::InvalidOverlap(overlap_frac));
    }
    if !(edge_mm > 0.0) {
        return Err(PatchError::InvalidEdge(edge_mm));
    }
    if slice_dims.0 == 0 || slice_dims.1 == 0 {
        return Err(PatchError::EmptySlice(slice_dims));
    }
    if !(pixel_spacing.0 > 0.0 && pixel_spacing.1 > 0.0) {
        return Err(PatchError::InvalidSpacing(pixel_spacing));
    }
    let per_axis = |dim: usize, spacing: f64| {
        let edge = ((edge_mm / spacing).round() as usize).clamp(1, dim);
        let stride = ((edge as f64 * (1.0 - overlap_frac)).round() as usize).max(1);
        (edge, axis_starts(dim, edge, stride))
    };
    let (edge_r, rows) = per_axis(slice_dims.0, pixel_spacing.0);
    let (edge_c, cols) = per_axis(slice_dims.1, pixel_spacing.1);
    let specs = rows
        .iter()
        .flat_map(|&r| {
            cols.iter().map(move |&c| PatchSpec {
                origin: (r as isize, c as isize),
                size: (edge_r, edge_c),
            })
        })
        .collect();
    Ok(PatchGrid {
        specs,
        slice_dims,
        edge_mm,
        overlap_frac,
    })
}

/// Crop `spec` out of `slice` (zero outside the slice) and resample it to
/// `out_dims`.
pub fn extract_patch(slice: ArrayView2<f64>, spec: &PatchSpec, out_dims: (usize, usize)) -> Array2<f64> {
    let (h, w) = slice.dim();
    let mut crop = Array2::<f64>::zeros(spec.size);
    let r0 = spec.origin.0.max(0) as usize;
    let c0 = spec.origin.1.max(0) as usize;
    let r1 = ((spec.origin.0 + spec.size.0 as isize).max(0) as usize).min(h);
    let c1 = ((spec.origin.1 + spec.size.1 as isize).max(0) as usize).min(w);
    if r0 < r1 && c0 < c1 {
        let dr = (r0 as isize - spec.origin.0) as usize;
        let dc = (c0 as isize - spec.origin.1) as usize;
        crop.slice_mut(s![dr..dr + (r1 - r0), dc..dc + (c1 - c0)])
            .assign(&slice.slice(s![r0..r1, c0..c1]));
    }
    if spec.size == out_dims {
        return crop;
    }
    resample_bicubic(crop.view(), out_dims)
}

/// Resample a 13-channel patch output back to its source rectangle,
/// converting vector channels to slice-frame pixels.
pub fn to_slice_frame(spec: &PatchSpec, output: ArrayView3<f64>) -> Array3<f64> {
    let (channels, oh, ow) = output.dim();
    let (scale_r, scale_c) = spec.scale((oh, ow));
    let mut back = Array3::<f64>::zeros((channels, spec.size.0, spec.size.1));
    for ch in 0..channels {
        let mut plane = if (oh, ow) == spec.size {
            output.slice(s![ch, .., ..]).to_owned()
        } else {
            resample_bicubic(output.slice(s![ch, .., ..]), spec.size)
        };
        if ch >= DET_CHANNELS {
            // Even offsets hold the column component, odd the row component.
            let factor = if (ch - DET_CHANNELS) % 2 == 0 { 1.0 / scale_c } else { 1.0 / scale_r };
            if factor != 1.0 {
                plane.mapv_inplace(|v| v * factor);
            }
        }
        back.slice_mut(s![ch, .., ..]).assign(&plane);
    }
    back
}

fn median_in_place(values: &mut [f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => 0.5 * (values[0] + values[1]),
        n => {
            values.sort_unstable_by(f64::total_cmp);
            if n % 2 == 1 {
                values[n / 2]
            } else {
                0.5 * (values[n / 2 - 1] + values[n / 2])
            }
        }
    }
}

/// Merge per-patch 13-channel outputs into one slice-level tensor, taking the
/// per-pixel median over covering patches. Uncovered pixels are zero.
pub fn reassemble(
    patch_outputs: &[(PatchSpec, Array3<f64>)],
    slice_dims: (usize, usize),
) -> Result<Array3<f64>, PatchError> {
    for (index, (_, out)) in patch_outputs.iter().enumerate() {
        if out.dim().0 != CHANNELS {
            return Err(PatchError::ChannelMismatch {
                index,
                channels: out.dim().0,
            });
        }
    }
    let backs: Vec<(PatchSpec, Array3<f64>)> = patch_outputs
        .iter()
        .map(|(spec, out)| (*spec, to_slice_frame(spec, out.view())))
        .collect();
    merge_slice_frame(&backs, slice_dims)
}

/// Median-merge outputs already resampled by [`to_slice_frame`].
pub fn merge_slice_frame(
    backs: &[(PatchSpec, Array3<f64>)],
    slice_dims: (usize, usize),
) -> Result<Array3<f64>, PatchError> {
    for (index, (spec, back)) in backs.iter().enumerate() {
        if back.dim().0 != CHANNELS {
            return Err(PatchError::ChannelMismatch {
                index,
                channels: back.dim().0,
            });
        }
        assert_eq!((back.dim().1, back.dim().2), spec.size, "output not in slice frame");
    }
    let (h, w) = slice_dims;

    // Flat per-pixel value lists laid out by prefix sums of coverage counts.
    let mut counts = vec![0usize; h * w];
    for (spec, _) in backs {
        for_each_covered(spec, slice_dims, |r, c, _, _| counts[r * w + c] += 1);
    }
    let mut offsets = vec![0usize; h * w + 1];
    for i in 0..h * w {
        offsets[i + 1] = offsets[i] + counts[i];
    }
    let mut buffer = vec![0.0f64; offsets[h * w]];
    let mut fill = vec![0usize; h * w];

    let mut merged = Array3::<f64>::zeros((CHANNELS, h, w));
    for ch in 0..CHANNELS {
        fill.iter_mut().for_each(|f| *f = 0);
        for (spec, back) in backs {
            let plane = back.slice(s![ch, .., ..]);
            for_each_covered(spec, slice_dims, |r, c, pr, pc| {
                let i = r * w + c;
                buffer[offsets[i] + fill[i]] = plane[[pr, pc]];
                fill[i] += 1;
            });
        }
        let mut out = merged.slice_mut(s![ch, .., ..]);
        for r in 0..h {
            for c in 0..w {
                let i = r * w + c;
                out[[r, c]] = median_in_place(&mut buffer[offsets[i]..offsets[i + 1]]);
            }
        }
    }
    Ok(merged)
}

fn for_each_covered(
    spec: &PatchSpec,
    (h, w): (usize, usize),
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for pr in 0..spec.size.0 {
        let r = spec.origin.0 + pr as isize;
        if r < 0 || r >= h as isize {
            continue;
        }
        for pc in 0..spec.size.1 {
            let c = spec.origin.1 + pc as isize;
            if c < 0 || c >= w as isize {
                continue;
            }
            f(r as usize, c as usize, pr, pc);
        }
    }
}
