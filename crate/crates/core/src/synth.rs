//! Synthetic sagittal scans with known vertebrae, for tests, benchmarks and
//! `spine synth`.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{GroundTruth, LabelledAnnotation};
use crate::config::Mode;
use crate::dicom::writer::{write_slice, WriteError, WriteOptions};
use crate::dicom::{SliceRecord, Spacing, Volume};
use crate::geometry::{contains, Point};
use crate::level::Level;
use crate::target::VBAnnotation;

pub const BACKGROUND: f64 = 100.0;
pub const BONE: f64 = 600.0;
/// In-plane spacing of whole-spine scans: a 500 mm patch is exactly 224 px.
pub const WHOLE_SPINE_SPACING_MM: f64 = 2.2321428571;
pub const WHOLE_SPINE_DIMS: (usize, usize, usize) = (16, 896, 448);
pub const LUMBAR_DIMS: (usize, usize, usize) = (12, 288, 224);
const SLICE_THICKNESS_MM: f64 = 4.0;

/// A scan and its per-slice annotations.
#[derive(Clone, Debug)]
pub struct SyntheticScan {
    pub volume: Volume,
    pub truth: GroundTruth,
}

/// Rectangle of half-extents `(half_h, half_w)` rotated by `angle` about
/// `center`, corners TL, TR, BR, BL.
pub fn rotated_rect(center: Point, half_h: f64, half_w: f64, angle: f64) -> [Point; 4] {
    let (sin, cos) = angle.sin_cos();
    let at = |dr: f64, dc: f64| Point::new(center.row + dc * sin + dr * cos, center.col + dc * cos - dr * sin);
    [at(-half_h, -half_w), at(-half_h, half_w), at(half_h, half_w), at(half_h, -half_w)]
}

fn paint(plane: &mut Array2<f64>, corners: &[Point; 4]) {
    let (h, w) = plane.dim();
    let r0 = corners.iter().map(|p| p.row).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let r1 = (corners.iter().map(|p| p.row).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(h);
    let c0 = corners.iter().map(|p| p.col).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let c1 = (corners.iter().map(|p| p.col).fold(f64::NEG_INFINITY, f64::max).ceil() as usize + 1).min(w);
    for r in r0..r1 {
        for c in c0..c1 {
            if contains(corners, Point::new(r as f64, c as f64)) {
                plane[[r, c]] = BONE;
            }
        }
    }
}

struct Layout {
    dims: (usize, usize, usize),
    spacing_mm: f64,
    levels: Vec<Level>,
    /// Centroid row of the lowest level and the pitch between levels, px.
    bottom_row: f64,
    pitch: f64,
    half_h: f64,
    half_w: f64,
}

fn build(layout: Layout, seed: u64) -> SyntheticScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ns, h, w) = layout.dims;
    let mut data = Array3::from_elem(layout.dims, BACKGROUND);
    let mut truth = GroundTruth::default();
    let n = layout.levels.len();
    for (i, &level) in layout.levels.iter().enumerate() {
        let phase = i as f64 / n as f64 * std::f64::consts::PI;
        let center = Point::new(
            layout.bottom_row - i as f64 * layout.pitch + rng.random_range(-1.5..1.5),
            w as f64 / 2.0 + 0.06 * w as f64 * phase.sin() + rng.random_range(-2.0..2.0),
        );
        let angle = rng.random_range(-0.12..0.12);
        let half_w = layout.half_w * rng.random_range(0.92..1.08);
        let half_h = layout.half_h * rng.random_range(0.92..1.08);
        let lo = rng.random_range(1..3usize);
        let hi = ns - 1 - rng.random_range(1..3usize);
        for k in lo..=hi {
            // Vertebrae narrow slightly away from the mid-sagittal plane.
            let off = (k as f64 - (ns as f64 - 1.0) / 2.0).abs() / ns as f64;
            let corners = rotated_rect(center, half_h, half_w * (1.0 - 0.2 * off), angle);
            let mut plane = data.index_axis_mut(ndarray::Axis(0), k).to_owned();
            paint(&mut plane, &corners);
            data.index_axis_mut(ndarray::Axis(0), k).assign(&plane);
            truth
                .slices
                .entry(k)
                .or_default()
                .push(LabelledAnnotation { level, corners });
        }
    }
    debug_assert!(truth.slices.values().flatten().all(|a| VBAnnotation::new(a.corners).is_ok()));
    SyntheticScan {
        volume: Volume {
            data,
            spacing: Spacing {
                sag_mm: SLICE_THICKNESS_MM,
                row_mm: layout.spacing_mm,
                col_mm: layout.spacing_mm,
            },
            slice_positions: (0..ns).map(|k| k as f64 * SLICE_THICKNESS_MM).collect(),
        },
        truth,
    }
    .checked(h)
}

impl SyntheticScan {
    fn checked(self, h: usize) -> Self {
        debug_assert!(self
            .truth
            .slices
            .values()
            .flatten()
            .all(|a| a.corners.iter().all(|p| p.row > 0.0 && p.row < h as f64)));
        self
    }

    /// Write one DICOM file per slice plus `ground_truth.json`.
    pub fn write_series(&self, dir: &Path) -> Result<(), SynthError> {
        std::fs::create_dir_all(dir)?;
        let (ns, h, w) = self.volume.dims();
        for k in 0..ns {
            let record = SliceRecord {
                rows: h,
                cols: w,
                pixel_spacing: self.volume.pixel_spacing(),
                slice_position: self.volume.slice_positions[k],
                instance_number: Some(k as i64 + 1),
                pixels: self.volume.data.index_axis(ndarray::Axis(0), k).to_owned(),
            };
            let bytes = write_slice(&record, &WriteOptions::default())?;
            std::fs::write(dir.join(format!("slice_{k:03}.dcm")), bytes)?;
        }
        self.truth.write(&dir.join(GROUND_TRUTH_FILE))?;
        Ok(())
    }
}

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("dicom writer: {0}")]
    Write(#[from] WriteError),
}

/// 23 vertebrae S1 to C3 on `16 × 896 × 448` slices.
pub fn whole_spine(seed: u64) -> SyntheticScan {
    build(
        Layout {
            dims: WHOLE_SPINE_DIMS,
            spacing_mm: WHOLE_SPINE_SPACING_MM,
            levels: (0..23).map(|c| Level::from_class(c).unwrap()).collect(),
            bottom_row: 860.0,
            pitch: 36.5,
            half_h: 11.0,
            half_w: 18.0,
        },
        seed,
    )
}

/// Six vertebrae S1 to L1 at 1 mm spacing.
pub fn lumbar(seed: u64) -> SyntheticScan {
    build(
        Layout {
            dims: LUMBAR_DIMS,
            spacing_mm: 1.0,
            levels: (0..6).map(|c| Level::from_class(c).unwrap()).collect(),
            bottom_row: 240.0,
            pitch: 36.0,
            half_h: 12.0,
            half_w: 19.0,
        },
        seed,
    )
}

pub fn scan_for_mode(mode: Mode, seed: u64) -> SyntheticScan {
    match mode {
        Mode::Lumbar => lumbar(seed),
        Mode::WholeSpine => whole_spine(seed),
    }
}

/// `n` non-overlapping random vertebral bodies on a `dims` slice, one per
/// cell of a 128 px grid.
pub fn random_slice_annotations(rng: &mut impl Rng, dims: (usize, usize), n: usize) -> Vec<VBAnnotation> {
    const CELL: usize = 128;
    let (gr, gc) = (dims.0 / CELL, dims.1 / CELL);
    assert!(n <= gr * gc, "slice too small for {n} vertebrae");
    let mut cells: Vec<usize> = (0..gr * gc).collect();
    // Partial Fisher-Yates: the first n cells are a uniform sample.
    for i in 0..n {
        let j = rng.random_range(i..cells.len());
        cells.swap(i, j);
    }
    cells[..n]
        .iter()
        .map(|&cell| {
            let (cr, cc) = (cell / gc, cell % gc);
            let center = Point::new(
                (cr * CELL + CELL / 2) as f64 + rng.random_range(-10.0..10.0),
                (cc * CELL + CELL / 2) as f64 + rng.random_range(-10.0..10.0),
            );
            let mut corners = rotated_rect(
                center,
                rng.random_range(12.5..22.5),
                rng.random_range(20.0..35.0),
                rng.random_range(-0.26..0.26),
            );
            for p in &mut corners {
                *p = p.add(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            }
            VBAnnotation::new(corners).expect("jittered rectangle stays simple")
        })
        .collect()
}
