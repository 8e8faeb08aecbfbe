//! Ingestion of uncompressed little-endian DICOM slices into sagittal volumes.
//!
//! Only the handful of attributes needed to place and decode a slice are read.
//! [`writer`] holds a minimal PS3.10 writer used to produce fixtures and
//! synthetic series.

mod parse;
mod volume;
pub mod writer;

use std::fmt;

use ndarray::Array2;
use thiserror::Error;

pub use parse::{looks_like_dicom, parse_dicom_file};
pub use volume::{assemble_volume, load_series, Spacing, Volume, VolumeError};

pub const IMPLICIT_VR_LE: &str = "1.2.840.10008.1.2";
pub const EXPLICIT_VR_LE: &str = "1.2.840.10008.1.2.1";
pub const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";

/// A DICOM attribute tag `(group, element)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X})", self.0, self.1)
    }
}

pub mod tags {
    use super::Tag;

    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const INSTANCE_NUMBER: Tag = Tag(0x0020, 0x0013);
    pub const IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
    pub const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);
}

/// One decoded sagittal slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub rows: usize,
    pub cols: usize,
    /// `(row_mm, col_mm)`.
    pub pixel_spacing: (f64, f64),
    /// Position along the sagittal axis in mm.
    pub slice_position: f64,
    pub instance_number: Option<i64>,
    /// `rows × cols` rescaled intensities.
    pub pixels: Array2<f64>,
}

#[derive(Debug, Error)]
pub enum DicomError {
    #[error("not a DICOM stream")]
    NotDicom,
    #[error("unexpected end of data at offset {0}")]
    Truncated(usize),
    #[error("missing required tag {0}")]
    MissingTag(Tag),
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("pixel data holds {actual} bytes, {expected} required")]
    TruncatedPixelData { expected: usize, actual: usize },
    #[error("invalid value for {tag}: {reason}")]
    InvalidValue { tag: Tag, reason: String },
    #[error("unsupported BitsAllocated {0}")]
    UnsupportedBitsAllocated(u16),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
