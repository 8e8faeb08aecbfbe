//! Minimal PS3.10 writer: 128-byte zero preamble, `DICM`, an explicit-VR
//! little-endian file meta group, then the dataset with tags in ascending
//! order. Pixels are stored unsigned.

use thiserror::Error;

use super::{SliceRecord, EXPLICIT_VR_LE, IMPLICIT_VR_LE, MR_IMAGE_STORAGE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetEncoding {
    ExplicitLittle,
    ImplicitLittle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WriteOptions {
    pub bits_allocated: u16,
    pub encoding: DatasetEncoding,
    /// `(slope, intercept)`; omitted from the file when `None`.
    pub rescale: Option<(f64, f64)>,
}

impl Default for WriteOptions {
    fn default() -> Self {
        Self {
            bits_allocated: 16,
            encoding: DatasetEncoding::ExplicitLittle,
            rescale: None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum WriteError {
    #[error("BitsAllocated must be 8 or 16, got {0}")]
    BitsAllocated(u16),
    #[error("pixel value {value} at index {index} cannot be stored exactly")]
    UnrepresentablePixel { index: usize, value: f64 },
    #[error("decimal string {0:?} exceeds 16 characters")]
    ValueTooLong(String),
    #[error("image dimension {0} does not fit in 16 bits")]
    DimensionTooLarge(usize),
}

struct Out {
    buf: Vec<u8>,
    encoding: DatasetEncoding,
}

impl Out {
    fn element(&mut self, group: u16, elem: u16, vr: &[u8; 2], value: &[u8]) {
        debug_assert!(value.len() % 2 == 0);
        self.buf.extend(group.to_le_bytes());
        self.buf.extend(elem.to_le_bytes());
        match self.encoding {
            DatasetEncoding::ImplicitLittle => {
                self.buf.extend((value.len() as u32).to_le_bytes());
            }
            DatasetEncoding::ExplicitLittle => {
                self.buf.extend(vr);
                if matches!(vr, b"OB" | b"OW" | b"UN" | b"SQ" | b"UT") {
                    self.buf.extend([0, 0]);
                    self.buf.extend((value.len() as u32).to_le_bytes());
                } else {
                    self.buf.extend((value.len() as u16).to_le_bytes());
                }
            }
        }
        self.buf.extend(value);
    }
}

fn padded(s: &str, pad: u8) -> Vec<u8> {
    let mut v = s.as_bytes().to_vec();
    if v.len() % 2 == 1 {
        v.push(pad);
    }
    v
}

fn ds(v: f64) -> Result<String, WriteError> {
    let s = format!("{v}");
    if s.len() > 16 {
        return Err(WriteError::ValueTooLong(s));
    }
    Ok(s)
}

/// Serialise `record` as a DICOM file.
pub fn write_slice(record: &SliceRecord, opts: &WriteOptions) -> Result<Vec<u8>, WriteError> {
    let bits = opts.bits_allocated;
    if bits != 8 && bits != 16 {
        return Err(WriteError::BitsAllocated(bits));
    }
    for d in [record.rows, record.cols] {
        if d > u16::MAX as usize {
            return Err(WriteError::DimensionTooLarge(d));
        }
    }
    let max_stored = if bits == 8 { u8::MAX as f64 } else { u16::MAX as f64 };
    let (slope, intercept) = opts.rescale.unwrap_or((1.0, 0.0));
    let mut pixel_bytes = Vec::with_capacity(record.rows * record.cols * bits as usize / 8 + 1);
    for (index, &value) in record.pixels.iter().enumerate() {
        let stored = ((value - intercept) / slope).round();
        let back = if opts.rescale.is_some() { stored * slope + intercept } else { stored };
        if !(0.0..=max_stored).contains(&stored) || back != value {
            return Err(WriteError::UnrepresentablePixel { index, value });
        }
        if bits == 8 {
            pixel_bytes.push(stored as u8);
        } else {
            pixel_bytes.extend((stored as u16).to_le_bytes());
        }
    }
    if pixel_bytes.len() % 2 == 1 {
        pixel_bytes.push(0);
    }

    let syntax = match opts.encoding {
        DatasetEncoding::ExplicitLittle => EXPLICIT_VR_LE,
        DatasetEncoding::ImplicitLittle => IMPLICIT_VR_LE,
    };
    let mut meta = Out {
        buf: Vec::new(),
        encoding: DatasetEncoding::ExplicitLittle,
    };
    meta.element(0x0002, 0x0001, b"OB", &[0, 1]);
    meta.element(0x0002, 0x0002, b"UI", &padded(MR_IMAGE_STORAGE, 0));
    meta.element(0x0002, 0x0010, b"UI", &padded(syntax, 0));

    let mut out = Out {
        buf: vec![0u8; 128],
        encoding: DatasetEncoding::ExplicitLittle,
    };
    out.buf.extend(b"DICM");
    out.element(0x0002, 0x0000, b"UL", &(meta.buf.len() as u32).to_le_bytes());
    out.buf.extend(meta.buf);

    out.encoding = opts.encoding;
    out.element(0x0008, 0x0016, b"UI", &padded(MR_IMAGE_STORAGE, 0));
    out.element(0x0008, 0x0060, b"CS", b"MR");
    if let Some(n) = record.instance_number {
        out.element(0x0020, 0x0013, b"IS", &padded(&n.to_string(), b' '));
    }
    let ipp = format!("{}\\0\\0", ds(record.slice_position)?);
    out.element(0x0020, 0x0032, b"DS", &padded(&ipp, b' '));
    out.element(0x0028, 0x0002, b"US", &1u16.to_le_bytes());
    out.element(0x0028, 0x0004, b"CS", &padded("MONOCHROME2", b' '));
    out.element(0x0028, 0x0010, b"US", &(record.rows as u16).to_le_bytes());
    out.element(0x0028, 0x0011, b"US", &(record.cols as u16).to_le_bytes());
    let spacing = format!("{}\\{}", ds(record.pixel_spacing.0)?, ds(record.pixel_spacing.1)?);
    out.element(0x0028, 0x0030, b"DS", &padded(&spacing, b' '));
    out.element(0x0028, 0x0100, b"US", &bits.to_le_bytes());
    out.element(0x0028, 0x0101, b"US", &bits.to_le_bytes());
    out.element(0x0028, 0x0102, b"US", &(bits - 1).to_le_bytes());
    out.element(0x0028, 0x0103, b"US", &0u16.to_le_bytes());
    if let Some((slope, intercept)) = opts.rescale {
        out.element(0x0028, 0x1052, b"DS", &padded(&ds(intercept)?, b' '));
        out.element(0x0028, 0x1053, b"DS", &padded(&ds(slope)?, b' '));
    }
    let pixel_vr = if bits == 8 { b"OB" } else { b"OW" };
    out.element(0x7FE0, 0x0010, pixel_vr, &pixel_bytes);
    Ok(out.buf)
}
