use std::collections::BTreeMap;

use ndarray::Array2;

use super::{tags, DicomError, SliceRecord, Tag, EXPLICIT_VR_LE, IMPLICIT_VR_LE};

const PREAMBLE_LEN: usize = 128;
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const ITEM: Tag = Tag(0xFFFE, 0xE000);
const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Encoding {
    Explicit,
    Implicit,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Self { bytes, pos }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DicomError> {
        if self.remaining() < n {
            return Err(DicomError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, DicomError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, DicomError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag, DicomError> {
        Ok(Tag(self.u16()?, self.u16()?))
    }

    fn peek_tag(&self) -> Option<Tag> {
        if self.remaining() < 4 {
            return None;
        }
        let b = &self.bytes[self.pos..self.pos + 4];
        Some(Tag(
            u16::from_le_bytes([b[0], b[1]]),
            u16::from_le_bytes([b[2], b[3]]),
        ))
    }
}

struct Element<'a> {
    tag: Tag,
    /// `None` for undefined length.
    value: Option<&'a [u8]>,
}

fn has_long_length(vr: &[u8]) -> bool {
    matches!(
        vr,
        b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR"
            | b"UT" | b"UV"
    )
}

fn read_header(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(Tag, u32), DicomError> {
    let tag = cur.tag()?;
    if tag.0 == 0xFFFE {
        // Item and delimiter tags never carry a VR.
        return Ok((tag, cur.u32()?));
    }
    let len = match enc {
        Encoding::Implicit => cur.u32()?,
        Encoding::Explicit => {
            let vr = cur.take(2)?;
            if has_long_length(vr) {
                cur.take(2)?;
                cur.u32()?
            } else {
                cur.u16()? as u32
            }
        }
    };
    Ok((tag, len))
}

fn read_element<'a>(cur: &mut Cursor<'a>, enc: Encoding) -> Result<Element<'a>, DicomError> {
    let (tag, len) = read_header(cur, enc)?;
    if len == UNDEFINED_LENGTH {
        return Ok(Element { tag, value: None });
    }
    let value = cur.take(len as usize)?;
    Ok(Element { tag, value: Some(value) })
}

/// Skip the items of an undefined-length sequence up to its delimiter.
fn skip_sequence(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(), DicomError> {
    loop {
        let (tag, len) = read_header(cur, enc)?;
        match tag {
            SEQUENCE_DELIMITER => return Ok(()),
            ITEM if len == UNDEFINED_LENGTH => skip_item(cur, enc)?,
            ITEM => {
                cur.take(len as usize)?;
            }
            _ => return Err(DicomError::Truncated(cur.pos)),
        }
    }
}

fn skip_item(cur: &mut Cursor<'_>, enc: Encoding) -> Result<(), DicomError> {
    loop {
        if cur.peek_tag() == Some(ITEM_DELIMITER) {
            read_header(cur, enc)?;
            return Ok(());
        }
        let el = read_element(cur, enc)?;
        if el.value.is_none() {
            skip_sequence(cur, enc)?;
        }
    }
}

/// Heuristic check for a DICOM stream: a `DICM` preamble, or a first element
/// that parses as an implicit-VR tag with an in-bounds length.
pub fn looks_like_dicom(bytes: &[u8]) -> bool {
    if bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == b"DICM" {
        return true;
    }
    plausible_implicit_start(bytes)
}

fn plausible_implicit_start(bytes: &[u8]) -> bool {
    let mut cur = Cursor::new(bytes, 0);
    let Ok((tag, len)) = read_header(&mut cur, Encoding::Implicit) else {
        return false;
    };
    tag.0 % 2 == 0
        && (0x0002..=0x7FE0).contains(&tag.0)
        && (len == UNDEFINED_LENGTH || (len as usize) <= cur.remaining())
}

fn trim_text(raw: &[u8]) -> String {
    String::from_utf8_lossy(raw)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn text_values(raw: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(raw)
        .split('\\')
        .map(|s| s.trim_matches(|c: char| c == '\0' || c.is_whitespace()).to_string())
        .collect()
}

fn decimals(tag: Tag, raw: &[u8]) -> Result<Vec<f64>, DicomError> {
    text_values(raw)
        .iter()
        .map(|s| {
            s.parse::<f64>().map_err(|_| DicomError::InvalidValue {
                tag,
                reason: format!("not a decimal string: {s:?}"),
            })
        })
        .collect()
}

fn us(tag: Tag, raw: &[u8]) -> Result<u16, DicomError> {
    if raw.len() < 2 {
        return Err(DicomError::InvalidValue {
            tag,
            reason: "US value shorter than 2 bytes".into(),
        });
    }
    Ok(u16::from_le_bytes([raw[0], raw[1]]))
}

type Attributes<'a> = BTreeMap<Tag, &'a [u8]>;

fn required<'a>(attrs: &Attributes<'a>, tag: Tag) -> Result<&'a [u8], DicomError> {
    attrs.get(&tag).copied().ok_or(DicomError::MissingTag(tag))
}

/// Parse one DICOM file held in memory.
pub fn parse_dicom_file(bytes: &[u8]) -> Result<SliceRecord, DicomError> {
    let has_preamble =
        bytes.len() >= PREAMBLE_LEN + 4 && &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] == b"DICM";
    let (mut cur, enc) = if has_preamble {
        let mut cur = Cursor::new(bytes, PREAMBLE_LEN + 4);
        let mut syntax: Option<String> = None;
        while cur.peek_tag().is_some_and(|t| t.0 == 0x0002) {
            let el = read_element(&mut cur, Encoding::Explicit)?;
            if el.tag == tags::TRANSFER_SYNTAX_UID {
                syntax = el.value.map(trim_text);
            }
        }
        let enc = match syntax.as_deref() {
            None | Some(IMPLICIT_VR_LE) => Encoding::Implicit,
            Some(EXPLICIT_VR_LE) => Encoding::Explicit,
            Some(other) => return Err(DicomError::UnsupportedTransferSyntax(other.to_string())),
        };
        (cur, enc)
    } else if plausible_implicit_start(bytes) {
        (Cursor::new(bytes, 0), Encoding::Implicit)
    } else {
        return Err(DicomError::NotDicom);
    };

    let mut attrs: Attributes<'_> = BTreeMap::new();
    while cur.remaining() > 0 {
        let el = read_element(&mut cur, enc)?;
        match el.value {
            Some(v) => {
                if el.tag.0 != 0xFFFE {
                    attrs.insert(el.tag, v);
                }
                if el.tag == tags::PIXEL_DATA {
                    break;
                }
            }
            None if el.tag == tags::PIXEL_DATA => {
                // Encapsulated pixel data only occurs with compressed syntaxes.
                return Err(DicomError::UnsupportedTransferSyntax(
                    "encapsulated pixel data".into(),
                ));
            }
            None => skip_sequence(&mut cur, enc)?,
        }
    }

    decode_slice(&attrs)
}

fn decode_slice(attrs: &Attributes<'_>) -> Result<SliceRecord, DicomError> {
    let rows = us(tags::ROWS, required(attrs, tags::ROWS)?)? as usize;
    let cols = us(tags::COLUMNS, required(attrs, tags::COLUMNS)?)? as usize;
    let spacing = decimals(tags::PIXEL_SPACING, required(attrs, tags::PIXEL_SPACING)?)?;
    let pixel_data = required(attrs, tags::PIXEL_DATA)?;

    if rows == 0 || cols == 0 {
        return Err(DicomError::InvalidValue {
            tag: if rows == 0 { tags::ROWS } else { tags::COLUMNS },
            reason: "zero image dimension".into(),
        });
    }
    if spacing.len() != 2 || spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(DicomError::InvalidValue {
            tag: tags::PIXEL_SPACING,
            reason: format!("expected two positive values, got {spacing:?}"),
        });
    }
    if let Some(raw) = attrs.get(&tags::SAMPLES_PER_PIXEL) {
        let spp = us(tags::SAMPLES_PER_PIXEL, raw)?;
        if spp != 1 {
            return Err(DicomError::InvalidValue {
                tag: tags::SAMPLES_PER_PIXEL,
                reason: format!("only single-sample images are supported, got {spp}"),
            });
        }
    }
    let bits = match attrs.get(&tags::BITS_ALLOCATED) {
        Some(raw) => us(tags::BITS_ALLOCATED, raw)?,
        None => 16,
    };
    if bits != 8 && bits != 16 {
        return Err(DicomError::UnsupportedBitsAllocated(bits));
    }
    let signed = match attrs.get(&tags::PIXEL_REPRESENTATION) {
        Some(raw) => us(tags::PIXEL_REPRESENTATION, raw)? == 1,
        None => false,
    };

    let instance_number = match attrs.get(&tags::INSTANCE_NUMBER) {
        Some(raw) => {
            let s = trim_text(raw);
            Some(s.parse::<i64>().map_err(|_| DicomError::InvalidValue {
                tag: tags::INSTANCE_NUMBER,
                reason: format!("not an integer string: {s:?}"),
            })?)
        }
        None => None,
    };
    let slice_position = match attrs.get(&tags::IMAGE_POSITION_PATIENT) {
        Some(raw) => decimals(tags::IMAGE_POSITION_PATIENT, raw)?[0],
        None => match instance_number {
            Some(n) => n as f64,
            None => return Err(DicomError::MissingTag(tags::IMAGE_POSITION_PATIENT)),
        },
    };

    let slope = match attrs.get(&tags::RESCALE_SLOPE) {
        Some(raw) => decimals(tags::RESCALE_SLOPE, raw)?[0],
        None => 1.0,
    };
    let intercept = match attrs.get(&tags::RESCALE_INTERCEPT) {
        Some(raw) => decimals(tags::RESCALE_INTERCEPT, raw)?[0],
        None => 0.0,
    };

    let bytes_per = bits as usize / 8;
    let expected = rows * cols * bytes_per;
    if pixel_data.len() < expected {
        return Err(DicomError::TruncatedPixelData {
            expected,
            actual: pixel_data.len(),
        });
    }
    let stored = |i: usize| -> f64 {
        match (bytes_per, signed) {
            (1, false) => pixel_data[i] as f64,
            (1, true) => pixel_data[i] as i8 as f64,
            (_, false) => u16::from_le_bytes([pixel_data[2 * i], pixel_data[2 * i + 1]]) as f64,
            (_, true) => i16::from_le_bytes([pixel_data[2 * i], pixel_data[2 * i + 1]]) as f64,
        }
    };
    let pixels = Array2::from_shape_fn((rows, cols), |(r, c)| {
        let v = stored(r * cols + c);
        if slope == 1.0 && intercept == 0.0 {
            v
        } else {
            v * slope + intercept
        }
    });

    Ok(SliceRecord {
        rows,
        cols,
        pixel_spacing: (spacing[0], spacing[1]),
        slice_position,
        instance_number,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled explicit-VR file, built byte by byte without the
    /// crate's writer.
    fn handmade(with_spacing: bool, syntax: &str) -> Vec<u8> {
        fn short(out: &mut Vec<u8>, g: u16, e: u16, vr: &[u8; 2], val: &[u8]) {
            out.extend(g.to_le_bytes());
            out.extend(e.to_le_bytes());
            out.extend(vr);
            out.extend((val.len() as u16).to_le_bytes());
            out.extend(val);
        }
        let mut ts = syntax.as_bytes().to_vec();
        if ts.len() % 2 == 1 {
            ts.push(0);
        }
        let mut meta = Vec::new();
        short(&mut meta, 0x0002, 0x0010, b"UI", &ts);

        let mut out = vec![0u8; 128];
        out.extend(b"DICM");
        short(&mut out, 0x0002, 0x0000, b"UL", &(meta.len() as u32).to_le_bytes());
        out.extend(&meta);
        short(&mut out, 0x0020, 0x0032, b"DS", b"2.5\\0\\0 ");
        short(&mut out, 0x0028, 0x0010, b"US", &4u16.to_le_bytes());
        short(&mut out, 0x0028, 0x0011, b"US", &4u16.to_le_bytes());
        if with_spacing {
            short(&mut out, 0x0028, 0x0030, b"DS", b"0.5\\0.75 ");
        }
        short(&mut out, 0x0028, 0x0100, b"US", &16u16.to_le_bytes());
        out.extend(0x7FE0u16.to_le_bytes());
        out.extend(0x0010u16.to_le_bytes());
        out.extend(b"OW\0\0");
        out.extend(32u32.to_le_bytes());
        out.extend([0u8; 32]);
        out
    }

    #[test]
    fn parses_handmade_zero_image() {
        let rec = parse_dicom_file(&handmade(true, EXPLICIT_VR_LE)).unwrap();
        assert_eq!((rec.rows, rec.cols), (4, 4));
        assert_eq!(rec.pixel_spacing, (0.5, 0.75));
        assert_eq!(rec.slice_position, 2.5);
        assert_eq!(rec.instance_number, None);
        assert!(rec.pixels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_spacing_is_reported() {
        let err = parse_dicom_file(&handmade(false, EXPLICIT_VR_LE)).unwrap_err();
        assert!(matches!(err, DicomError::MissingTag(t) if t == Tag(0x0028, 0x0030)));
    }

    #[test]
    fn compressed_syntax_is_rejected() {
        let err = parse_dicom_file(&handmade(true, "1.2.840.10008.1.2.4.50")).unwrap_err();
        assert!(matches!(err, DicomError::UnsupportedTransferSyntax(_)));
    }

    #[test]
    fn short_pixel_data_is_reported() {
        let mut bytes = handmade(true, EXPLICIT_VR_LE);
        // Shrink the declared and actual pixel payload to 30 bytes.
        let n = bytes.len();
        bytes.truncate(n - 2);
        let len_at = n - 32 - 4;
        bytes[len_at..len_at + 4].copy_from_slice(&30u32.to_le_bytes());
        let err = parse_dicom_file(&bytes).unwrap_err();
        assert!(matches!(
            err,
            DicomError::TruncatedPixelData { expected: 32, actual: 30 }
        ));
    }

    #[test]
    fn garbage_is_not_dicom() {
        assert!(matches!(
            parse_dicom_file(b"{\"hello\": 1}"),
            Err(DicomError::NotDicom)
        ));
        assert!(!looks_like_dicom(b"{\"hello\": 1}"));
    }
}
