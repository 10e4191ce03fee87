//! Minimal CT DICOM reader.
//!
//! # Format notes
//!
//! Supported input is a Part-10 file: a 128-byte preamble, the magic `DICM`,
//! a file meta group (0002,xxxx) and a data set, all encoded as Explicit VR
//! Little Endian (transfer syntax `1.2.840.10008.1.2.1`). Any other transfer
//! syntax is rejected with [`Error::Unsupported`].
//!
//! Each element is `group:u16 element:u16 VR:[u8;2]` followed by either a
//! `u16` length, or two reserved bytes and a `u32` length for the VRs
//! OB, OD, OF, OL, OV, OW, SQ, SV, UC, UN, UR, UT and UV. Elements outside
//! the extracted subset are skipped by their declared length. Sequences of
//! undefined length are walked item by item until the sequence delimiter.
//!
//! Extracted tags:
//!
//! | tag         | name                    | required | notes                          |
//! |-------------|-------------------------|----------|--------------------------------|
//! | (0028,0010) | Rows                    | yes      | US                             |
//! | (0028,0011) | Columns                 | yes      | US                             |
//! | (0028,0030) | PixelSpacing            | yes      | DS `row\col` in mm             |
//! | (0018,0050) | SliceThickness          | no       | DS, metadata only              |
//! | (0020,0032) | ImagePositionPatient    | yes      | DS triple, z component kept    |
//! | (0028,1053) | RescaleSlope            | no       | defaults to 1 with a warning   |
//! | (0028,1052) | RescaleIntercept        | no       | defaults to 0 with a warning   |
//! | (0028,0100) | BitsAllocated           | no       | must be 16 when present        |
//! | (0028,0103) | PixelRepresentation     | no       | 0 unsigned, 1 signed (default) |
//! | (7FE0,0010) | PixelData               | yes      | rows·cols·2 bytes, native      |

use std::fmt;

use crate::error::{Error, Result};
use crate::volume::{Unit, Volume};

pub const PREAMBLE_LEN: usize = 128;
pub const MAGIC: &[u8; 4] = b"DICM";
pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

/// A DICOM attribute tag `(group, element)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

impl Tag {
    pub const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
    pub const SLICE_THICKNESS: Tag = Tag(0x0018, 0x0050);
    pub const IMAGE_POSITION_PATIENT: Tag = Tag(0x0020, 0x0032);
    pub const ROWS: Tag = Tag(0x0028, 0x0010);
    pub const COLUMNS: Tag = Tag(0x0028, 0x0011);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
    pub const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
    pub const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    const ITEM: Tag = Tag(0xFFFE, 0xE000);
    const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
    const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);

    pub fn name(&self) -> &'static str {
        match *self {
            Tag::TRANSFER_SYNTAX => "TransferSyntaxUID",
            Tag::SLICE_THICKNESS => "SliceThickness",
            Tag::IMAGE_POSITION_PATIENT => "ImagePositionPatient",
            Tag::ROWS => "Rows",
            Tag::COLUMNS => "Columns",
            Tag::PIXEL_SPACING => "PixelSpacing",
            Tag::BITS_ALLOCATED => "BitsAllocated",
            Tag::PIXEL_REPRESENTATION => "PixelRepresentation",
            Tag::RESCALE_INTERCEPT => "RescaleIntercept",
            Tag::RESCALE_SLOPE => "RescaleSlope",
            Tag::PIXEL_DATA => "PixelData",
            _ => "unknown",
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:04X},{:04X}) {}", self.0, self.1, self.name())
    }
}

/// One CT slice as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub rows: usize,
    pub cols: usize,
    /// `(row_mm, col_mm)`: distance between rows, then between columns.
    pub pixel_spacing: (f64, f64),
    pub slice_thickness: Option<f64>,
    pub image_position_z: f64,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// Stored values, row by row (`cols` per row). Widened to `i32` so that
    /// unsigned 16-bit data is represented losslessly.
    pub stored_pixels: Vec<i32>,
}

impl SliceRecord {
    /// HU value of stored pixel `(row, col)`.
    pub fn hu(&self, row: usize, col: usize) -> f64 {
        self.rescale_slope * self.stored_pixels[row * self.cols + col] as f64
            + self.rescale_intercept
    }

    fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Format(format!(
                "slice must have positive extents, got {}x{}",
                self.rows, self.cols
            )));
        }
        if self.stored_pixels.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "pixel data holds {} values, expected {}",
                self.stored_pixels.len(),
                self.rows * self.cols
            )));
        }
        if self.rescale_slope == 0.0 || !self.rescale_slope.is_finite() {
            return Err(Error::Format(format!(
                "rescale slope must be finite and non-zero, got {}",
                self.rescale_slope
            )));
        }
        Ok(())
    }
}

/// Non-fatal findings while parsing a slice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    DefaultedSlope,
    DefaultedIntercept,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::DefaultedSlope => f.write_str("RescaleSlope missing, defaulted to 1"),
            Diagnostic::DefaultedIntercept => {
                f.write_str("RescaleIntercept missing, defaulted to 0")
            }
        }
    }
}

fn has_long_length(vr: [u8; 2]) -> bool {
    matches!(
        &vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

struct Element<'a> {
    tag: Tag,
    vr: [u8; 2],
    /// `None` for undefined length.
    value: Option<&'a [u8]>,
}

impl<'a> Cursor<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::Format(format!(
                "file truncated while reading {what} at offset {}",
                self.pos
            ))),
        }
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn tag(&mut self) -> Result<Tag> {
        let group = self.u16("element tag")?;
        let element = self.u16("element tag")?;
        Ok(Tag(group, element))
    }

    fn element(&mut self) -> Result<Element<'a>> {
        let tag = self.tag()?;
        let vr_bytes = self.take(2, "value representation")?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        if !vr.iter().all(u8::is_ascii_uppercase) {
            return Err(Error::Format(format!(
                "element {tag} has invalid value representation {vr:?}"
            )));
        }
        let len = if has_long_length(vr) {
            self.take(2, "reserved bytes")?;
            self.u32("element length")?
        } else {
            self.u16("element length")? as u32
        };
        if len == UNDEFINED_LENGTH {
            return Ok(Element {
                tag,
                vr,
                value: None,
            });
        }
        let value = self.take(len as usize, &format!("value of {tag}"))?;
        Ok(Element {
            tag,
            vr,
            value: Some(value),
        })
    }

    /// Skips the items of an undefined-length sequence, up to and including
    /// the sequence delimiter.
    fn skip_undefined_sequence(&mut self) -> Result<()> {
        loop {
            let tag = self.tag()?;
            let len = self.u32("item length")?;
            match tag {
                Tag::SEQUENCE_DELIMITER => return Ok(()),
                Tag::ITEM if len == UNDEFINED_LENGTH => self.skip_undefined_item()?,
                Tag::ITEM => {
                    self.take(len as usize, "sequence item")?;
                }
                other => {
                    return Err(Error::Format(format!(
                        "unexpected tag {other} inside sequence"
                    )))
                }
            }
        }
    }

    fn skip_undefined_item(&mut self) -> Result<()> {
        loop {
            let save = self.pos;
            let tag = self.tag()?;
            if tag == Tag::ITEM_DELIMITER {
                self.u32("item delimiter length")?;
                return Ok(());
            }
            self.pos = save;
            let el = self.element()?;
            if el.value.is_none() {
                if &el.vr == b"SQ" || &el.vr == b"UN" {
                    self.skip_undefined_sequence()?;
                } else {
                    return Err(Error::Unsupported(format!(
                        "undefined length on non-sequence element {}",
                        el.tag
                    )));
                }
            }
        }
    }
}

fn text_value(value: &[u8], tag: Tag) -> Result<&str> {
    std::str::from_utf8(value)
        .map(|s| s.trim_matches(|c: char| c == '\0' || c.is_whitespace()))
        .map_err(|_| Error::Format(format!("{tag} is not valid text")))
}

fn decimal_strings(value: &[u8], tag: Tag) -> Result<Vec<f64>> {
    text_value(value, tag)?
        .split('\\')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Format(format!("{tag} has non-numeric component {s:?}")))
        })
        .collect()
}

fn unsigned_short(value: &[u8], tag: Tag) -> Result<u16> {
    match value {
        [a, b] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(Error::Format(format!(
            "{tag} must hold one US value, found {} bytes",
            value.len()
        ))),
    }
}

fn single_decimal(value: &[u8], tag: Tag) -> Result<f64> {
    match decimal_strings(value, tag)?.as_slice() {
        [v] => Ok(*v),
        other => Err(Error::Format(format!(
            "{tag} must hold one value, found {}",
            other.len()
        ))),
    }
}

/// Parses one slice, returning any non-fatal diagnostics alongside it.
pub fn parse_dicom_slice_with_diagnostics(bytes: &[u8]) -> Result<(SliceRecord, Vec<Diagnostic>)> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(Error::Format(
            "missing DICM magic after 128-byte preamble".into(),
        ));
    }
    let mut cur = Cursor {
        bytes,
        pos: PREAMBLE_LEN + MAGIC.len(),
    };

    let mut transfer_syntax: Option<String> = None;
    let mut rows = None;
    let mut cols = None;
    let mut pixel_spacing = None;
    let mut slice_thickness = None;
    let mut position_z = None;
    let mut slope = None;
    let mut intercept = None;
    let mut signed = true;
    let mut pixel_data: Option<&[u8]> = None;

    while !cur.at_end() {
        let el = cur.element()?;
        // The file meta group precedes the data set; check the syntax before
        // trusting anything that follows it.
        if el.tag.0 != 0x0002 {
            match transfer_syntax.as_deref() {
                Some(EXPLICIT_VR_LITTLE_ENDIAN) => {}
                Some(other) => return Err(Error::Unsupported(format!("transfer syntax {other}"))),
                None => {
                    return Err(Error::Format(format!(
                        "missing required tag {}",
                        Tag::TRANSFER_SYNTAX
                    )))
                }
            }
        }
        let value = match el.value {
            Some(v) => v,
            None if el.tag == Tag::PIXEL_DATA => {
                return Err(Error::Unsupported(
                    "encapsulated (compressed) pixel data".into(),
                ))
            }
            None if &el.vr == b"SQ" || &el.vr == b"UN" => {
                cur.skip_undefined_sequence()?;
                continue;
            }
            None => {
                return Err(Error::Unsupported(format!(
                    "undefined length on non-sequence element {}",
                    el.tag
                )))
            }
        };
        match el.tag {
            Tag::TRANSFER_SYNTAX => {
                transfer_syntax = Some(text_value(value, el.tag)?.to_string());
            }
            Tag::ROWS => rows = Some(unsigned_short(value, el.tag)? as usize),
            Tag::COLUMNS => cols = Some(unsigned_short(value, el.tag)? as usize),
            Tag::PIXEL_SPACING => match decimal_strings(value, el.tag)?.as_slice() {
                [r, c] => pixel_spacing = Some((*r, *c)),
                other => {
                    return Err(Error::Format(format!(
                        "{} must hold two values, found {}",
                        el.tag,
                        other.len()
                    )))
                }
            },
            Tag::SLICE_THICKNESS => slice_thickness = Some(single_decimal(value, el.tag)?),
            Tag::IMAGE_POSITION_PATIENT => match decimal_strings(value, el.tag)?.as_slice() {
                [_, _, z] => position_z = Some(*z),
                other => {
                    return Err(Error::Format(format!(
                        "{} must hold three values, found {}",
                        el.tag,
                        other.len()
                    )))
                }
            },
            Tag::RESCALE_SLOPE => slope = Some(single_decimal(value, el.tag)?),
            Tag::RESCALE_INTERCEPT => intercept = Some(single_decimal(value, el.tag)?),
            Tag::BITS_ALLOCATED => {
                let bits = unsigned_short(value, el.tag)?;
                if bits != 16 {
                    return Err(Error::Unsupported(format!("{bits}-bit pixel data")));
                }
            }
            Tag::PIXEL_REPRESENTATION => signed = unsigned_short(value, el.tag)? != 0,
            Tag::PIXEL_DATA => pixel_data = Some(value),
            _ => {}
        }
    }

    let missing = |tag: Tag| Error::Format(format!("missing required tag {tag}"));
    if transfer_syntax.is_none() {
        return Err(missing(Tag::TRANSFER_SYNTAX));
    }
    let rows = rows.ok_or_else(|| missing(Tag::ROWS))?;
    let cols = cols.ok_or_else(|| missing(Tag::COLUMNS))?;
    let pixel_spacing = pixel_spacing.ok_or_else(|| missing(Tag::PIXEL_SPACING))?;
    let image_position_z = position_z.ok_or_else(|| missing(Tag::IMAGE_POSITION_PATIENT))?;
    let pixel_data = pixel_data.ok_or_else(|| missing(Tag::PIXEL_DATA))?;

    let mut diagnostics = Vec::new();
    let rescale_slope = slope.unwrap_or_else(|| {
        diagnostics.push(Diagnostic::DefaultedSlope);
        1.0
    });
    let rescale_intercept = intercept.unwrap_or_else(|| {
        diagnostics.push(Diagnostic::DefaultedIntercept);
        0.0
    });

    let expected = rows * cols * 2;
    if pixel_data.len() != expected {
        return Err(Error::Format(format!(
            "pixel data is {} bytes, expected {expected} for {rows}x{cols} 16-bit pixels",
            pixel_data.len()
        )));
    }
    let stored_pixels = pixel_data
        .chunks_exact(2)
        .map(|b| {
            if signed {
                i16::from_le_bytes([b[0], b[1]]) as i32
            } else {
                u16::from_le_bytes([b[0], b[1]]) as i32
            }
        })
        .collect();

    let record = SliceRecord {
        rows,
        cols,
        pixel_spacing,
        slice_thickness,
        image_position_z,
        rescale_slope,
        rescale_intercept,
        stored_pixels,
    };
    record.validate()?;
    Ok((record, diagnostics))
}

/// Parses one slice; defaulted rescale parameters are logged as warnings.
pub fn parse_dicom_slice(bytes: &[u8]) -> Result<SliceRecord> {
    let (record, diagnostics) = parse_dicom_slice_with_diagnostics(bytes)?;
    for d in diagnostics {
        log::warn!("{d}");
    }
    Ok(record)
}

/// Stacks slices into a HU volume of dims `(cols, rows, n_slices)`, sorted by
/// ascending z. Through-plane spacing is the mean z gap.
pub fn assemble_series(slices: &[SliceRecord]) -> Result<Volume> {
    if slices.len() < 2 {
        return Err(Error::Consistency(format!(
            "a series needs at least 2 slices, got {}",
            slices.len()
        )));
    }
    let first = &slices[0];
    for (n, s) in slices.iter().enumerate() {
        s.validate()?;
        if s.rows != first.rows || s.cols != first.cols {
            return Err(Error::Consistency(format!(
                "slice {n} is {}x{}, expected {}x{}",
                s.rows, s.cols, first.rows, first.cols
            )));
        }
        if s.pixel_spacing != first.pixel_spacing {
            return Err(Error::Consistency(format!(
                "slice {n} has pixel spacing {:?}, expected {:?}",
                s.pixel_spacing, first.pixel_spacing
            )));
        }
        if !s.image_position_z.is_finite() {
            return Err(Error::Consistency(format!(
                "slice {n} has non-finite z position"
            )));
        }
    }
    let mut order: Vec<&SliceRecord> = slices.iter().collect();
    order.sort_by(|a, b| a.image_position_z.total_cmp(&b.image_position_z));
    if let Some(w) = order
        .windows(2)
        .find(|w| w[0].image_position_z == w[1].image_position_z)
    {
        return Err(Error::Consistency(format!(
            "duplicate slice position z = {}",
            w[0].image_position_z
        )));
    }

    let (rows, cols, n) = (first.rows, first.cols, order.len());
    let z0 = order[0].image_position_z;
    let gap = (order[n - 1].image_position_z - z0) / (n - 1) as f64;
    let mut data = Vec::with_capacity(rows * cols * n);
    for s in &order {
        data.extend(
            s.stored_pixels
                .iter()
                .map(|&p| (s.rescale_slope * p as f64 + s.rescale_intercept) as f32),
        );
    }
    let (row_mm, col_mm) = first.pixel_spacing;
    Volume::new(
        [cols, rows, n],
        [col_mm, row_mm, gap],
        [0.0, 0.0, z0],
        data,
        Unit::HounsfieldUnits,
    )
}

/// Serializes the supported subset of a [`SliceRecord`] as an Explicit VR
/// Little Endian Part-10 file. Used to build fixtures and synthetic series.
pub fn encode_slice(record: &SliceRecord) -> Vec<u8> {
    fn element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        out.extend_from_slice(vr);
        if has_long_length(*vr) {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
        out.extend_from_slice(value);
    }
    fn padded(text: String, pad: u8) -> Vec<u8> {
        let mut b = text.into_bytes();
        if b.len() % 2 == 1 {
            b.push(pad);
        }
        b
    }
    // `{:?}` on f64 gives the shortest round-tripping representation.
    let ds = |v: f64| format!("{v:?}");

    let mut out = vec![0u8; PREAMBLE_LEN];
    out.extend_from_slice(MAGIC);
    element(
        &mut out,
        Tag::TRANSFER_SYNTAX,
        b"UI",
        &padded(EXPLICIT_VR_LITTLE_ENDIAN.to_string(), 0),
    );
    if let Some(t) = record.slice_thickness {
        element(&mut out, Tag::SLICE_THICKNESS, b"DS", &padded(ds(t), b' '));
    }
    element(
        &mut out,
        Tag::IMAGE_POSITION_PATIENT,
        b"DS",
        &padded(format!("0.0\\0.0\\{}", ds(record.image_position_z)), b' '),
    );
    element(
        &mut out,
        Tag::ROWS,
        b"US",
        &(record.rows as u16).to_le_bytes(),
    );
    element(
        &mut out,
        Tag::COLUMNS,
        b"US",
        &(record.cols as u16).to_le_bytes(),
    );
    element(
        &mut out,
        Tag::PIXEL_SPACING,
        b"DS",
        &padded(
            format!(
                "{}\\{}",
                ds(record.pixel_spacing.0),
                ds(record.pixel_spacing.1)
            ),
            b' ',
        ),
    );
    element(&mut out, Tag::BITS_ALLOCATED, b"US", &16u16.to_le_bytes());
    let signed = record
        .stored_pixels
        .iter()
        .all(|&p| i16::try_from(p).is_ok());
    element(
        &mut out,
        Tag::PIXEL_REPRESENTATION,
        b"US",
        &(signed as u16).to_le_bytes(),
    );
    element(
        &mut out,
        Tag::RESCALE_INTERCEPT,
        b"DS",
        &padded(ds(record.rescale_intercept), b' '),
    );
    element(
        &mut out,
        Tag::RESCALE_SLOPE,
        b"DS",
        &padded(ds(record.rescale_slope), b' '),
    );
    let pixels: Vec<u8> = record
        .stored_pixels
        .iter()
        .flat_map(|&p| (p as u16).to_le_bytes())
        .collect();
    element(&mut out, Tag::PIXEL_DATA, b"OW", &pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Hand-rolled element writer, independent of `encode_slice`.
    fn el(out: &mut Vec<u8>, group: u16, elem: u16, vr: &str, value: &[u8]) {
        out.extend(group.to_le_bytes());
        out.extend(elem.to_le_bytes());
        out.extend(vr.as_bytes());
        if ["OB", "OW", "SQ", "UN", "UT"].contains(&vr) {
            out.extend([0, 0]);
            out.extend((value.len() as u32).to_le_bytes());
        } else {
            out.extend((value.len() as u16).to_le_bytes());
        }
        out.extend(value);
    }

    fn header(syntax: &[u8]) -> Vec<u8> {
        let mut b = vec![0u8; 128];
        b.extend(b"DICM");
        el(&mut b, 0x0002, 0x0010, "UI", syntax);
        b
    }

    fn pixels_4x4() -> Vec<i16> {
        (0..16).map(|v| v * 10 - 30).collect()
    }

    fn hand_built(private_tags: bool) -> Vec<u8> {
        let mut b = header(b"1.2.840.10008.1.2.1\0");
        if private_tags {
            el(&mut b, 0x0009, 0x0010, "LO", b"ACME");
            el(&mut b, 0x0009, 0x1001, "OB", &[1, 2, 3, 4, 5, 6]);
        }
        el(&mut b, 0x0018, 0x0050, "DS", b"1.0 ");
        el(&mut b, 0x0020, 0x0032, "DS", b"-120.5\\-80\\42.25 ");
        if private_tags {
            el(&mut b, 0x0021, 0x1010, "UT", b"free text!");
        }
        el(&mut b, 0x0028, 0x0010, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0011, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0030, "DS", b"0.75\\0.8");
        el(&mut b, 0x0028, 0x0100, "US", &16u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0103, "US", &1u16.to_le_bytes());
        if private_tags {
            el(&mut b, 0x0029, 0x0001, "SH", b"XY");
        }
        el(&mut b, 0x0028, 0x1052, "DS", b"-1024 ");
        el(&mut b, 0x0028, 0x1053, "DS", b"1 ");
        let px: Vec<u8> = pixels_4x4().iter().flat_map(|p| p.to_le_bytes()).collect();
        el(&mut b, 0x7FE0, 0x0010, "OW", &px);
        b
    }

    fn expected_record() -> SliceRecord {
        SliceRecord {
            rows: 4,
            cols: 4,
            pixel_spacing: (0.75, 0.8),
            slice_thickness: Some(1.0),
            image_position_z: 42.25,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            stored_pixels: pixels_4x4().into_iter().map(i32::from).collect(),
        }
    }

    #[test]
    fn parses_hand_built_file_field_by_field() {
        let (rec, diags) = parse_dicom_slice_with_diagnostics(&hand_built(false)).unwrap();
        assert!(diags.is_empty());
        assert_eq!(rec, expected_record());
    }

    #[test]
    fn private_tags_are_skipped() {
        assert_eq!(
            parse_dicom_slice(&hand_built(true)).unwrap(),
            parse_dicom_slice(&hand_built(false)).unwrap()
        );
    }

    #[test]
    fn undefined_length_sequences_are_skipped() {
        let base = hand_built(false);
        let mut b = header(b"1.2.840.10008.1.2.1\0");
        // (0008,1140) SQ, undefined length, one undefined-length item holding
        // a nested element, then one defined-length item.
        b.extend(0x0008u16.to_le_bytes());
        b.extend(0x1140u16.to_le_bytes());
        b.extend(b"SQ\0\0");
        b.extend(u32::MAX.to_le_bytes());
        b.extend(0xFFFEu16.to_le_bytes());
        b.extend(0xE000u16.to_le_bytes());
        b.extend(u32::MAX.to_le_bytes());
        el(&mut b, 0x0008, 0x1150, "UI", b"1.2.3\0");
        b.extend(0xFFFEu16.to_le_bytes());
        b.extend(0xE00Du16.to_le_bytes());
        b.extend(0u32.to_le_bytes());
        b.extend(0xFFFEu16.to_le_bytes());
        b.extend(0xE000u16.to_le_bytes());
        b.extend(4u32.to_le_bytes());
        b.extend([9, 9, 9, 9]);
        b.extend(0xFFFEu16.to_le_bytes());
        b.extend(0xE0DDu16.to_le_bytes());
        b.extend(0u32.to_le_bytes());
        // Rest of the data set from the reference file.
        let meta_len = header(b"1.2.840.10008.1.2.1\0").len();
        b.extend(&base[meta_len..]);
        assert_eq!(parse_dicom_slice(&b).unwrap(), expected_record());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let b = hand_built(false);
        for cut in [b.len() - 1, b.len() - 20, 140, 133] {
            assert!(
                matches!(parse_dicom_slice(&b[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn missing_magic_is_format_error() {
        let mut b = hand_built(false);
        b[128] = b'X';
        assert!(matches!(parse_dicom_slice(&b), Err(Error::Format(m)) if m.contains("DICM")));
        assert!(matches!(
            parse_dicom_slice(&[0u8; 64]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn other_transfer_syntax_is_unsupported() {
        let mut b = header(b"1.2.840.10008.1.2.4.50");
        el(&mut b, 0x0028, 0x0010, "US", &4u16.to_le_bytes());
        let err = parse_dicom_slice(&b).unwrap_err();
        assert!(matches!(&err, Error::Unsupported(m) if m.contains("1.2.840.10008.1.2.4.50")));
    }

    #[test]
    fn missing_required_tag_is_named() {
        let full = hand_built(false);
        let mut b = header(b"1.2.840.10008.1.2.1\0");
        el(&mut b, 0x0028, 0x0010, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0011, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0030, "DS", b"0.75\\0.8");
        let err = parse_dicom_slice(&b).unwrap_err();
        assert!(err.to_string().contains("ImagePositionPatient"), "{err}");
        assert!(!full.is_empty());
    }

    #[test]
    fn pixel_length_mismatch_is_format_error() {
        let mut b = header(b"1.2.840.10008.1.2.1\0");
        el(&mut b, 0x0020, 0x0032, "DS", b"0\\0\\0 ");
        el(&mut b, 0x0028, 0x0010, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0011, "US", &4u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0030, "DS", b"1\\1 ");
        el(&mut b, 0x7FE0, 0x0010, "OW", &[0u8; 30]);
        assert!(matches!(parse_dicom_slice(&b), Err(Error::Format(m)) if m.contains("pixel data")));
    }

    #[test]
    fn missing_rescale_defaults_with_diagnostics() {
        let mut b = header(b"1.2.840.10008.1.2.1\0");
        el(&mut b, 0x0020, 0x0032, "DS", b"0\\0\\5 ");
        el(&mut b, 0x0028, 0x0010, "US", &1u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0011, "US", &2u16.to_le_bytes());
        el(&mut b, 0x0028, 0x0030, "DS", b"1\\1 ");
        el(&mut b, 0x0028, 0x0103, "US", &0u16.to_le_bytes());
        el(&mut b, 0x7FE0, 0x0010, "OW", &[0xFF, 0xFF, 1, 0]);
        let (rec, diags) = parse_dicom_slice_with_diagnostics(&b).unwrap();
        assert_eq!(rec.rescale_slope, 1.0);
        assert_eq!(rec.rescale_intercept, 0.0);
        assert_eq!(rec.stored_pixels, vec![65535, 1]);
        assert_eq!(rec.slice_thickness, None);
        assert_eq!(
            diags,
            vec![Diagnostic::DefaultedSlope, Diagnostic::DefaultedIntercept]
        );
    }

    fn slice(z: f64, fill: i32) -> SliceRecord {
        SliceRecord {
            rows: 2,
            cols: 3,
            pixel_spacing: (0.7, 0.6),
            slice_thickness: Some(1.0),
            image_position_z: z,
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            stored_pixels: (0..6).map(|v| v + fill).collect(),
        }
    }

    #[test]
    fn rescale_formula() {
        let mut a = slice(0.0, 0);
        a.stored_pixels = vec![100, 0, 100, 0, 100, 0];
        let b = SliceRecord {
            image_position_z: 1.0,
            ..a.clone()
        };
        let v = assemble_series(&[a, b]).unwrap();
        assert_eq!(v.get(0, 0, 0).unwrap(), -924.0);
        assert_eq!(v.get(1, 0, 0).unwrap(), -1024.0);
        assert_eq!(v.unit(), Unit::HounsfieldUnits);
    }

    #[test]
    fn shuffled_slices_sorted_by_z() {
        let slices = vec![slice(3.0, 300), slice(1.0, 100), slice(2.0, 200)];
        let v = assemble_series(&slices).unwrap();
        assert_eq!(v.dims(), [3, 2, 3]);
        assert_eq!(v.spacing(), [0.6, 0.7, 1.0]);
        // brute force: rank each slice by counting strictly smaller z values
        for s in &slices {
            let rank = slices
                .iter()
                .filter(|o| o.image_position_z < s.image_position_z)
                .count();
            for row in 0..2 {
                for col in 0..3 {
                    assert_eq!(v.get(col, row, rank).unwrap() as f64, s.hu(row, col));
                }
            }
        }
    }

    #[test]
    fn series_consistency_errors() {
        let mut odd = slice(2.0, 0);
        odd.rows = 1;
        odd.stored_pixels.truncate(3);
        assert!(matches!(
            assemble_series(&[slice(1.0, 0), odd]),
            Err(Error::Consistency(_))
        ));
        assert!(matches!(
            assemble_series(&[slice(1.0, 0), slice(1.0, 5)]),
            Err(Error::Consistency(m)) if m.contains("duplicate")
        ));
        assert!(assemble_series(&[slice(1.0, 0)]).is_err());
    }

    fn arb_record() -> impl Strategy<Value = SliceRecord> {
        (1usize..6, 1usize..6).prop_flat_map(|(rows, cols)| {
            (
                prop::collection::vec(-32768i32..=32767, rows * cols),
                0.1f64..5.0,
                0.1f64..5.0,
                proptest::option::of(0.5f64..5.0),
                -500.0f64..500.0,
                prop_oneof![Just(1.0f64), 0.01f64..4.0, -4.0f64..-0.01],
                -4000.0f64..4000.0,
            )
                .prop_map(move |(px, r, c, t, z, slope, icpt)| SliceRecord {
                    rows,
                    cols,
                    pixel_spacing: (r, c),
                    slice_thickness: t,
                    image_position_z: z,
                    rescale_slope: slope,
                    rescale_intercept: icpt,
                    stored_pixels: px,
                })
        })
    }

    proptest! {
        #[test]
        fn encode_parse_is_identity(rec in arb_record()) {
            let parsed = parse_dicom_slice(&encode_slice(&rec)).unwrap();
            prop_assert_eq!(&parsed, &rec);
            prop_assert_eq!(parse_dicom_slice(&encode_slice(&parsed)).unwrap(), parsed);
        }

        #[test]
        fn assembly_invariant_to_order(seed in any::<u64>(), n in 2usize..6) {
            use rand::{seq::SliceRandom, SeedableRng};
            let slices: Vec<_> = (0..n).map(|i| slice(i as f64 * 1.5 - 3.0, i as i32 * 7)).collect();
            let mut shuffled = slices.clone();
            shuffled.shuffle(&mut rand_xoshiro::Xoshiro256StarStar::seed_from_u64(seed));
            prop_assert_eq!(assemble_series(&slices).unwrap(), assemble_series(&shuffled).unwrap());
        }
    }
}
