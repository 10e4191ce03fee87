//! Single-file NIfTI-1 (`.nii`) reader and writer, little-endian only.
//!
//! Layout written: the 348-byte header, four zero bytes of extension
//! indicator, then voxel data in x-fastest order starting at offset 352.
//! HU volumes are stored as int16 with `scl_slope = 1`, `scl_inter = 0`;
//! normalized volumes as float32. On read, int16 data comes back as HU and
//! float32 data comes back as [`Unit::Normalized`] when every value lies in
//! `[0, 1]`, otherwise as HU.

use std::io::{self, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Unit, Volume};

pub const HEADER_SIZE: usize = 348;
pub const DEFAULT_VOX_OFFSET: usize = 352;
pub const MAGIC_SINGLE_FILE: &[u8; 4] = b"n+1\0";
pub const MAGIC_PAIR: &[u8; 4] = b"ni1\0";

pub const DT_INT16: i16 = 4;
pub const DT_FLOAT32: i16 = 16;

/// `xyzt_units` code for millimetres.
const UNITS_MM: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: [u8; 80],
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
}

impl NiftiHeader {
    /// Header describing `vol` as written by [`write_nifti`].
    pub fn for_volume(vol: &Volume) -> Self {
        let [nx, ny, nz] = vol.dims();
        let [sx, sy, sz] = vol.spacing();
        let [ox, oy, oz] = vol.origin();
        let (datatype, bitpix) = match vol.unit() {
            Unit::HounsfieldUnits => (DT_INT16, 16),
            Unit::Normalized => (DT_FLOAT32, 32),
        };
        let mut descrip = [0u8; 80];
        let text = b"pecnn volume";
        descrip[..text.len()].copy_from_slice(text);
        NiftiHeader {
            sizeof_hdr: HEADER_SIZE as i32,
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype,
            bitpix,
            pixdim: [1.0, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: if datatype == DT_INT16 { 1.0 } else { 0.0 },
            scl_inter: 0.0,
            xyzt_units: UNITS_MM,
            descrip,
            qform_code: 1,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [ox as f32, oy as f32, oz as f32],
            srow_x: [sx as f32, 0.0, 0.0, ox as f32],
            srow_y: [0.0, sy as f32, 0.0, oy as f32],
            srow_z: [0.0, 0.0, sz as f32, oz as f32],
            magic: *MAGIC_SINGLE_FILE,
        }
    }

    /// Checks every structural invariant of a supported header.
    pub fn validate(&self) -> Result<()> {
        if self.sizeof_hdr != HEADER_SIZE as i32 {
            return Err(Error::Format(format!(
                "sizeof_hdr is {}, expected 348",
                self.sizeof_hdr
            )));
        }
        if &self.magic == MAGIC_PAIR {
            return Err(Error::Unsupported(
                "two-file NIfTI (.hdr/.img, magic \"ni1\")".into(),
            ));
        }
        if &self.magic != MAGIC_SINGLE_FILE {
            return Err(Error::Format(format!("bad magic {:?}", self.magic)));
        }
        let expected_bitpix = match self.datatype {
            DT_INT16 => 16,
            DT_FLOAT32 => 32,
            other => return Err(Error::Unsupported(format!("NIfTI datatype code {other}"))),
        };
        if self.bitpix != expected_bitpix {
            return Err(Error::Format(format!(
                "bitpix {} inconsistent with datatype {}",
                self.bitpix, self.datatype
            )));
        }
        let off = self.vox_offset;
        if !(off >= DEFAULT_VOX_OFFSET as f32 && off.fract() == 0.0 && (off as usize).is_multiple_of(16)) {
            return Err(Error::Format(format!(
                "vox_offset {off} must be an integer multiple of 16 and at least 352"
            )));
        }
        if self.dim[0] < 3 || self.dim[0] > 7 {
            return Err(Error::Unsupported(format!("rank {} volumes", self.dim[0])));
        }
        let rank = self.dim[0] as usize;
        if self.dim[1..=3].iter().any(|&d| d <= 0) {
            return Err(Error::Format(format!(
                "non-positive extents in {:?}",
                self.dim
            )));
        }
        if self.dim[4..=rank].iter().any(|&d| d != 1) {
            return Err(Error::Unsupported(format!(
                "non-singleton extents beyond 3D in {:?}",
                self.dim
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        let put = |b: &mut [u8; HEADER_SIZE], off: usize, src: &[u8]| {
            b[off..off + src.len()].copy_from_slice(src)
        };
        put(&mut b, 0, &self.sizeof_hdr.to_le_bytes());
        b[38] = b'r';
        for (n, d) in self.dim.iter().enumerate() {
            put(&mut b, 40 + 2 * n, &d.to_le_bytes());
        }
        put(&mut b, 70, &self.datatype.to_le_bytes());
        put(&mut b, 72, &self.bitpix.to_le_bytes());
        for (n, p) in self.pixdim.iter().enumerate() {
            put(&mut b, 76 + 4 * n, &p.to_le_bytes());
        }
        put(&mut b, 108, &self.vox_offset.to_le_bytes());
        put(&mut b, 112, &self.scl_slope.to_le_bytes());
        put(&mut b, 116, &self.scl_inter.to_le_bytes());
        b[123] = self.xyzt_units;
        put(&mut b, 148, &self.descrip);
        put(&mut b, 252, &self.qform_code.to_le_bytes());
        put(&mut b, 254, &self.sform_code.to_le_bytes());
        for (n, q) in self.quatern.iter().chain(&self.qoffset).enumerate() {
            put(&mut b, 256 + 4 * n, &q.to_le_bytes());
        }
        for (row, base) in [
            (&self.srow_x, 280),
            (&self.srow_y, 296),
            (&self.srow_z, 312),
        ] {
            for (n, v) in row.iter().enumerate() {
                put(&mut b, base + 4 * n, &v.to_le_bytes());
            }
        }
        put(&mut b, 344, &self.magic);
        b
    }

    pub fn from_bytes(b: &[u8; HEADER_SIZE]) -> Result<Self> {
        let i16_at = |off: usize| i16::from_le_bytes([b[off], b[off + 1]]);
        let f32_at = |off: usize| f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]);
        let sizeof_hdr = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI".into()));
        }
        let mut dim = [0i16; 8];
        for (n, d) in dim.iter_mut().enumerate() {
            *d = i16_at(40 + 2 * n);
        }
        let mut pixdim = [0f32; 8];
        for (n, p) in pixdim.iter_mut().enumerate() {
            *p = f32_at(76 + 4 * n);
        }
        let row = |base: usize| {
            [
                f32_at(base),
                f32_at(base + 4),
                f32_at(base + 8),
                f32_at(base + 12),
            ]
        };
        let mut descrip = [0u8; 80];
        descrip.copy_from_slice(&b[148..228]);
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&b[344..348]);
        Ok(NiftiHeader {
            sizeof_hdr,
            dim,
            datatype: i16_at(70),
            bitpix: i16_at(72),
            pixdim,
            vox_offset: f32_at(108),
            scl_slope: f32_at(112),
            scl_inter: f32_at(116),
            xyzt_units: b[123],
            descrip,
            qform_code: i16_at(252),
            sform_code: i16_at(254),
            quatern: [f32_at(256), f32_at(260), f32_at(264)],
            qoffset: [f32_at(268), f32_at(272), f32_at(276)],
            srow_x: row(280),
            srow_y: row(296),
            srow_z: row(312),
            magic,
        })
    }
}

/// Writes `vol` as a single-file NIfTI-1 image and returns the byte count.
pub fn write_nifti<W: Write>(vol: &Volume, mut sink: W) -> Result<usize> {
    let [nx, ny, nz] = vol.dims();
    if [nx, ny, nz].iter().any(|&d| d > i16::MAX as usize) {
        return Err(Error::Range(format!(
            "dimensions {:?} exceed the NIfTI-1 limit of 32767",
            vol.dims()
        )));
    }
    let header = NiftiHeader::for_volume(vol);
    let payload: Vec<u8> = match vol.unit() {
        Unit::HounsfieldUnits => {
            let mut out = Vec::with_capacity(vol.len() * 2);
            for &v in vol.data() {
                let r = v.round();
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&r) {
                    return Err(Error::Range(format!("HU value {v} does not fit in int16")));
                }
                out.extend_from_slice(&(r as i16).to_le_bytes());
            }
            out
        }
        Unit::Normalized => vol.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    let io_err = |e: io::Error| Error::io("writing NIfTI", e);
    sink.write_all(&header.to_bytes()).map_err(io_err)?;
    sink.write_all(&[0u8; DEFAULT_VOX_OFFSET - HEADER_SIZE])
        .map_err(io_err)?;
    sink.write_all(&payload).map_err(io_err)?;
    sink.flush().map_err(io_err)?;
    Ok(DEFAULT_VOX_OFFSET + payload.len())
}

pub fn read_nifti_header<R: Read>(source: &mut R) -> Result<NiftiHeader> {
    let mut buf = [0u8; HEADER_SIZE];
    source.read_exact(&mut buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Format("file shorter than NIfTI header".into()),
        _ => Error::io("reading NIfTI header", e),
    })?;
    let header = NiftiHeader::from_bytes(&buf)?;
    header.validate()?;
    Ok(header)
}

pub fn read_nifti<R: Read>(mut source: R) -> Result<Volume> {
    let header = read_nifti_header(&mut source)?;
    let skip = header.vox_offset as u64 - HEADER_SIZE as u64;
    let skipped = io::copy(&mut (&mut source).take(skip), &mut io::sink())
        .map_err(|e| Error::io("reading NIfTI extension", e))?;
    if skipped != skip {
        return Err(Error::Format("file ends before vox_offset".into()));
    }
    let n = header.voxel_count();
    let bytes_per = (header.bitpix / 8) as usize;
    let mut payload = Vec::with_capacity(n * bytes_per);
    (&mut source)
        .take((n * bytes_per) as u64)
        .read_to_end(&mut payload)
        .map_err(|e| Error::io("reading NIfTI payload", e))?;
    if payload.len() != n * bytes_per {
        return Err(Error::Format(format!(
            "payload holds {} bytes, expected {} for dims {:?}",
            payload.len(),
            n * bytes_per,
            header.dims()
        )));
    }

    let scale = |v: f32| {
        if header.scl_slope != 0.0 && header.scl_slope.is_finite() {
            header.scl_slope * v + header.scl_inter
        } else {
            v
        }
    };
    let data: Vec<f32> = match header.datatype {
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|b| scale(i16::from_le_bytes([b[0], b[1]]) as f32))
            .collect(),
        _ => payload
            .chunks_exact(4)
            .map(|b| scale(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
            .collect(),
    };
    let unit = if header.datatype == DT_FLOAT32 && data.iter().all(|v| (0.0..=1.0).contains(v)) {
        Unit::Normalized
    } else {
        Unit::HounsfieldUnits
    };
    let spacing = [
        header.pixdim[1] as f64,
        header.pixdim[2] as f64,
        header.pixdim[3] as f64,
    ];
    let origin = header.qoffset.map(|v| v as f64);
    Volume::new(header.dims(), spacing, origin, data, unit)
}

pub fn write_nifti_file(vol: &Volume, path: &Path) -> Result<usize> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    write_nifti(vol, io::BufWriter::new(file))
}

pub fn read_nifti_file(path: &Path) -> Result<Volume> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_nifti(io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a 4x4x4 int16 file with every voxel equal to 7, writing each
    /// header field at its documented offset by hand.
    fn reference_constant_file() -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        for (n, d) in [3i16, 4, 4, 4, 1, 1, 1, 1].iter().enumerate() {
            b[40 + 2 * n..42 + 2 * n].copy_from_slice(&d.to_le_bytes());
        }
        b[70..72].copy_from_slice(&4i16.to_le_bytes());
        b[72..74].copy_from_slice(&16i16.to_le_bytes());
        for (n, p) in [1.0f32, 2.0, 2.0, 1.0].iter().enumerate() {
            b[76 + 4 * n..80 + 4 * n].copy_from_slice(&p.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        b[112..116].copy_from_slice(&1.0f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        for _ in 0..64 {
            b.extend(7i16.to_le_bytes());
        }
        b
    }

    #[test]
    fn reads_reference_constant_file() {
        let v = read_nifti(&reference_constant_file()[..]).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert_eq!(v.spacing(), [2.0, 2.0, 1.0]);
        assert_eq!(v.unit(), Unit::HounsfieldUnits);
        assert!(v.data().iter().all(|&x| x == 7.0));
    }

    #[test]
    fn scl_slope_applied() {
        let mut b = reference_constant_file();
        b[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        b[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        let v = read_nifti(&b[..]).unwrap();
        assert!(v.data().iter().all(|&x| x == 13.0));
    }

    #[test]
    fn pair_magic_is_unsupported() {
        let mut b = reference_constant_file();
        b[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(read_nifti(&b[..]), Err(Error::Unsupported(_))));
        b[344..348].copy_from_slice(b"xyz\0");
        assert!(matches!(read_nifti(&b[..]), Err(Error::Format(_))));
    }

    #[test]
    fn unsupported_datatype_and_short_payload() {
        let mut b = reference_constant_file();
        b[70..72].copy_from_slice(&64i16.to_le_bytes());
        assert!(matches!(read_nifti(&b[..]), Err(Error::Unsupported(_))));
        let b = reference_constant_file();
        assert!(matches!(
            read_nifti(&b[..b.len() - 2]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn float_volume_byte_count() {
        let v = Volume::filled([2, 2, 2], 0.5, Unit::Normalized).unwrap();
        let mut out = Vec::new();
        assert_eq!(write_nifti(&v, &mut out).unwrap(), 384);
        assert_eq!(out.len(), 384);
        assert_eq!(&out[344..348], b"n+1\0");
        assert_eq!(&out[348..352], &[0, 0, 0, 0]);
    }

    #[test]
    fn hu_out_of_int16_range() {
        let v = Volume::filled([2, 2, 2], 40000.0, Unit::HounsfieldUnits).unwrap();
        assert!(matches!(write_nifti(&v, Vec::new()), Err(Error::Range(_))));
    }

    #[test]
    fn sink_failure_is_io_error() {
        struct Broken;
        impl Write for Broken {
            fn write(&mut self, _: &[u8]) -> io::Result<usize> {
                Err(io::Error::other("disk full"))
            }
            fn flush(&mut self) -> io::Result<()> {
                Ok(())
            }
        }
        let v = Volume::filled([2, 2, 2], 0.0, Unit::Normalized).unwrap();
        assert!(matches!(write_nifti(&v, Broken), Err(Error::Io { .. })));
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (
            1usize..6,
            1usize..6,
            1usize..6,
            any::<bool>(),
            0.2f64..3.0,
            0.2f64..3.0,
            0.2f64..3.0,
        )
            .prop_flat_map(|(nx, ny, nz, hu, sx, sy, sz)| {
                let n = nx * ny * nz;
                let data = if hu {
                    prop::collection::vec((-1024i32..3072).prop_map(|v| v as f32), n).boxed()
                } else {
                    prop::collection::vec(0.0f32..=1.0, n).boxed()
                };
                data.prop_map(move |d| {
                    let unit = if hu {
                        Unit::HounsfieldUnits
                    } else {
                        Unit::Normalized
                    };
                    Volume::new(
                        [nx, ny, nz],
                        [sx as f32 as f64, sy as f32 as f64, sz as f32 as f64],
                        [0.0; 3],
                        d,
                        unit,
                    )
                    .unwrap()
                })
            })
    }

    proptest! {
        #[test]
        fn roundtrip_identity(v in arb_volume()) {
            let mut bytes = Vec::new();
            write_nifti(&v, &mut bytes).unwrap();
            let back = read_nifti(&bytes[..]).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert_eq!(back.spacing(), v.spacing());
            prop_assert_eq!(back.data(), v.data());
            let mut again = Vec::new();
            write_nifti(&back, &mut again).unwrap();
            prop_assert_eq!(again, bytes);
        }

        #[test]
        fn written_headers_satisfy_invariants(v in arb_volume()) {
            let h = NiftiHeader::for_volume(&v);
            prop_assert!(h.validate().is_ok());
            let parsed = NiftiHeader::from_bytes(&h.to_bytes()).unwrap();
            prop_assert_eq!(&parsed, &h);
            prop_assert_eq!(parsed.sizeof_hdr, 348);
            prop_assert_eq!(parsed.vox_offset as usize % 16, 0);
            prop_assert_eq!(parsed.bitpix, if parsed.datatype == DT_INT16 { 16 } else { 32 });
        }
    }
}
