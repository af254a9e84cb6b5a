//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reading and writing.
//!
//! Only the subset needed for co-registered 3D scans is supported: scalar
//! voxels of type uint8, int16, uint16, float32 or float64. Orientation
//! (qform/sform) is parsed and kept on the header but never used to resample;
//! volumes live in stored index space.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::volume::{Grid, LabelVolume, Volume3D, VolumeError};

pub const HEADER_SIZE: usize = 348;
pub const MAGIC: [u8; 4] = *b"n+1\0";
const DEFAULT_VOX_OFFSET: usize = 352;

#[derive(Debug, Error)]
pub enum NiftiError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed NIfTI header field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

fn format_err(field: &'static str, reason: impl Into<String>) -> NiftiError {
    NiftiError::Format {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Uint16,
    Float32,
    Float64,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
            Datatype::Float64 => 64,
            Datatype::Uint16 => 512,
        }
    }

    pub fn from_code(code: i16) -> Result<Self, NiftiError> {
        Ok(match code {
            2 => Datatype::Uint8,
            4 => Datatype::Int16,
            16 => Datatype::Float32,
            64 => Datatype::Float64,
            512 => Datatype::Uint16,
            other => return Err(NiftiError::UnsupportedDatatype(other)),
        })
    }

    pub fn byte_size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 | Datatype::Uint16 => 2,
            Datatype::Float32 => 4,
            Datatype::Float64 => 8,
        }
    }
}

/// The header fields this crate reads or writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub little_endian: bool,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub descrip: String,
}

impl NiftiHeader {
    /// Header for a fresh single-file image of the given grid and type.
    pub fn for_grid(grid: Grid, datatype: Datatype) -> Self {
        let [nx, ny, nz] = grid.dims;
        let [sx, sy, sz] = grid.spacing;
        Self {
            little_endian: true,
            dim: [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1],
            datatype,
            bitpix: (datatype.byte_size() * 8) as i16,
            pixdim: [1.0, sx as f32, sy as f32, sz as f32, 0.0, 0.0, 0.0, 0.0],
            vox_offset: DEFAULT_VOX_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: 2,
            qform_code: 0,
            sform_code: 1,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [
                [sx as f32, 0.0, 0.0, 0.0],
                [0.0, sy as f32, 0.0, 0.0],
                [0.0, 0.0, sz as f32, 0.0],
            ],
            descrip: String::new(),
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    pub fn spacing(&self) -> [f64; 3] {
        [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims().iter().product()
    }

    fn parse(buf: &[u8]) -> Result<Self, NiftiError> {
        if buf.len() < HEADER_SIZE {
            return Err(format_err("sizeof_hdr", "file shorter than 348 bytes"));
        }
        let le = i32::from_le_bytes(buf[0..4].try_into().unwrap());
        let be = i32::from_be_bytes(buf[0..4].try_into().unwrap());
        let little_endian = match (le, be) {
            (348, _) => true,
            (_, 348) => false,
            _ => return Err(format_err("sizeof_hdr", format!("expected 348, found {le}"))),
        };
        if buf[344..348] != MAGIC {
            return Err(format_err(
                "magic",
                format!("expected \"n+1\\0\", found {:?}", &buf[344..348]),
            ));
        }
        let r = FieldReader { buf, little_endian };

        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, vals) in srow.iter_mut().enumerate() {
            for (col, v) in vals.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * row + 4 * col);
            }
        }
        let descrip = buf[148..228]
            .split(|&b| b == 0)
            .next()
            .map(|s| String::from_utf8_lossy(s).into_owned())
            .unwrap_or_default();

        let datatype = Datatype::from_code(r.i16(70))?;
        let mut header = Self {
            little_endian,
            dim,
            datatype,
            bitpix: r.i16(72),
            pixdim,
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            xyzt_units: buf[123],
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            descrip,
        };
        header.validate()?;
        Ok(header)
    }

    /// Checks the fields the reader depends on and normalizes dim/pixdim to 3D.
    fn validate(&mut self) -> Result<(), NiftiError> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(format_err("dim[0]", format!("rank {ndim} outside 1..=7")));
        }
        for i in 1..=7 {
            if i as i16 > ndim {
                self.dim[i] = 1;
            } else if self.dim[i] < 1 {
                return Err(format_err("dim", format!("dim[{i}] = {} is not positive", self.dim[i])));
            } else if i > 3 && self.dim[i] != 1 {
                return Err(format_err("dim", format!("dim[{i}] = {}; only 3D volumes are supported", self.dim[i])));
            }
        }
        self.dim[0] = 3;
        for i in 1..=3 {
            let p = self.pixdim[i];
            if !p.is_finite() || p < 0.0 {
                return Err(format_err("pixdim", format!("pixdim[{i}] = {p} is not a valid spacing")));
            }
            if p == 0.0 {
                // Unset spacing on a collapsed axis; treat as 1 mm.
                self.pixdim[i] = 1.0;
            }
        }
        if self.bitpix as usize != self.datatype.byte_size() * 8 {
            return Err(format_err(
                "bitpix",
                format!("{} does not match datatype {:?}", self.bitpix, self.datatype),
            ));
        }
        if !(self.vox_offset.is_finite() && self.vox_offset >= HEADER_SIZE as f32) {
            return Err(format_err("vox_offset", format!("{} is before the end of the header", self.vox_offset)));
        }
        Ok(())
    }

    fn to_bytes(&self) -> [u8; HEADER_SIZE] {
        let mut buf = [0u8; HEADER_SIZE];
        let mut w = FieldWriter { buf: &mut buf };
        w.i32(0, HEADER_SIZE as i32);
        w.buf[38] = b'r';
        for (i, d) in self.dim.iter().enumerate() {
            w.i16(40 + 2 * i, *d);
        }
        w.i16(70, self.datatype.code());
        w.i16(72, self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            w.f32(76 + 4 * i, *p);
        }
        w.f32(108, self.vox_offset);
        w.f32(112, self.scl_slope);
        w.f32(116, self.scl_inter);
        w.buf[123] = self.xyzt_units;
        let desc = self.descrip.as_bytes();
        let n = desc.len().min(79);
        w.buf[148..148 + n].copy_from_slice(&desc[..n]);
        w.i16(252, self.qform_code);
        w.i16(254, self.sform_code);
        for i in 0..3 {
            w.f32(256 + 4 * i, self.quatern[i]);
            w.f32(268 + 4 * i, self.qoffset[i]);
        }
        for (row, vals) in self.srow.iter().enumerate() {
            for (col, v) in vals.iter().enumerate() {
                w.f32(280 + 16 * row + 4 * col, *v);
            }
        }
        w.buf[344..348].copy_from_slice(&MAGIC);
        buf
    }
}

struct FieldReader<'a> {
    buf: &'a [u8],
    little_endian: bool,
}

impl FieldReader<'_> {
    fn bytes<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[off..off + N].try_into().unwrap();
        if !self.little_endian {
            b.reverse();
        }
        b
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.bytes(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.bytes(off))
    }
}

struct FieldWriter<'a> {
    buf: &'a mut [u8; HEADER_SIZE],
}

impl FieldWriter<'_> {
    fn i32(&mut self, off: usize, v: i32) {
        self.buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
    fn i16(&mut self, off: usize, v: i16) {
        self.buf[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, off: usize, v: f32) {
        self.buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }
}

/// Header plus voxel values after slope/intercept scaling.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub values: Vec<f64>,
}

impl NiftiImage {
    pub fn grid(&self) -> Result<Grid, NiftiError> {
        Ok(Grid::new(self.header.dims(), self.header.spacing())?)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, NiftiError> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        MultiGzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Parses an in-memory `.nii` byte stream.
pub fn parse_nifti(bytes: &[u8]) -> Result<NiftiImage, NiftiError> {
    let header = NiftiHeader::parse(bytes)?;
    let offset = header.vox_offset as usize;
    let n = header.voxel_count();
    let size = header.datatype.byte_size();
    let end = offset + n * size;
    if bytes.len() < end {
        return Err(format_err(
            "vox_offset",
            format!("voxel data truncated: need {end} bytes, file has {}", bytes.len()),
        ));
    }
    let raw = &bytes[offset..end];
    let le = header.little_endian;
    macro_rules! decode {
        ($t:ty) => {
            raw.chunks_exact(size)
                .map(|c| {
                    let arr = c.try_into().unwrap();
                    (if le { <$t>::from_le_bytes(arr) } else { <$t>::from_be_bytes(arr) }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let mut values = match header.datatype {
        Datatype::Uint8 => raw.iter().map(|&b| b as f64).collect(),
        Datatype::Int16 => decode!(i16),
        Datatype::Uint16 => decode!(u16),
        Datatype::Float32 => decode!(f32),
        Datatype::Float64 => decode!(f64),
    };
    let slope = header.scl_slope as f64;
    let inter = header.scl_inter as f64;
    if slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0) {
        for v in &mut values {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { header, values })
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<NiftiImage, NiftiError> {
    parse_nifti(&read_all(path.as_ref())?)
}

/// Reads a scalar volume (values converted to f32).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3D, NiftiError> {
    let img = read_nifti(path)?;
    let grid = img.grid()?;
    Ok(Volume3D::new(grid, img.values.iter().map(|&v| v as f32).collect())?)
}

/// Reads a segmentation and validates the {0, 1, 2, 4} label set.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelVolume, NiftiError> {
    let img = read_nifti(path)?;
    let grid = img.grid()?;
    Ok(LabelVolume::from_values(grid, &img.values)?)
}

/// Encodes an image as `.nii` bytes (header, 4 empty extension bytes, voxels).
pub fn encode_nifti(header: &NiftiHeader, voxels: &[u8]) -> Vec<u8> {
    let offset = header.vox_offset as usize;
    let mut out = Vec::with_capacity(offset + voxels.len());
    out.extend_from_slice(&header.to_bytes());
    out.resize(offset, 0);
    out.extend_from_slice(voxels);
    out
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), NiftiError> {
    let file = File::create(path)?;
    let gz = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?.flush()?;
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes)?;
        w.flush()?;
    }
    Ok(())
}

/// Writes a float32 image; gzip-compressed when the path ends in `.gz`.
pub fn write_volume(vol: &Volume3D, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    check_dims_fit(vol.grid())?;
    let header = NiftiHeader::for_grid(vol.grid(), Datatype::Float32);
    let voxels: Vec<u8> = vol.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path.as_ref(), &encode_nifti(&header, &voxels))
}

/// Writes a uint8 label map; gzip-compressed when the path ends in `.gz`.
pub fn write_labels(labels: &LabelVolume, path: impl AsRef<Path>) -> Result<(), NiftiError> {
    check_dims_fit(labels.grid())?;
    let header = NiftiHeader::for_grid(labels.grid(), Datatype::Uint8);
    write_bytes(path.as_ref(), &encode_nifti(&header, labels.data()))
}

fn check_dims_fit(grid: Grid) -> Result<(), NiftiError> {
    if grid.dims.iter().any(|&d| d > i16::MAX as usize) {
        return Err(format_err("dim", format!("{:?} exceeds the int16 range", grid.dims)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Builds a header byte-by-byte from the published field offsets, independent
    /// of `NiftiHeader::to_bytes`.
    fn handmade(dims: [i16; 3], datatype: i16, bitpix: i16, payload: &[u8], big_endian: bool) -> Vec<u8> {
        let mut h = vec![0u8; 352];
        let put16 = |h: &mut Vec<u8>, off: usize, v: i16| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 2].copy_from_slice(&b);
        };
        let put32f = |h: &mut Vec<u8>, off: usize, v: f32| {
            let b = if big_endian { v.to_be_bytes() } else { v.to_le_bytes() };
            h[off..off + 4].copy_from_slice(&b);
        };
        let sz = if big_endian { 348i32.to_be_bytes() } else { 348i32.to_le_bytes() };
        h[0..4].copy_from_slice(&sz);
        put16(&mut h, 40, 3);
        put16(&mut h, 42, dims[0]);
        put16(&mut h, 44, dims[1]);
        put16(&mut h, 46, dims[2]);
        put16(&mut h, 70, datatype);
        put16(&mut h, 72, bitpix);
        put32f(&mut h, 80, 1.0);
        put32f(&mut h, 84, 1.0);
        put32f(&mut h, 88, 1.0);
        put32f(&mut h, 108, 352.0);
        h[344..348].copy_from_slice(b"n+1\0");
        h.extend_from_slice(payload);
        h
    }

    #[test]
    fn reads_handmade_float32() {
        let payload: Vec<u8> = (0..32).flat_map(|i| (i as f32).to_le_bytes()).collect();
        let img = parse_nifti(&handmade([4, 4, 2], 16, 32, &payload, false)).unwrap();
        assert_eq!(img.header.dims(), [4, 4, 2]);
        assert_eq!(img.values, (0..32).map(|i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn reads_big_endian_int16() {
        let payload: Vec<u8> = (0..8i16).flat_map(|i| (i - 3).to_be_bytes()).collect();
        let img = parse_nifti(&handmade([2, 2, 2], 4, 16, &payload, true)).unwrap();
        assert_eq!(img.values, vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn applies_slope_and_intercept() {
        let mut bytes = handmade([2, 1, 1], 2, 8, &[1, 3], false);
        bytes[112..116].copy_from_slice(&2.0f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert_eq!(parse_nifti(&bytes).unwrap().values, vec![1.0, 5.0]);
    }

    #[test]
    fn rejects_bad_magic_and_types() {
        let mut bytes = handmade([1, 1, 1], 2, 8, &[0], false);
        bytes[344] = b'x';
        match parse_nifti(&bytes) {
            Err(NiftiError::Format { field, .. }) => assert_eq!(field, "magic"),
            other => panic!("unexpected {other:?}"),
        }
        let bytes = handmade([1, 1, 1], 8, 32, &[0; 4], false);
        assert!(matches!(parse_nifti(&bytes), Err(NiftiError::UnsupportedDatatype(8))));
        let bytes = handmade([1, 1, 1], 2, 16, &[0], false);
        assert!(matches!(parse_nifti(&bytes), Err(NiftiError::Format { field: "bitpix", .. })));
        let bytes = handmade([4, 4, 4], 2, 8, &[0; 10], false);
        assert!(matches!(parse_nifti(&bytes), Err(NiftiError::Format { field: "vox_offset", .. })));
        assert!(matches!(parse_nifti(&[0u8; 100]), Err(NiftiError::Format { field: "sizeof_hdr", .. })));
    }

    #[test]
    fn rejects_4d() {
        let mut bytes = handmade([2, 2, 2], 2, 8, &[0; 16], false);
        bytes[40..42].copy_from_slice(&4i16.to_le_bytes());
        bytes[48..50].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(parse_nifti(&bytes), Err(NiftiError::Format { field: "dim", .. })));
    }

    #[test]
    fn header_roundtrip() {
        let grid = Grid::new([3, 4, 5], [0.5, 1.0, 2.0]).unwrap();
        let h = NiftiHeader::for_grid(grid, Datatype::Float32);
        let parsed = NiftiHeader::parse(&encode_nifti(&h, &[0u8; 240])).unwrap();
        assert_eq!(parsed, h);
    }
}
