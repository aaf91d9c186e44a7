//! Read-only NIfTI-1 subset: single-file (`n+1`) volumes of uint8, int16,
//! int32 or float32, without orientation handling.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridShape, Volume};

pub const NIFTI_HEADER_LEN: usize = 348;
pub const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;

/// The header fields this reader uses.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub little_endian: bool,
    /// `[nx, ny, nz]`.
    pub dims: [usize; 3],
    pub datatype: i16,
    pub pixdim: [f64; 3],
    pub vox_offset: usize,
    pub scl_slope: f64,
    pub scl_inter: f64,
}

impl NiftiHeader {
    fn element_size(&self) -> usize {
        match self.datatype {
            DT_UINT8 => 1,
            DT_INT16 => 2,
            _ => 4,
        }
    }

    pub fn shape(&self) -> Result<GridShape> {
        let [nx, ny, nz] = self.dims;
        GridShape::with_spacing(ny, nx, nz, [self.pixdim[1], self.pixdim[0], self.pixdim[2]])
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    le: bool,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, at: usize) -> [u8; N] {
        self.bytes[at..at + N].try_into().unwrap()
    }

    fn i16(&self, at: usize) -> i16 {
        let b = self.arr(at);
        if self.le {
            i16::from_le_bytes(b)
        } else {
            i16::from_be_bytes(b)
        }
    }

    fn i32(&self, at: usize) -> i32 {
        let b = self.arr(at);
        if self.le {
            i32::from_le_bytes(b)
        } else {
            i32::from_be_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = self.arr(at);
        if self.le {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidHeader {
        field,
        reason: reason.into(),
    }
}

pub fn parse_nifti_header(bytes: &[u8]) -> Result<NiftiHeader> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(invalid(
            "sizeof_hdr",
            format!("file has {} bytes, header needs {NIFTI_HEADER_LEN}", bytes.len()),
        ));
    }
    let sizeof_le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let sizeof_be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let le = match (sizeof_le, sizeof_be) {
        (348, _) => true,
        (_, 348) => false,
        _ => return Err(invalid("sizeof_hdr", format!("expected 348, found {sizeof_le}"))),
    };
    let r = Reader { bytes, le };

    let magic = &bytes[344..348];
    if magic != NIFTI_MAGIC {
        return Err(Error::BadMagic {
            expected: String::from_utf8_lossy(NIFTI_MAGIC).into_owned(),
            found: String::from_utf8_lossy(magic).into_owned(),
        });
    }

    let ndim = r.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(invalid("dim", format!("dim[0] = {ndim} is out of range")));
    }
    let dim = |i: usize| if i <= ndim as usize { r.i16(40 + 2 * i) } else { 1 };
    if let Some(i) = (4..=7).find(|&i| dim(i) > 1) {
        return Err(invalid("dim", format!("only 3D volumes are supported, dim[{i}] = {}", dim(i))));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = dim(a + 1);
        if v < 1 {
            return Err(invalid("dim", format!("dim[{}] = {v} must be positive", a + 1)));
        }
        *d = v as usize;
    }

    let datatype = r.i16(70);
    if !matches!(datatype, DT_UINT8 | DT_INT16 | DT_INT32 | DT_FLOAT32) {
        return Err(Error::UnsupportedDtype(format!("NIfTI datatype code {datatype}")));
    }

    let mut pixdim = [1.0; 3];
    for (a, p) in pixdim.iter_mut().enumerate() {
        let v = r.f32(76 + 4 * (a + 1)) as f64;
        // Some writers leave pixdim zeroed; unit spacing is the usual reading.
        *p = if v == 0.0 { 1.0 } else { v.abs() };
        if !p.is_finite() {
            return Err(invalid("pixdim", format!("pixdim[{}] = {v}", a + 1)));
        }
    }

    let vox = r.f32(108);
    if !(vox.is_finite() && vox >= NIFTI_HEADER_LEN as f32 && vox.fract() == 0.0) {
        return Err(invalid("vox_offset", format!("{vox} is not a valid data offset")));
    }

    let slope = r.f32(112) as f64;
    let inter = r.f32(116) as f64;
    if !slope.is_finite() || !inter.is_finite() {
        return Err(invalid("scl_slope", format!("non-finite scaling {slope}, {inter}")));
    }
    // The bitpix field duplicates the datatype; a disagreement means a broken writer.
    let bitpix = r.i16(72);
    let h = NiftiHeader {
        little_endian: le,
        dims,
        datatype,
        pixdim,
        vox_offset: vox as usize,
        scl_slope: slope,
        scl_inter: inter,
    };
    if bitpix as usize != 8 * h.element_size() {
        return Err(invalid("bitpix", format!("{bitpix} does not match datatype {datatype}")));
    }
    Ok(h)
}

/// Decodes a whole `.nii` file. A zero `scl_slope` means no scaling.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    let h = parse_nifti_header(bytes)?;
    let shape = h.shape()?;
    let n = shape.len();
    let expected = n * h.element_size();
    let found = bytes.len().saturating_sub(h.vox_offset);
    if found != expected {
        return Err(Error::PayloadLengthMismatch { expected, found });
    }
    let r = Reader { bytes, le: h.little_endian };
    let at = |i: usize| h.vox_offset + i * h.element_size();
    let (slope, inter) = if h.scl_slope == 0.0 {
        (1.0, 0.0)
    } else {
        (h.scl_slope, h.scl_inter)
    };
    let data = (0..n)
        .map(|i| {
            let raw = match h.datatype {
                DT_UINT8 => bytes[at(i)] as f64,
                DT_INT16 => r.i16(at(i)) as f64,
                DT_INT32 => r.i32(at(i)) as f64,
                _ => r.f32(at(i)) as f64,
            };
            raw * slope + inter
        })
        .collect();
    Volume::new(shape, data)
}

pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(&bytes)
}

/// Builds a minimal single-file NIfTI-1 image. Used to produce test fixtures.
pub fn encode_nifti_f32(dims: [usize; 3], values: &[f32], little_endian: bool) -> Vec<u8> {
    let mut b = vec![0u8; 352];
    let put16 = |b: &mut [u8], at: usize, v: i16| {
        let bytes = if little_endian { v.to_le_bytes() } else { v.to_be_bytes() };
        b[at..at + 2].copy_from_slice(&bytes);
    };
    let put32 = |b: &mut [u8], at: usize, v: [u8; 4]| b[at..at + 4].copy_from_slice(&v);
    let enc_i32 = |v: i32| if little_endian { v.to_le_bytes() } else { v.to_be_bytes() };
    let enc_f32 = |v: f32| if little_endian { v.to_le_bytes() } else { v.to_be_bytes() };
    put32(&mut b, 0, enc_i32(348));
    put16(&mut b, 40, 3);
    for (a, &d) in dims.iter().enumerate() {
        put16(&mut b, 42 + 2 * a, d as i16);
    }
    put16(&mut b, 70, DT_FLOAT32);
    put16(&mut b, 72, 32);
    for a in 0..4 {
        put32(&mut b, 76 + 4 * a, enc_f32(1.0));
    }
    put32(&mut b, 108, enc_f32(352.0));
    b[344..348].copy_from_slice(NIFTI_MAGIC);
    for &v in values {
        b.extend_from_slice(&enc_f32(v));
    }
    b
}
