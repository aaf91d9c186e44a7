use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FieldKind, GridShape, LabelMap, VectorField, Volume};

pub const VRAW_MAGIC: &str = "vraw1";
pub const VRAW_LAYOUT: &str = "x-fastest";

/// Element type of a vraw payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    I32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::I32 => 4,
            Dtype::U8 => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I32 => "i32",
            Dtype::U8 => "u8",
        }
    }
}

/// The JSON header line of a vraw file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VrawHeader {
    pub magic: String,
    /// `[h, w, d]`.
    pub dims: [usize; 3],
    pub channels: usize,
    pub dtype: Dtype,
    pub layout: String,
    pub spacing: [f64; 3],
}

impl VrawHeader {
    pub fn new(shape: &GridShape, channels: usize, dtype: Dtype) -> Self {
        Self {
            magic: VRAW_MAGIC.into(),
            dims: [shape.h, shape.w, shape.d],
            channels,
            dtype,
            layout: VRAW_LAYOUT.into(),
            spacing: shape.spacing,
        }
    }

    pub fn shape(&self) -> Result<GridShape> {
        let [h, w, d] = self.dims;
        GridShape::with_spacing(h, w, d, self.spacing).map_err(|e| Error::InvalidHeader {
            field: "dims",
            reason: e.to_string(),
        })
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().product::<usize>() * self.channels * self.dtype.size()
    }
}

/// Header plus decoded values, channel-planar and x-fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct VrawFile {
    pub header: VrawHeader,
    pub values: Vec<f64>,
}

/// Parses vraw bytes.
pub fn decode_vraw(bytes: &[u8]) -> Result<VrawFile> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::InvalidHeader {
        field: "header",
        reason: "no newline-terminated header line".into(),
    })?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::InvalidHeader {
        field: "header",
        reason: e.to_string(),
    })?;
    // The magic is checked before the full schema so that foreign files get
    // the more specific error.
    let raw: serde_json::Value = serde_json::from_str(line)?;
    let magic = raw.get("magic").and_then(|m| m.as_str()).unwrap_or_default();
    if magic != VRAW_MAGIC {
        return Err(Error::BadMagic {
            expected: VRAW_MAGIC.into(),
            found: magic.into(),
        });
    }
    if let Some(dt) = raw.get("dtype").and_then(|d| d.as_str()) {
        if !matches!(dt, "f32" | "i32" | "u8") {
            return Err(Error::UnsupportedDtype(dt.into()));
        }
    }
    let header: VrawHeader = serde_json::from_value(raw)?;
    if header.layout != VRAW_LAYOUT {
        return Err(Error::InvalidHeader {
            field: "layout",
            reason: format!("expected {VRAW_LAYOUT:?}, found {:?}", header.layout),
        });
    }
    if header.channels == 0 {
        return Err(Error::InvalidHeader {
            field: "channels",
            reason: "must be at least 1".into(),
        });
    }
    header.shape()?;

    let payload = &bytes[nl + 1..];
    let expected = header.payload_len();
    if payload.len() != expected {
        return Err(Error::PayloadLengthMismatch {
            expected,
            found: payload.len(),
        });
    }
    let values = match header.dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::I32 => payload
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
    };
    Ok(VrawFile { header, values })
}

/// Serializes values under `header`. Integer dtypes require integral values
/// in range; `f32` rounds to nearest.
pub fn encode_vraw(header: &VrawHeader, values: &[f64]) -> Result<Vec<u8>> {
    let n = header.dims.iter().product::<usize>() * header.channels;
    if values.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "header describes {n} values, got {}",
            values.len()
        )));
    }
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(header.payload_len());
    for &v in values {
        match header.dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::I32 => out.extend_from_slice(&(checked_int(v, i32::MIN as f64, i32::MAX as f64, header.dtype)? as i32).to_le_bytes()),
            Dtype::U8 => out.push(checked_int(v, 0.0, 255.0, header.dtype)? as u8),
        }
    }
    Ok(out)
}

fn checked_int(v: f64, lo: f64, hi: f64, dtype: Dtype) -> Result<f64> {
    if v.fract() == 0.0 && (lo..=hi).contains(&v) {
        Ok(v)
    } else {
        Err(Error::InvalidArgument(format!(
            "value {v} is not representable as {}",
            dtype.name()
        )))
    }
}

pub fn read_vraw(path: impl AsRef<Path>) -> Result<VrawFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_vraw(&bytes)
}

pub fn write_vraw(path: impl AsRef<Path>, header: &VrawHeader, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_vraw(header, values)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

fn expect_channels(file: &VrawFile, channels: usize) -> Result<()> {
    if file.header.channels != channels {
        return Err(Error::InvalidHeader {
            field: "channels",
            reason: format!("expected {channels}, found {}", file.header.channels),
        });
    }
    Ok(())
}

pub(crate) fn volume_from_vraw(file: VrawFile) -> Result<Volume> {
    expect_channels(&file, 1)?;
    Volume::new(file.header.shape()?, file.values)
}

pub(crate) fn labels_from_vraw(file: VrawFile) -> Result<LabelMap> {
    expect_channels(&file, 1)?;
    LabelMap::from_volume(&Volume::new(file.header.shape()?, file.values)?)
}

pub fn write_volume_vraw(vol: &Volume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_vraw(path, &VrawHeader::new(vol.shape(), 1, dtype), vol.data())
}

pub fn write_labels_vraw(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    let values: Vec<f64> = labels.data().iter().map(|&l| l as f64).collect();
    write_vraw(path, &VrawHeader::new(labels.shape(), 1, Dtype::I32), &values)
}

/// Writes a 3-channel field as `f32`.
pub fn write_field(field: &VectorField, path: impl AsRef<Path>) -> Result<()> {
    write_vraw(path, &VrawHeader::new(field.shape(), 3, Dtype::F32), field.data())
}

pub fn read_field(path: impl AsRef<Path>, kind: FieldKind) -> Result<VectorField> {
    let file = read_vraw(path)?;
    expect_channels(&file, 3)?;
    VectorField::new(file.header.shape()?, kind, file.values)
}
