//! `NDVOL1` raw volumes: a fixed little-endian header followed by the voxels.
//!
//! Layout: magic (6 bytes), dims (3 x u32), spacing (3 x f32), dtype tag
//! (u32: 1 = f32, 2 = f64, 3 = i32), payload length in bytes (u64), payload.

use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::error::{Error, Result};
use crate::volume::{normalize_intensities, LabelGrid, Volume3D};

pub const RAW_MAGIC: &[u8; 6] = b"NDVOL1";
const HEADER_LEN: usize = 6 + 12 + 12 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawDtype {
    F32,
    F64,
    I32,
}

impl RawDtype {
    fn tag(self) -> u32 {
        match self {
            Self::F32 => 1,
            Self::F64 => 2,
            Self::I32 => 3,
        }
    }

    fn size(self) -> usize {
        match self {
            Self::F64 => 8,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RawData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl RawData {
    pub fn dtype(&self) -> RawDtype {
        match self {
            Self::F32(_) => RawDtype::F32,
            Self::F64(_) => RawDtype::F64,
            Self::I32(_) => RawDtype::I32,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::F32(v) => v.len(),
            Self::F64(v) => v.len(),
            Self::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Self::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Self::F64(v) => v.clone(),
            Self::I32(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawVolume {
    pub dims: [u32; 3],
    pub spacing: [f32; 3],
    pub data: RawData,
}

impl RawVolume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: RawData) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "raw volume of {dims:?} needs {} values, got {}",
                dims.iter().product::<usize>(),
                data.len()
            )));
        }
        let mut d = [0u32; 3];
        for (o, &n) in d.iter_mut().zip(&dims) {
            *o = u32::try_from(n).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        }
        Ok(Self {
            dims: d,
            spacing: spacing.map(|s| s as f32),
            data,
        })
    }

    pub fn from_volume(vol: &Volume3D) -> Self {
        Self::new(vol.dims(), vol.spacing(), RawData::F64(vol.data().to_vec())).expect("consistent volume")
    }

    pub fn from_labels(labels: &LabelGrid) -> Self {
        Self::new(labels.dims(), [1.0; 3], RawData::I32(labels.data().to_vec())).expect("consistent grid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims.map(|d| d as usize)
    }

    /// Min-max normalized intensities.
    pub fn to_volume(&self) -> Result<Volume3D> {
        normalize_intensities(self.dims(), self.spacing.map(|s| s as f64), &self.data.to_f64())
    }

    pub fn to_labels(&self) -> Result<LabelGrid> {
        match &self.data {
            RawData::I32(v) => LabelGrid::new(self.dims(), v.clone()),
            _ => Err(Error::invalid("label volumes must be stored as i32")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let dtype = self.data.dtype();
        let payload = self.data.len() * dtype.size();
        let mut out = vec![0u8; HEADER_LEN + payload];
        out[..6].copy_from_slice(RAW_MAGIC);
        for a in 0..3 {
            LittleEndian::write_u32(&mut out[6 + 4 * a..], self.dims[a]);
            LittleEndian::write_f32(&mut out[18 + 4 * a..], self.spacing[a]);
        }
        LittleEndian::write_u32(&mut out[30..], dtype.tag());
        LittleEndian::write_u64(&mut out[34..], payload as u64);
        let body = &mut out[HEADER_LEN..];
        match &self.data {
            RawData::F32(v) => LittleEndian::write_f32_into(v, body),
            RawData::F64(v) => LittleEndian::write_f64_into(v, body),
            RawData::I32(v) => LittleEndian::write_i32_into(v, body),
        }
        out
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 || &bytes[..6] != RAW_MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "NDVOL1",
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut dims = [0u32; 3];
        let mut spacing = [0f32; 3];
        for a in 0..3 {
            dims[a] = LittleEndian::read_u32(&bytes[6 + 4 * a..]);
            spacing[a] = LittleEndian::read_f32(&bytes[18 + 4 * a..]);
        }
        let dtype = match LittleEndian::read_u32(&bytes[30..]) {
            1 => RawDtype::F32,
            2 => RawDtype::F64,
            3 => RawDtype::I32,
            t => return Err(fmt(format!("unknown dtype tag {t}"))),
        };
        let declared = LittleEndian::read_u64(&bytes[34..]);
        let expected = dims
            .iter()
            .try_fold(dtype.size() as u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| fmt("dims overflow".into()))?;
        if declared != expected {
            return Err(fmt(format!(
                "payload length {declared} does not match dims {dims:?} ({expected} bytes)"
            )));
        }
        let body = &bytes[HEADER_LEN..];
        if body.len() as u64 != expected {
            return Err(Error::Truncated {
                path: path.to_path_buf(),
                expected: HEADER_LEN + expected as usize,
                found: bytes.len(),
            });
        }
        let n = body.len() / dtype.size();
        let data = match dtype {
            RawDtype::F32 => {
                let mut v = vec![0f32; n];
                LittleEndian::read_f32_into(body, &mut v);
                RawData::F32(v)
            }
            RawDtype::F64 => {
                let mut v = vec![0f64; n];
                LittleEndian::read_f64_into(body, &mut v);
                RawData::F64(v)
            }
            RawDtype::I32 => {
                let mut v = vec![0i32; n];
                LittleEndian::read_i32_into(body, &mut v);
                RawData::I32(v)
            }
        };
        Ok(Self { dims, spacing, data })
    }
}

pub fn write_raw(path: &Path, vol: &RawVolume) -> Result<()> {
    super::write_atomic(path, &vol.encode())
}

pub fn read_raw(path: &Path) -> Result<RawVolume> {
    RawVolume::decode(path, &super::read_file(path)?)
}
