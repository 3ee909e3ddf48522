//! Single-file NIfTI-1 reader (`.nii`, `.nii.gz`), 3D only.

use std::io::Read;
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::volume::{normalize_intensities, LabelGrid, Volume3D};

const HEADER_LEN: usize = 348;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NiftiDatatype {
    U8,
    I16,
    I32,
    F32,
    F64,
}

impl NiftiDatatype {
    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => Self::U8,
            4 => Self::I16,
            8 => Self::I32,
            16 => Self::F32,
            64 => Self::F64,
            _ => return None,
        })
    }

    pub fn code(self) -> i16 {
        match self {
            Self::U8 => 2,
            Self::I16 => 4,
            Self::I32 => 8,
            Self::F32 => 16,
            Self::F64 => 64,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 => 1,
            Self::I16 => 2,
            Self::I32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, Self::U8 | Self::I16 | Self::I32)
    }
}

/// A parsed image. `data` holds scaled intensities in fastest-x order.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub pixdim: [f64; 3],
    pub datatype: NiftiDatatype,
    pub scl_slope: f64,
    pub scl_inter: f64,
    /// Recorded only; no reorientation is performed.
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f64; 6],
    pub srow: [[f64; 4]; 3],
    pub data: Vec<f64>,
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn decompress(path: &Path, bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = decompress(path, super::read_file(path)?)?;
    parse(path, &bytes)
}

fn parse(path: &Path, bytes: &[u8]) -> Result<NiftiImage> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_LEN as i32 {
        parse_with::<LittleEndian>(path, bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_LEN as i32 {
        parse_with::<BigEndian>(path, bytes)
    } else {
        Err(format_err(path, "sizeof_hdr is not 348"))
    }
}

fn parse_with<B: ByteOrder>(path: &Path, h: &[u8]) -> Result<NiftiImage> {
    if &h[344..348] != b"n+1\0" {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "single-file NIfTI-1",
        });
    }
    let f32_at = |off: usize| B::read_f32(&h[off..off + 4]) as f64;
    let i16_at = |off: usize| B::read_i16(&h[off..off + 2]);

    let ndim = i16_at(40);
    if ndim > 3 {
        return Err(Error::NotThreeDimensional {
            path: path.to_path_buf(),
            dims: ndim,
        });
    }
    if ndim < 3 {
        return Err(format_err(path, format!("dim[0] = {ndim}, expected 3")));
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let n = i16_at(42 + 2 * a);
        if n < 1 {
            return Err(format_err(path, format!("dim[{}] = {n}", a + 1)));
        }
        *d = n as usize;
    }
    let code = i16_at(70);
    let datatype = NiftiDatatype::from_code(code).ok_or(Error::UnsupportedDatatype {
        path: path.to_path_buf(),
        code,
    })?;
    let pixdim = [f32_at(80), f32_at(84), f32_at(88)];
    let vox_offset = f32_at(108);
    if !(vox_offset >= HEADER_LEN as f64) || vox_offset.fract() != 0.0 {
        return Err(format_err(path, format!("bad vox_offset {vox_offset}")));
    }
    let scl_slope = f32_at(112);
    let scl_inter = f32_at(116);
    let mut quatern = [0.0; 6];
    for (q, v) in quatern.iter_mut().enumerate() {
        *v = f32_at(256 + 4 * q);
    }
    let mut srow = [[0.0; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = f32_at(280 + 16 * r + 4 * c);
        }
    }

    let n = dims.iter().product::<usize>();
    let start = vox_offset as usize;
    let need = start + n * datatype.size();
    if h.len() < need {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: need,
            found: h.len(),
        });
    }
    let payload = &h[start..need];
    let mut data: Vec<f64> = match datatype {
        NiftiDatatype::U8 => payload.iter().map(|&b| b as f64).collect(),
        NiftiDatatype::I16 => payload.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        NiftiDatatype::I32 => payload.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        NiftiDatatype::F32 => payload.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        NiftiDatatype::F64 => payload.chunks_exact(8).map(B::read_f64).collect(),
    };
    if scl_slope != 0.0 && scl_slope.is_finite() && scl_inter.is_finite() {
        for v in &mut data {
            *v = *v * scl_slope + scl_inter;
        }
    }
    Ok(NiftiImage {
        dims,
        pixdim,
        datatype,
        scl_slope,
        scl_inter,
        qform_code: i16_at(252),
        sform_code: i16_at(254),
        quatern,
        srow,
        data,
    })
}

/// Reads an intensity image and min-max normalizes it.
pub fn read_nifti_volume(path: &Path) -> Result<Volume3D> {
    let img = read_nifti(path)?;
    normalize_intensities(img.dims, img.pixdim, &img.data)
}

/// Reads an integer label image.
pub fn read_nifti_labels(path: &Path) -> Result<LabelGrid> {
    let img = read_nifti(path)?;
    let p = PathBuf::from(path);
    if !img.datatype.is_integer() && img.data.iter().any(|v| v.fract() != 0.0) {
        return Err(format_err(&p, "label image has non-integer values"));
    }
    let data = img
        .data
        .iter()
        .map(|&v| {
            if v.fract() != 0.0 || v < i32::MIN as f64 || v > i32::MAX as f64 {
                Err(format_err(&p, format!("label value {v} is not a 32-bit integer")))
            } else {
                Ok(v as i32)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LabelGrid::new(img.dims, data)
}
