//! File formats: NIfTI-1 input, raw volumes, slice images, CSV tables,
//! scan manifests and model containers.

mod manifest;
mod model;
mod nifti;
mod pgm;
mod raw;
mod tables;

use std::io::Write;
use std::path::Path;

pub use manifest::{load_series, parse_manifest, read_labels, read_volume, ManifestEntry};
pub use model::{decode_model, encode_model, load_model, save_model, MODEL_MAGIC};
pub use nifti::{read_nifti, read_nifti_labels, read_nifti_volume, NiftiDatatype, NiftiImage};
pub use pgm::{encode_slice, write_slice_image, window_pixel};
pub use raw::{read_raw, write_raw, RawData, RawDtype, RawVolume, RAW_MAGIC};
pub use tables::{write_fit_report_csv, write_metrics_csv, FIT_REPORT_HEADER, METRICS_HEADER};

use crate::error::{Error, Result};

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
