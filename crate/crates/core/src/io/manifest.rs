//! Scan manifests: one `<months> <path> [<labels_path>]` line per scan,
//! baseline first. Blank lines and `#` comments are skipped; relative paths
//! resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{LabelGrid, Scan, Volume3D, Volume4DSeries};

use super::{nifti, raw};

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub months: f64,
    pub path: PathBuf,
    pub labels: Option<PathBuf>,
}

pub fn parse_manifest(path: &Path, text: &str) -> Result<Vec<ManifestEntry>> {
    let base = path.parent().unwrap_or(Path::new(""));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg: format!("line {}: {msg}", n + 1),
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(fmt(format!("expected `<months> <path> [<labels>]`, got {} fields", fields.len())));
        }
        let months: f64 = fields[0]
            .parse()
            .map_err(|_| fmt(format!("bad time `{}`", fields[0])))?;
        if !months.is_finite() || months < 0.0 {
            return Err(fmt(format!("time {months} must be finite and non-negative")));
        }
        out.push(ManifestEntry {
            months,
            path: resolve(fields[1]),
            labels: fields.get(2).map(|p| resolve(p)),
        });
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "manifest lists no scans".into(),
        });
    }
    Ok(out)
}

fn is_raw(path: &Path) -> bool {
    matches!(path.extension().and_then(|e| e.to_str()), Some("raw" | "ndvol"))
}

/// Reads an intensity volume as NDVOL1 (`.raw`, `.ndvol`) or NIfTI-1.
pub fn read_volume(path: &Path) -> Result<Volume3D> {
    if is_raw(path) {
        raw::read_raw(path)?.to_volume()
    } else {
        nifti::read_nifti_volume(path)
    }
}

pub fn read_labels(path: &Path) -> Result<LabelGrid> {
    if is_raw(path) {
        raw::read_raw(path)?.to_labels()
    } else {
        nifti::read_nifti_labels(path)
    }
}

pub fn load_series(manifest: &Path) -> Result<Volume4DSeries> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let scans = parse_manifest(manifest, &text)?
        .into_iter()
        .map(|e| {
            Ok(Scan {
                months: e.months,
                volume: read_volume(&e.path)?,
                labels: e.labels.as_deref().map(read_labels).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Volume4DSeries::new(scans)
}
