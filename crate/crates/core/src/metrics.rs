//! Morphometry outputs: |J| maps, residuals, Dice and sign consistency.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DerivRequest, DisplacementModel};
use crate::trainer::FieldGrid;
use crate::volume::{grid_coords, ravel, LabelGrid, Volume3D};

/// Default threshold below which `d|J|/dt` counts as zero.
pub const DEAD_BAND: f64 = 1e-6;

/// `|J|` over a voxel grid at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMap {
    pub months: f64,
    pub dims: [usize; 3],
    pub values: Vec<f64>,
    /// Voxels with `|J| <= 0`.
    pub folded_count: usize,
}

impl JacobianMap {
    pub fn new(dims: [usize; 3], months: f64, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.iter().product::<usize>() {
            return Err(Error::invalid("jacobian map length does not match dims"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort(format!("non-finite |J| at voxel {i}")));
        }
        let folded_count = values.iter().filter(|&&v| v <= 0.0).count();
        Ok(Self {
            months,
            dims,
            values,
            folded_count,
        })
    }

    pub fn from_field(field: &FieldGrid) -> Result<Self> {
        Self::new(field.dims, field.months, field.jac_det.clone())
    }

    /// As a volume for slice rendering; values are not clamped.
    pub fn mean_over(&self, members: &[usize]) -> f64 {
        members.iter().map(|&i| self.values[i]).sum::<f64>() / members.len().max(1) as f64
    }
}

/// `2|A & B| / (|A| + |B|)`; 1 when the label is absent from both.
pub fn dice(a: &LabelGrid, b: &LabelGrid, label: i32) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(a.dims(), b.dims()));
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (ia, ib) = (x == label, y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Nearest-neighbour resampling of `labels` at `phi` of every voxel.
pub fn warp_labels(labels: &LabelGrid, field: &FieldGrid) -> Result<LabelGrid> {
    if labels.dims() != field.dims {
        return Err(Error::DimMismatch(labels.dims(), field.dims));
    }
    let dims = labels.dims();
    let data = field
        .phi
        .iter()
        .map(|&p| labels.get(Volume3D::nearest_voxel(dims, p)))
        .collect();
    LabelGrid::new(dims, data)
}

/// Voxel-wise `a - b`.
pub fn residual_jacobian(a: &JacobianMap, b: &JacobianMap) -> Result<Vec<f64>> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch(a.dims, b.dims));
    }
    if a.months != b.months {
        return Err(Error::invalid(format!(
            "residual between maps at different times ({} vs {} months)",
            a.months, b.months
        )));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect())
}

fn member_coords(labels: &LabelGrid, label: i32) -> Result<Vec<[f64; 3]>> {
    let dims = labels.dims();
    let all = grid_coords(dims);
    let members = labels.members(label);
    if members.is_empty() {
        return Err(Error::invalid(format!("label {label} has no voxels")));
    }
    Ok(members.into_iter().map(|i| all[i]).collect())
}

/// `d|J|/dt` (per month) at each member voxel of `label`, one row per time.
fn djac_samples(model: &dyn DisplacementModel, coords: &[[f64; 3]], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    times
        .iter()
        .map(|&t| {
            let r = model.query(coords, t, DerivRequest::ALL)?;
            Ok(r.jac_det_dt.expect("requested"))
        })
        .collect()
}

/// Whether samples never take both signs outside the dead band.
pub fn consistent_sign(samples: impl IntoIterator<Item = f64>, dead_band: f64) -> bool {
    let (mut pos, mut neg) = (false, false);
    for d in samples {
        pos |= d > dead_band;
        neg |= d < -dead_band;
    }
    !(pos && neg)
}

/// Fraction of member voxels of `label` whose `d|J|/dt` keeps one sign
/// across `times` (months). Samples within `dead_band` of zero are neutral.
pub fn sign_consistency(
    model: &dyn DisplacementModel,
    labels: &LabelGrid,
    label: i32,
    times: &[f64],
    dead_band: f64,
) -> Result<f64> {
    if times.len() < 2 {
        return Err(Error::invalid("sign consistency needs at least 2 times"));
    }
    let coords = member_coords(labels, label)?;
    let samples = djac_samples(model, &coords, times)?;
    Ok(fraction_consistent(&samples, dead_band))
}

fn fraction_consistent(samples: &[Vec<f64>], dead_band: f64) -> f64 {
    let n = samples[0].len();
    let good = (0..n)
        .filter(|&v| consistent_sign(samples.iter().map(|row| row[v]), dead_band))
        .count();
    good as f64 / n as f64
}

/// Trajectories of one structure over a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureMetrics {
    pub label: i32,
    /// Months.
    pub times: Vec<f64>,
    pub mean_jac: Vec<f64>,
    /// Per month.
    pub mean_djac_dt: Vec<f64>,
    pub sign_consistency: f64,
    /// Dice after registration, where a follow-up label grid was available.
    pub dice: Vec<Option<f64>>,
}

/// Mean `|J|` and `d|J|/dt` per structure at each time (months), plus the
/// sign-consistency fraction over the grid.
pub fn structure_trajectories(
    model: &dyn DisplacementModel,
    labels: &LabelGrid,
    label_ids: &[i32],
    times: &[f64],
    dead_band: f64,
) -> Result<Vec<StructureMetrics>> {
    if times.len() < 2 {
        return Err(Error::invalid("trajectories need at least 2 times"));
    }
    label_ids
        .par_iter()
        .map(|&label| {
            let coords = member_coords(labels, label)?;
            let mut mean_jac = Vec::with_capacity(times.len());
            let mut mean_djac_dt = Vec::with_capacity(times.len());
            let mut samples = Vec::with_capacity(times.len());
            for &t in times {
                let r = model.query(&coords, t, DerivRequest::ALL)?;
                let j = r.jac_det.expect("requested");
                let d = r.jac_det_dt.expect("requested");
                mean_jac.push(j.iter().sum::<f64>() / j.len() as f64);
                mean_djac_dt.push(d.iter().sum::<f64>() / d.len() as f64);
                samples.push(d);
            }
            Ok(StructureMetrics {
                label,
                times: times.to_vec(),
                mean_jac,
                mean_djac_dt,
                sign_consistency: fraction_consistent(&samples, dead_band),
                dice: vec![None; times.len()],
            })
        })
        .collect()
}

/// Dice between baseline labels and follow-up labels warped into the
/// baseline frame by the field at `months`.
pub fn registration_dice(
    model: &dyn DisplacementModel,
    baseline: &LabelGrid,
    followup: &LabelGrid,
    months: f64,
    label: i32,
) -> Result<f64> {
    if baseline.dims() != followup.dims() {
        return Err(Error::DimMismatch(baseline.dims(), followup.dims()));
    }
    let dims = baseline.dims();
    let coords = grid_coords(dims);
    let r = model.query(&coords, months, DerivRequest::default())?;
    let data = r
        .phi
        .iter()
        .map(|&p| followup.data()[ravel(Volume3D::nearest_voxel(dims, p), dims)])
        .collect();
    dice(baseline, &LabelGrid::new(dims, data)?, label)
}

/// One output row per (time, label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub time: f64,
    pub label: i32,
    pub mean_jac: f64,
    pub mean_djac_dt: f64,
    pub dice: Option<f64>,
    pub sign_consistency: f64,
}

pub fn metrics_rows(structures: &[StructureMetrics]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for s in structures {
        for (k, &t) in s.times.iter().enumerate() {
            rows.push(MetricsRow {
                time: t,
                label: s.label,
                mean_jac: s.mean_jac[k],
                mean_djac_dt: s.mean_djac_dt[k],
                dice: s.dice[k],
                sign_consistency: s.sign_consistency,
            });
        }
    }
    rows.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.label.cmp(&b.label)));
    rows
}
