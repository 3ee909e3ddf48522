//! Volume data model, coordinate conventions and the trilinear sampler.
//!
//! Voxel storage is x-fastest: the linear index of `(i, j, k)` is
//! `i + nx * (j + ny * k)`. Normalized coordinates are corner-aligned, so
//! `-1` and `+1` land exactly on the outermost voxel centres of each axis.

use crate::diffengine::Real;
use crate::error::{Error, Result};

/// How normalized coordinates relate to voxel indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoordConvention {
    /// Index 0 maps to -1 and index n-1 maps to +1.
    #[default]
    CornerAligned,
}

/// A scalar intensity grid with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    dims: [usize; 3],
    spacing: [f64; 3],
    data: Vec<f64>,
    convention: CoordConvention,
}

fn check_dims(dims: [usize; 3], len: usize) -> Result<()> {
    if dims.iter().any(|&n| n < 2) {
        return Err(Error::invalid(format!(
            "every axis needs at least 2 voxels, got {dims:?}"
        )));
    }
    let expected = dims[0] * dims[1] * dims[2];
    if expected != len {
        return Err(Error::invalid(format!(
            "grid of {dims:?} needs {expected} values, got {len}"
        )));
    }
    Ok(())
}

fn first_non_finite(dims: [usize; 3], data: &[f64]) -> Result<()> {
    if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
        let [i, j, k] = unravel(idx, dims);
        return Err(Error::NonFiniteVoxel {
            i,
            j,
            k,
            value: data[idx],
        });
    }
    Ok(())
}

/// Linear index of voxel `(i, j, k)`.
#[inline]
pub fn ravel([i, j, k]: [usize; 3], dims: [usize; 3]) -> usize {
    i + dims[0] * (j + dims[1] * k)
}

/// Voxel index of a linear offset.
#[inline]
pub fn unravel(idx: usize, dims: [usize; 3]) -> [usize; 3] {
    let i = idx % dims[0];
    let rest = idx / dims[0];
    [i, rest % dims[1], rest / dims[1]]
}

impl Volume3D {
    /// Wraps an already normalized grid. Values must be finite and in `[0, 1]`.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        check_dims(dims, data.len())?;
        first_non_finite(dims, &data)?;
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "intensity {v} outside [0, 1]; normalize first"
            )));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            convention: CoordConvention::CornerAligned,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn convention(&self) -> CoordConvention {
        self.convention
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, idx: [usize; 3]) -> f64 {
        self.data[ravel(idx, self.dims)]
    }

    /// Trilinear value and its gradient with respect to normalized `(x, y, z)`.
    ///
    /// Coordinates outside `[-1, 1]` clamp to the boundary, where the
    /// gradient along the clamped axis is zero.
    #[inline]
    pub fn sample<T: Real>(&self, p: [T; 3]) -> (T, [T; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [T::zero(); 3];
        let mut scale = [T::zero(); 3];
        let one = T::one();
        let two = one + one;
        for a in 0..3 {
            let last = self.dims[a] - 1;
            let half_extent = T::from_usize(last).unwrap() / two;
            let mut u = (p[a] + one) * half_extent;
            let mut inside = true;
            if !(u >= T::zero()) {
                // also catches NaN
                u = T::zero();
                inside = false;
            } else if u > T::from_usize(last).unwrap() {
                u = T::from_usize(last).unwrap();
                inside = false;
            }
            // voxel centres round-trip through normalized coordinates with a few ulps of error
            let nearest = u.round();
            if (u - nearest).abs() <= T::epsilon() * T::from_usize(4 * last).unwrap() {
                u = nearest;
            }
            let cell = u.floor().to_usize().unwrap_or(0).min(last - 1);
            base[a] = cell;
            frac[a] = u - T::from_usize(cell).unwrap();
            if inside {
                scale[a] = half_extent;
            }
        }
        let [nx, ny, _] = self.dims;
        let o = base[0] + nx * (base[1] + ny * base[2]);
        let sx = 1;
        let sy = nx;
        let sz = nx * ny;
        let c = |off: usize| T::from_f64(self.data[o + off]).unwrap();
        let c000 = c(0);
        let c100 = c(sx);
        let c010 = c(sy);
        let c110 = c(sx + sy);
        let c001 = c(sz);
        let c101 = c(sx + sz);
        let c011 = c(sy + sz);
        let c111 = c(sx + sy + sz);
        let [fx, fy, fz] = frac;
        let gx = one - fx;
        let gy = one - fy;
        let gz = one - fz;

        // interpolate along x first
        let c00 = c000 * gx + c100 * fx;
        let c10 = c010 * gx + c110 * fx;
        let c01 = c001 * gx + c101 * fx;
        let c11 = c011 * gx + c111 * fx;
        let c0 = c00 * gy + c10 * fy;
        let c1 = c01 * gy + c11 * fy;
        let value = c0 * gz + c1 * fz;

        let dx = ((c100 - c000) * gy * gz
            + (c110 - c010) * fy * gz
            + (c101 - c001) * gy * fz
            + (c111 - c011) * fy * fz)
            * scale[0];
        let dy = ((c10 - c00) * gz + (c11 - c01) * fz) * scale[1];
        let dz = (c1 - c0) * scale[2];
        (value, [dx, dy, dz])
    }

    /// Nearest-voxel index of a normalized point, clamped to the grid.
    pub fn nearest_voxel(dims: [usize; 3], p: [f64; 3]) -> [usize; 3] {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let last = (dims[a] - 1) as f64;
            let u = ((p[a] + 1.0) * 0.5 * last).clamp(0.0, last);
            // round half up
            out[a] = (u + 0.5).floor() as usize;
            out[a] = out[a].min(dims[a] - 1);
        }
        out
    }
}

/// Min-max scales a raw grid to `[0, 1]`. Constant grids map to all zeros.
pub fn normalize_intensities(dims: [usize; 3], spacing: [f64; 3], raw: &[f64]) -> Result<Volume3D> {
    if raw.is_empty() {
        return Err(Error::invalid("empty intensity grid"));
    }
    check_dims(dims, raw.len())?;
    first_non_finite(dims, raw)?;
    let (lo, hi) = raw
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    let data = if range > 0.0 {
        raw.iter()
            .map(|&v| {
                if v == hi {
                    1.0
                } else {
                    ((v - lo) / range).clamp(0.0, 1.0)
                }
            })
            .collect()
    } else {
        vec![0.0; raw.len()]
    };
    Volume3D::new(dims, spacing, data)
}

/// Maps a voxel index to corner-aligned normalized coordinates.
pub fn voxel_to_normalized(index: [usize; 3], dims: [usize; 3]) -> Result<[f64; 3]> {
    let mut out = [0.0; 3];
    for a in 0..3 {
        if dims[a] < 2 || index[a] >= dims[a] {
            return Err(Error::invalid(format!(
                "voxel index {index:?} out of range for dims {dims:?}"
            )));
        }
        out[a] = axis_coord(index[a], dims[a]);
    }
    Ok(out)
}

#[inline]
pub(crate) fn axis_coord(i: usize, n: usize) -> f64 {
    let last = (n - 1) as f64;
    if 2 * i + 1 == n {
        0.0
    } else {
        2.0 * i as f64 / last - 1.0
    }
}

/// Normalized coordinates of every voxel centre, x-fastest.
pub fn grid_coords(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                out.push([
                    axis_coord(i, dims[0]),
                    axis_coord(j, dims[1]),
                    axis_coord(k, dims[2]),
                ]);
            }
        }
    }
    out
}

/// A batch of points inside `[-1, 1]^3`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCoords {
    points: Vec<[f64; 3]>,
}

impl NormalizedCoords {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(p) = points
            .iter()
            .find(|p| p.iter().any(|c| !(-1.0..=1.0).contains(c)))
        {
            return Err(Error::invalid(format!("point {p:?} outside [-1, 1]^3")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Trilinear values and normalized-unit gradients at each point.
pub fn sample_trilinear(vol: &Volume3D, coords: &[[f64; 3]]) -> (Vec<f64>, Vec<[f64; 3]>) {
    coords.iter().map(|&p| vol.sample::<f64>(p)).unzip()
}

/// An integer label grid on the same lattice as a [`Volume3D`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    dims: [usize; 3],
    data: Vec<i32>,
}

impl LabelGrid {
    pub fn new(dims: [usize; 3], data: Vec<i32>) -> Result<Self> {
        check_dims(dims, data.len())?;
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn get(&self, idx: [usize; 3]) -> i32 {
        self.data[ravel(idx, self.dims)]
    }

    pub fn count(&self, label: i32) -> usize {
        self.data.iter().filter(|&&l| l == label).count()
    }

    /// Linear indices of every voxel carrying `label`.
    pub fn members(&self, label: i32) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One acquisition of a subject.
#[derive(Debug, Clone)]
pub struct Scan {
    /// Months since baseline.
    pub months: f64,
    pub volume: Volume3D,
    pub labels: Option<LabelGrid>,
}

/// A subject's baseline and follow-up scans on a shared lattice.
#[derive(Debug, Clone)]
pub struct Volume4DSeries {
    scans: Vec<Scan>,
}

impl Volume4DSeries {
    pub fn new(scans: Vec<Scan>) -> Result<Self> {
        let first = scans
            .first()
            .ok_or_else(|| Error::invalid("series has no scans"))?;
        if first.months != 0.0 {
            return Err(Error::invalid(format!(
                "baseline must be at time 0, got {}",
                first.months
            )));
        }
        let dims = first.volume.dims();
        for pair in scans.windows(2) {
            if !(pair[1].months > pair[0].months) {
                return Err(Error::invalid(format!(
                    "scan times must strictly increase ({} then {})",
                    pair[0].months, pair[1].months
                )));
            }
        }
        for s in &scans {
            if !s.months.is_finite() {
                return Err(Error::invalid("non-finite scan time"));
            }
            if s.volume.dims() != dims {
                return Err(Error::DimMismatch(dims, s.volume.dims()));
            }
            if let Some(l) = &s.labels {
                if l.dims() != dims {
                    return Err(Error::DimMismatch(dims, l.dims()));
                }
            }
        }
        Ok(Self { scans })
    }

    pub fn baseline(&self) -> &Scan {
        &self.scans[0]
    }

    pub fn followups(&self) -> &[Scan] {
        &self.scans[1..]
    }

    pub fn scans(&self) -> &[Scan] {
        &self.scans
    }

    pub fn dims(&self) -> [usize; 3] {
        self.scans[0].volume.dims()
    }

    pub fn times(&self) -> Vec<f64> {
        self.scans.iter().map(|s| s.months).collect()
    }

    pub fn last_time(&self) -> f64 {
        self.scans.last().map(|s| s.months).unwrap_or(0.0)
    }

    /// The series with the scan at `months` removed.
    pub fn without(&self, months: f64) -> Result<Self> {
        if months == 0.0 {
            return Err(Error::invalid("cannot hold out the baseline"));
        }
        let scans: Vec<Scan> = self
            .scans
            .iter()
            .filter(|s| s.months != months)
            .cloned()
            .collect();
        if scans.len() == self.scans.len() {
            return Err(Error::invalid(format!("no scan at {months} months")));
        }
        Self::new(scans)
    }
}
