//! Synthetic growing/shrinking sphere series with closed-form deformation.
//!
//! Each sphere deforms by the radial map `R(rho) = rho * q(rho)` with
//! `q = 1 + (s - 1) b(rho)`, where `s(t) = 1 + rate * t` and `b` is 1 in the
//! core (`rho <= radius`), 0 beyond `radius + shell` and a cubic ramp in
//! between. Inside the core `|J| = s^3`.
//!
//! Times inside the map are months divided by the last observed month.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{DerivRequest, DisplacementModel, DisplacementResult};
use crate::volume::{grid_coords, normalize_intensities, LabelGrid, Scan, Volume4DSeries};

/// Noise standard deviations used in the monotonicity experiments.
pub const NOISE_PRESETS: [f64; 3] = [0.15, 0.2, 0.25];

/// Label of the growing sphere.
pub const GROWING_LABEL: i32 = 1;
/// Label of the optional shrinking sphere.
pub const SHRINKING_LABEL: i32 = 2;

/// One radially deforming sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sphere {
    /// Normalized coordinates.
    pub center: [f64; 3],
    /// Core radius at baseline.
    pub radius: f64,
    /// Width of the blend back to identity.
    pub shell: f64,
    /// Scale change per normalized time unit (negative shrinks).
    pub rate: f64,
    /// Peak intensity of the sphere's radial profile.
    pub intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub growing: Sphere,
    pub shrinking: Option<Sphere>,
    /// Months since baseline; the first must be 0.
    pub times: Vec<f64>,
    pub noise_sigma: f64,
    /// Width of the intensity falloff beyond the core radius.
    pub falloff: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32; 3],
            growing: Sphere {
                center: [0.0; 3],
                radius: 0.35,
                shell: 0.3,
                rate: 0.1,
                intensity: 1.0,
            },
            shrinking: None,
            times: vec![0.0, 6.0, 12.0, 18.0],
            noise_sigma: 0.0,
            falloff: 0.2,
            seed: 0,
        }
    }
}

/// Cubic ramp: 1 for `u <= 0`, 0 for `u >= 1`, with zero slope at both ends.
fn blend(u: f64) -> (f64, f64) {
    if u <= 0.0 {
        (1.0, 0.0)
    } else if u >= 1.0 {
        (0.0, 0.0)
    } else {
        (1.0 - u * u * (3.0 - 2.0 * u), -6.0 * u * (1.0 - u))
    }
}

impl Sphere {
    /// `(b, db/drho)`
    fn b(&self, rho: f64) -> (f64, f64) {
        let (v, d) = blend((rho - self.radius) / self.shell);
        (v, d / self.shell)
    }

    fn outer(&self) -> f64 {
        self.radius + self.shell
    }

    fn scale(&self, t: f64) -> f64 {
        1.0 + self.rate * t
    }

    /// `R(rho)` at normalized time `t`.
    fn radial(&self, rho: f64, t: f64) -> f64 {
        rho * (1.0 + (self.scale(t) - 1.0) * self.b(rho).0)
    }

    /// `dR/drho`
    fn radial_slope(&self, rho: f64, t: f64) -> f64 {
        let (b, db) = self.b(rho);
        let k = self.scale(t) - 1.0;
        1.0 + k * (b + db * rho)
    }

    /// Baseline radius mapping to `r` at time `t`.
    fn invert(&self, r: f64, t: f64) -> f64 {
        if r >= self.outer() {
            return r;
        }
        let (mut lo, mut hi) = (0.0, self.outer());
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.radial(mid, t) < r {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi.max(1e-300) {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    fn profile(&self, rho: f64, falloff: f64) -> f64 {
        let r = self.radius + falloff;
        if rho >= r {
            0.0
        } else {
            self.intensity * 0.5 * (1.0 + (std::f64::consts::PI * rho / r).cos())
        }
    }

    /// Displacement, Jacobian of `phi`, `d(phi)/dt`, `|J|` and `d|J|/dt`
    /// (time derivatives per normalized time unit).
    fn local(&self, w: [f64; 3], t: f64) -> PointTruth {
        let r = [w[0] - self.center[0], w[1] - self.center[1], w[2] - self.center[2]];
        let rho = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        let (b, db) = self.b(rho);
        let k = self.scale(t) - 1.0;
        let q = 1.0 + k * b;
        let dq = k * db;
        let mut jac = [0.0; 9];
        let mut djac = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                let outer = if rho > 0.0 { r[i] * r[j] / rho } else { 0.0 };
                let eye = if i == j { 1.0 } else { 0.0 };
                jac[i * 3 + j] = q * eye + dq * outer;
                djac[i * 3 + j] = self.rate * (b * eye + db * outer);
            }
        }
        let radial = q + dq * rho;
        let det = q * q * radial;
        let ddet = self.rate * (2.0 * q * b * radial + q * q * (b + db * rho));
        PointTruth {
            displacement: [k * b * r[0], k * b * r[1], k * b * r[2]],
            jacobian: jac,
            dphi_dt: [self.rate * b * r[0], self.rate * b * r[1], self.rate * b * r[2]],
            jac_det: det,
            jac_det_dt: ddet,
            djac_dt: djac,
        }
    }

    fn distance(&self, w: [f64; 3]) -> f64 {
        let r = [w[0] - self.center[0], w[1] - self.center[1], w[2] - self.center[2]];
        (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt()
    }
}

struct PointTruth {
    displacement: [f64; 3],
    jacobian: [f64; 9],
    dphi_dt: [f64; 3],
    jac_det: f64,
    jac_det_dt: f64,
    #[allow(dead_code)]
    djac_dt: [f64; 9],
}

impl PhantomSpec {
    /// Months per normalized time unit.
    pub fn time_unit(&self) -> f64 {
        self.times.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE)
    }

    fn spheres(&self) -> Vec<&Sphere> {
        std::iter::once(&self.growing).chain(self.shrinking.as_ref()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::invalid("phantom dims must be at least 2"));
        }
        if self.times.first() != Some(&0.0) {
            return Err(Error::invalid("phantom times must start at 0"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("phantom times must increase strictly"));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::invalid("noise sigma must be >= 0"));
        }
        if !(self.falloff >= 0.0) {
            return Err(Error::invalid("falloff must be >= 0"));
        }
        let t_max = self.times.last().unwrap() / self.time_unit();
        let spheres = self.spheres();
        for s in &spheres {
            if !(s.radius > 0.0) || !(s.shell > 0.0) {
                return Err(Error::invalid("sphere radius and shell must be positive"));
            }
            if s.radius + self.falloff > s.outer() {
                return Err(Error::invalid("intensity falloff must end inside the blend shell"));
            }
            for a in 0..3 {
                if s.center[a].abs() + s.outer() > 1.0 {
                    return Err(Error::invalid(format!(
                        "sphere at {:?} with outer radius {} escapes the domain",
                        s.center,
                        s.outer()
                    )));
                }
            }
            for t in [0.0, t_max] {
                if s.scale(t) <= 0.0 {
                    return Err(Error::invalid("sphere scale collapses to zero"));
                }
                // the radial map must stay invertible over the shell
                let n = 2000;
                for i in 0..=n {
                    let rho = s.radius + s.shell * i as f64 / n as f64;
                    if s.radial_slope(rho, t) <= 0.0 {
                        return Err(Error::invalid("growth rate folds the transition shell"));
                    }
                }
            }
        }
        if let [a, b] = spheres[..] {
            if a.distance(b.center) < a.outer() + b.outer() {
                return Err(Error::invalid("sphere shells overlap"));
            }
        }
        Ok(())
    }

    /// The analytic deformation.
    pub fn field(&self) -> PhantomField {
        PhantomField { spec: self.clone() }
    }

    fn baseline_intensity(&self, w: [f64; 3]) -> f64 {
        self.spheres()
            .iter()
            .map(|s| s.profile(s.distance(w), self.falloff))
            .sum()
    }

    /// Baseline-frame point mapped to `x` at normalized time `t`.
    fn pull_back(&self, x: [f64; 3], t: f64) -> [f64; 3] {
        for s in self.spheres() {
            let d = s.distance(x);
            if d < s.outer() {
                if d == 0.0 {
                    return x;
                }
                let rho = s.invert(d, t);
                let f = rho / d;
                return [0, 1, 2].map(|a| s.center[a] + (x[a] - s.center[a]) * f);
            }
        }
        x
    }

    fn labels_at(&self, t: f64) -> Result<LabelGrid> {
        let data = grid_coords(self.dims)
            .into_iter()
            .map(|x| {
                let w = self.pull_back(x, t);
                if self.growing.distance(w) <= self.growing.radius {
                    GROWING_LABEL
                } else if self.shrinking.is_some_and(|s| s.distance(w) <= s.radius) {
                    SHRINKING_LABEL
                } else {
                    0
                }
            })
            .collect();
        LabelGrid::new(self.dims, data)
    }

    fn noise_rng(&self, k: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64);
        rng
    }
}

/// Intensities at every time before normalization, noise included.
pub fn generate_raw(spec: &PhantomSpec) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let coords = grid_coords(spec.dims);
    let unit = spec.time_unit();
    spec.times
        .par_iter()
        .enumerate()
        .map(|(k, &months)| {
            let t = months / unit;
            let mut v: Vec<f64> = coords
                .iter()
                .map(|&x| spec.baseline_intensity(spec.pull_back(x, t)))
                .collect();
            if spec.noise_sigma > 0.0 {
                let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::invalid(e.to_string()))?;
                let mut rng = spec.noise_rng(k);
                for x in &mut v {
                    *x += normal.sample(&mut rng);
                }
            }
            Ok(v)
        })
        .collect()
}

/// A generated series and its analytic ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub series: Volume4DSeries,
    pub truth: PhantomField,
}

/// Generates the series: min-max normalized volumes with per-time labels.
pub fn generate(spec: &PhantomSpec) -> Result<Phantom> {
    let raw = generate_raw(spec)?;
    let unit = spec.time_unit();
    let mut scans = Vec::with_capacity(raw.len());
    for (data, &months) in raw.iter().zip(&spec.times) {
        scans.push(Scan {
            months,
            volume: normalize_intensities(spec.dims, [1.0; 3], data)?,
            labels: Some(spec.labels_at(months / unit)?),
        });
    }
    Ok(Phantom {
        series: Volume4DSeries::new(scans)?,
        truth: spec.field(),
    })
}

/// Closed-form displacement at every voxel at `months`.
pub fn true_field(spec: &PhantomSpec, months: f64) -> Result<Vec<[f64; 3]>> {
    spec.validate()?;
    let f = spec.field();
    let r = f.query(&grid_coords(spec.dims), months, DerivRequest::default())?;
    Ok(r.displacement)
}

/// The analytic deformation of a phantom, queryable like a fitted model.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomField {
    pub spec: PhantomSpec,
}

impl PhantomField {
    pub fn jac_det(&self, w: [f64; 3], months: f64) -> f64 {
        self.point(w, months / self.spec.time_unit()).jac_det
    }

    /// Per month.
    pub fn jac_det_dt(&self, w: [f64; 3], months: f64) -> f64 {
        self.point(w, months / self.spec.time_unit()).jac_det_dt / self.spec.time_unit()
    }

    fn point(&self, w: [f64; 3], t: f64) -> PointTruth {
        for s in self.spec.spheres() {
            if s.distance(w) < s.outer() {
                return s.local(w, t);
            }
        }
        PointTruth {
            displacement: [0.0; 3],
            jacobian: [1., 0., 0., 0., 1., 0., 0., 0., 1.],
            dphi_dt: [0.0; 3],
            jac_det: 1.0,
            jac_det_dt: 0.0,
            djac_dt: [0.0; 9],
        }
    }
}

impl DisplacementModel for PhantomField {
    fn query(&self, coords: &[[f64; 3]], months: f64, request: DerivRequest) -> Result<DisplacementResult> {
        request.validate()?;
        let unit = self.spec.time_unit();
        let t = months / unit;
        let pts: Vec<PointTruth> = coords.iter().map(|&w| self.point(w, t)).collect();
        Ok(DisplacementResult {
            displacement: pts.iter().map(|p| p.displacement).collect(),
            phi: pts
                .iter()
                .zip(coords)
                .map(|(p, w)| [0, 1, 2].map(|a| p.displacement[a] + w[a]))
                .collect(),
            spatial_jacobian: request.spatial.then(|| pts.iter().map(|p| p.jacobian).collect()),
            temporal_derivative: request
                .temporal
                .then(|| pts.iter().map(|p| p.dphi_dt.map(|v| v / unit)).collect()),
            jac_det: request.jacdet.then(|| pts.iter().map(|p| p.jac_det).collect()),
            jac_det_dt: request.jacdet_dt.then(|| pts.iter().map(|p| p.jac_det_dt / unit).collect()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blend_is_c1() {
        assert_eq!(blend(0.0), (1.0, 0.0));
        assert_eq!(blend(1.0), (0.0, 0.0));
        let (v, d) = blend(0.5);
        assert_eq!(v, 0.5);
        assert_eq!(d, -1.5);
    }

    #[test]
    fn core_jacobian_is_cubed_scale() {
        let spec = PhantomSpec::default();
        let f = PhantomField { spec: spec.clone() };
        let j = f.jac_det([0.1, 0.0, 0.05], 18.0);
        assert!((j - 1.331).abs() < 1e-12);
    }

    #[test]
    fn inverse_round_trips() {
        let s = PhantomSpec::default().growing;
        for rho in [0.0, 0.1, 0.35, 0.4, 0.6, 0.64, 0.9] {
            let r = s.radial(rho, 1.0);
            assert!((s.invert(r, 1.0) - rho).abs() < 1e-12);
        }
    }

    #[test]
    fn escaping_sphere_rejected() {
        let mut spec = PhantomSpec::default();
        spec.growing.center = [0.5, 0.0, 0.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn overlapping_spheres_rejected() {
        let mut spec = PhantomSpec::default();
        spec.growing.radius = 0.2;
        spec.growing.shell = 0.2;
        spec.falloff = 0.1;
        spec.shrinking = Some(Sphere {
            center: [0.3, 0.0, 0.0],
            radius: 0.1,
            shell: 0.1,
            rate: -0.1,
            intensity: 0.5,
        });
        assert!(spec.validate().is_err());
    }

    #[test]
    fn labels_track_the_core() {
        let spec = PhantomSpec::default();
        let p = generate(&spec).unwrap();
        let sizes: Vec<usize> = p
            .series
            .scans()
            .iter()
            .map(|s| s.labels.as_ref().unwrap().count(GROWING_LABEL))
            .collect();
        assert!(sizes.windows(2).all(|w| w[1] > w[0]), "{sizes:?}");
    }
}
