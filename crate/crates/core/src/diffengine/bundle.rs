use ndarray::Array2;

use super::{Ops, Real};
use crate::error::Result;

/// Number of first-order directions: x, y, z, t.
pub const DIRECTIONS: usize = 4;
/// The spatial directions.
pub const SPATIAL: [usize; 3] = [0, 1, 2];
/// Index of the time direction.
pub const TIME: usize = 3;

/// Which derivative directions to seed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Seeds {
    pub spatial: bool,
    pub temporal: bool,
    /// Track `d2/dx_j dt`. Only meaningful with both other flags set.
    pub mixed: bool,
}

impl Seeds {
    pub const NONE: Seeds = Seeds {
        spatial: false,
        temporal: false,
        mixed: false,
    };
    pub const ALL: Seeds = Seeds {
        spatial: true,
        temporal: true,
        mixed: true,
    };
}

/// A value with its first-order tangents and the mixed second-order
/// tangents `d2/dx_j dt`.
///
/// `None` entries are structurally zero; every rule below treats them so.
#[derive(Clone)]
pub struct TangentBundle<N> {
    pub value: N,
    pub tangents: [Option<N>; DIRECTIONS],
    pub mixed: [Option<N>; 3],
    track_mixed: bool,
}

fn add_opt<T: Real, O: Ops<T>>(ops: &mut O, a: Option<O::Node>, b: Option<O::Node>) -> Result<Option<O::Node>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(ops.add(&a, &b)?),
        (a, None) => a,
        (None, b) => b,
    })
}

fn scaled<T: Real, O: Ops<T>>(ops: &mut O, a: O::Node, c: f64) -> Result<O::Node> {
    if c == 1.0 {
        Ok(a)
    } else {
        ops.scale(&a, c)
    }
}

impl<N: Clone> TangentBundle<N> {
    /// A bundle with no derivative content.
    pub fn constant(value: N) -> Self {
        Self {
            value,
            tangents: [None, None, None, None],
            mixed: [None, None, None],
            track_mixed: false,
        }
    }

    pub fn tracks_mixed(&self) -> bool {
        self.track_mixed
    }

    /// Seeds `n` spatial points `(n, 3)` with unit tangents along x, y, z.
    pub fn point<T: Real, O: Ops<T, Node = N>>(ops: &mut O, coords: Array2<T>, seeds: Seeds) -> Self {
        let n = coords.nrows();
        let mut b = Self::constant(ops.constant(coords));
        if seeds.spatial {
            for j in SPATIAL {
                let mut e = Array2::zeros((n, 3));
                e.column_mut(j).fill(T::one());
                b.tangents[j] = Some(ops.constant(e));
            }
        }
        b.track_mixed = seeds.mixed;
        b
    }

    /// Seeds a single time value `(1, 1)` with a unit tangent along t.
    pub fn time<T: Real, O: Ops<T, Node = N>>(ops: &mut O, t: T, seeds: Seeds) -> Self {
        let mut b = Self::constant(ops.constant(Array2::from_elem((1, 1), t)));
        if seeds.temporal {
            b.tangents[TIME] = Some(ops.constant(Array2::from_elem((1, 1), T::one())));
        }
        b.track_mixed = seeds.mixed;
        b
    }

    /// `x w^T + b`; tangents pass through the linear part only.
    pub fn affine<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, w: &N, b: Option<&N>) -> Result<Self> {
        let value = ops.affine(&self.value, w, b)?;
        let mut out = Self::constant(value);
        out.track_mixed = self.track_mixed;
        for (dst, src) in out.tangents.iter_mut().zip(&self.tangents) {
            if let Some(d) = src {
                *dst = Some(ops.affine(d, w, None)?);
            }
        }
        for (dst, src) in out.mixed.iter_mut().zip(&self.mixed) {
            if let Some(m) = src {
                *dst = Some(ops.affine(m, w, None)?);
            }
        }
        Ok(out)
    }

    /// Adds a single-row bundle to every row of `self`.
    pub fn add_row<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, row: &Self) -> Result<Self> {
        let rows = ops.value(&self.value).nrows();
        let combine = |ops: &mut O, a: &Option<N>, r: &Option<N>| -> Result<Option<N>> {
            Ok(match (a, r) {
                (Some(a), Some(r)) => Some(ops.add_row(a, r)?),
                (Some(a), None) => Some(a.clone()),
                (None, Some(r)) => Some(ops.broadcast(r, rows)?),
                (None, None) => None,
            })
        };
        let value = ops.add_row(&self.value, &row.value)?;
        let mut out = Self::constant(value);
        out.track_mixed = self.track_mixed || row.track_mixed;
        for k in 0..DIRECTIONS {
            out.tangents[k] = combine(ops, &self.tangents[k], &row.tangents[k])?;
        }
        for k in 0..3 {
            out.mixed[k] = combine(ops, &self.mixed[k], &row.mixed[k])?;
        }
        Ok(out)
    }

    pub fn add<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, other: &Self) -> Result<Self> {
        let value = ops.add(&self.value, &other.value)?;
        let mut out = Self::constant(value);
        out.track_mixed = self.track_mixed || other.track_mixed;
        for k in 0..DIRECTIONS {
            out.tangents[k] = add_opt(ops, self.tangents[k].clone(), other.tangents[k].clone())?;
        }
        for k in 0..3 {
            out.mixed[k] = add_opt(ops, self.mixed[k].clone(), other.mixed[k].clone())?;
        }
        Ok(out)
    }

    /// Elementwise product by the Leibniz rule, including the mixed terms
    /// `(fg)_jt = f_jt g + f_j g_t + f_t g_j + f g_jt`.
    pub fn mul<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, other: &Self) -> Result<Self> {
        let value = ops.mul(&self.value, &other.value)?;
        let mut out = Self::constant(value);
        out.track_mixed = self.track_mixed || other.track_mixed;
        for k in 0..DIRECTIONS {
            let left = match &self.tangents[k] {
                Some(d) => Some(ops.mul(d, &other.value)?),
                None => None,
            };
            let right = match &other.tangents[k] {
                Some(d) => Some(ops.mul(&self.value, d)?),
                None => None,
            };
            out.tangents[k] = add_opt(ops, left, right)?;
        }
        if out.track_mixed {
            for j in SPATIAL {
                let mut acc = None;
                if let Some(m) = &self.mixed[j] {
                    let t = ops.mul(m, &other.value)?;
                    acc = add_opt(ops, acc, Some(t))?;
                }
                if let Some(m) = &other.mixed[j] {
                    let t = ops.mul(&self.value, m)?;
                    acc = add_opt(ops, acc, Some(t))?;
                }
                if let (Some(a), Some(b)) = (&self.tangents[j], &other.tangents[TIME]) {
                    let t = ops.mul(a, b)?;
                    acc = add_opt(ops, acc, Some(t))?;
                }
                if let (Some(a), Some(b)) = (&self.tangents[TIME], &other.tangents[j]) {
                    let t = ops.mul(a, b)?;
                    acc = add_opt(ops, acc, Some(t))?;
                }
                out.mixed[j] = acc;
            }
        }
        Ok(out)
    }

    /// `sin(freq * x)` with first and mixed tangents:
    /// `d' = f cos(fx) d`, `m'_j = f cos(fx) m_j - f^2 sin(fx) d_j d_t`.
    pub fn sin<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, freq: f64) -> Result<Self> {
        let s = ops.sin(&self.value, freq)?;
        let mut out = Self::constant(s.clone());
        out.track_mixed = self.track_mixed;
        let any_tangent = self.tangents.iter().any(Option::is_some);
        if !any_tangent {
            return Ok(out);
        }
        let c = ops.cos(&self.value, freq)?;
        for (dst, src) in out.tangents.iter_mut().zip(&self.tangents) {
            if let Some(d) = src {
                let cd = ops.mul(&c, d)?;
                *dst = Some(scaled(ops, cd, freq)?);
            }
        }
        if self.track_mixed {
            let sd_t = match &self.tangents[TIME] {
                Some(dt) => Some(ops.mul(&s, dt)?),
                None => None,
            };
            for j in SPATIAL {
                let first = match &self.mixed[j] {
                    Some(m) => {
                        let cm = ops.mul(&c, m)?;
                        Some(scaled(ops, cm, freq)?)
                    }
                    None => None,
                };
                let second = match (&sd_t, &self.tangents[j]) {
                    (Some(q), Some(dj)) => {
                        let p = ops.mul(q, dj)?;
                        Some(ops.scale(&p, -freq * freq)?)
                    }
                    _ => None,
                };
                out.mixed[j] = add_opt(ops, first, second)?;
            }
        }
        Ok(out)
    }

    /// Leaky rectifier. Tangents are multiplied by the active slope; the
    /// second derivative is zero, so mixed tangents propagate the same way.
    pub fn leaky<T: Real, O: Ops<T, Node = N>>(&self, ops: &mut O, slope: f64) -> Result<Self> {
        let value = ops.leaky(&self.value, slope)?;
        let mut out = Self::constant(value);
        out.track_mixed = self.track_mixed;
        for (dst, src) in out.tangents.iter_mut().zip(&self.tangents) {
            if let Some(d) = src {
                *dst = Some(ops.leaky_tangent(&self.value, d, slope)?);
            }
        }
        for (dst, src) in out.mixed.iter_mut().zip(&self.mixed) {
            if let Some(m) = src {
                *dst = Some(ops.leaky_tangent(&self.value, m, slope)?);
            }
        }
        Ok(out)
    }
}
