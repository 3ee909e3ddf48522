use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, Axis, Zip};

use super::Real;
use crate::error::{Error, Result};
use crate::volume::Volume3D;

/// A primitive operation and its constant payload.
///
/// Shapes are `(rows, cols)`. Row-wise 3x3 operations store each matrix as
/// a row of nine entries in row-major order.
#[derive(Clone)]
pub enum Op {
    /// `x (n,i)`, `w (o,i)`, optional `b (1,o)`: `x w^T + b`.
    Affine { bias: bool },
    /// `x (n,c) + r (1,c)` with `r` repeated down the rows.
    AddRow,
    /// `r (1,c)` repeated into `(rows, c)`.
    Broadcast { rows: usize },
    Add,
    Sub,
    Mul,
    Div,
    Scale { c: f64 },
    /// `sin(freq * x)`.
    Sin { freq: f64 },
    /// `cos(freq * x)`.
    Cos { freq: f64 },
    /// Leaky rectifier.
    Leaky { slope: f64 },
    /// `leaky'(z) * v` for inputs `z, v`; the factor is piecewise constant in `z`.
    LeakyTangent { slope: f64 },
    Square,
    /// `max(x, 0)`.
    Relu,
    /// Elementwise minimum of two inputs.
    Min,
    /// Sum of all entries into `(1,1)`.
    Sum,
    /// Mean of all entries into `(1,1)`.
    Mean,
    /// `(n,c) -> (n,1)`.
    RowSum,
    /// Three `(n,3)` columns into `(n,9)` matrices, optionally plus identity.
    Stack3x3 { identity: bool },
    Det3,
    Adj3,
    MatMul3,
    Trace3,
    /// Trilinear sampling of a fixed volume at `(n,3)` normalized coordinates.
    Trilinear(Arc<Volume3D>),
    /// `1 - NCC(fixed, moving)` for a moving `(n,1)` column.
    Ncc(Arc<[f64]>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Affine { bias } => write!(f, "affine(bias={bias})"),
            Op::Broadcast { rows } => write!(f, "broadcast({rows})"),
            Op::Scale { c } => write!(f, "scale({c})"),
            Op::Sin { freq } => write!(f, "sin({freq})"),
            Op::Cos { freq } => write!(f, "cos({freq})"),
            Op::Leaky { slope } => write!(f, "leaky({slope})"),
            Op::LeakyTangent { slope } => write!(f, "leaky_tangent({slope})"),
            Op::Stack3x3 { identity } => write!(f, "stack3x3(identity={identity})"),
            Op::Trilinear(v) => write!(f, "trilinear({:?})", v.dims()),
            Op::Ncc(fixed) => write!(f, "ncc(n={})", fixed.len()),
            other => f.write_str(other.name()),
        }
    }
}

// Rows of 3x3 matrices: adj(A)[k] = a[p]*a[q] - a[r]*a[s].
const ADJ_TERMS: [(usize, usize, usize, usize); 9] = [
    (4, 8, 5, 7),
    (2, 7, 1, 8),
    (1, 5, 2, 4),
    (5, 6, 3, 8),
    (0, 8, 2, 6),
    (2, 3, 0, 5),
    (3, 7, 4, 6),
    (1, 6, 0, 7),
    (0, 4, 1, 3),
];

/// Adjugate of a row-major 3x3 matrix.
#[inline]
pub fn adjugate3<T: Real>(a: &[T]) -> [T; 9] {
    let mut out = [T::zero(); 9];
    for (k, &(p, q, r, s)) in ADJ_TERMS.iter().enumerate() {
        out[k] = a[p] * a[q] - a[r] * a[s];
    }
    out
}

/// Determinant of a row-major 3x3 matrix by cofactor expansion along the first row.
#[inline]
pub fn det3<T: Real>(a: &[T]) -> T {
    a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
        + a[2] * (a[3] * a[7] - a[4] * a[6])
}

fn shapes<T>(inputs: &[&Array2<T>]) -> Vec<(usize, usize)> {
    inputs.iter().map(|a| a.dim()).collect()
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Affine { .. } => "affine",
            Op::AddRow => "add_row",
            Op::Broadcast { .. } => "broadcast",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Scale { .. } => "scale",
            Op::Sin { .. } => "sin",
            Op::Cos { .. } => "cos",
            Op::Leaky { .. } => "leaky",
            Op::LeakyTangent { .. } => "leaky_tangent",
            Op::Square => "square",
            Op::Relu => "relu",
            Op::Min => "min",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::RowSum => "row_sum",
            Op::Stack3x3 { .. } => "stack3x3",
            Op::Det3 => "det3",
            Op::Adj3 => "adj3",
            Op::MatMul3 => "matmul3",
            Op::Trace3 => "trace3",
            Op::Trilinear(_) => "trilinear",
            Op::Ncc(_) => "ncc",
        }
    }

    /// Builds an op from its name and numeric payload.
    ///
    /// Ops carrying data (`trilinear`, `ncc`) are constructed directly.
    pub fn from_name(name: &str, payload: &[f64]) -> Result<Op> {
        let arg = |i: usize| {
            payload
                .get(i)
                .copied()
                .ok_or_else(|| Error::invalid(format!("`{name}` needs payload value {i}")))
        };
        Ok(match name {
            "affine" => Op::Affine { bias: true },
            "linear" => Op::Affine { bias: false },
            "add_row" => Op::AddRow,
            "broadcast" => Op::Broadcast {
                rows: arg(0)? as usize,
            },
            "add" => Op::Add,
            "sub" => Op::Sub,
            "mul" => Op::Mul,
            "div" => Op::Div,
            "scale" => Op::Scale { c: arg(0)? },
            "sin" => Op::Sin {
                freq: payload.first().copied().unwrap_or(1.0),
            },
            "cos" => Op::Cos {
                freq: payload.first().copied().unwrap_or(1.0),
            },
            "leaky" => Op::Leaky { slope: arg(0)? },
            "leaky_tangent" => Op::LeakyTangent { slope: arg(0)? },
            "square" => Op::Square,
            "relu" => Op::Relu,
            "min" => Op::Min,
            "sum" => Op::Sum,
            "mean" => Op::Mean,
            "row_sum" => Op::RowSum,
            "stack3x3" => Op::Stack3x3 { identity: false },
            "stack3x3_identity" => Op::Stack3x3 { identity: true },
            "det3" => Op::Det3,
            "adj3" => Op::Adj3,
            "matmul3" => Op::MatMul3,
            "trace3" => Op::Trace3,
            other => return Err(Error::UnknownOp(other.to_string())),
        })
    }

    fn arity(&self) -> usize {
        match self {
            Op::Affine { bias: true } | Op::Stack3x3 { .. } => 3,
            Op::Affine { bias: false }
            | Op::AddRow
            | Op::Add
            | Op::Sub
            | Op::Mul
            | Op::Div
            | Op::LeakyTangent { .. }
            | Op::Min
            | Op::MatMul3 => 2,
            _ => 1,
        }
    }

    fn check<T>(&self, inputs: &[&Array2<T>]) -> Result<()> {
        let bad = || Error::Shape {
            op: self.name(),
            shapes: shapes(inputs),
        };
        if inputs.len() != self.arity() {
            return Err(bad());
        }
        let d: Vec<(usize, usize)> = shapes(inputs);
        let ok = match self {
            Op::Affine { bias } => {
                d[0].1 == d[1].1 && (!bias || d[2] == (1, d[1].0))
            }
            Op::AddRow => d[1] == (1, d[0].1),
            Op::Broadcast { .. } => d[0].0 == 1,
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Min | Op::LeakyTangent { .. } => {
                d[0] == d[1]
            }
            Op::Stack3x3 { .. } => d.iter().all(|&s| s == (d[0].0, 3)),
            Op::Det3 | Op::Adj3 | Op::Trace3 => d[0].1 == 9,
            Op::MatMul3 => d[0].1 == 9 && d[0] == d[1],
            Op::Trilinear(_) => d[0].1 == 3,
            Op::Ncc(fixed) => d[0] == (fixed.len(), 1) && !fixed.is_empty(),
            Op::Sum | Op::Mean => d[0].0 * d[0].1 > 0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(bad())
        }
    }

    /// Evaluates the op.
    pub fn forward<T: Real>(&self, inputs: &[&Array2<T>]) -> Result<Array2<T>> {
        self.check(inputs)?;
        let a = inputs[0];
        Ok(match self {
            Op::Affine { bias } => {
                let mut y = a.dot(&inputs[1].t());
                if *bias {
                    y += inputs[2];
                }
                y
            }
            Op::AddRow => a + inputs[1],
            Op::Broadcast { rows } => a
                .broadcast((*rows, a.ncols()))
                .expect("row broadcast")
                .to_owned(),
            Op::Add => a + inputs[1],
            Op::Sub => a - inputs[1],
            Op::Mul => a * inputs[1],
            Op::Div => a / inputs[1],
            Op::Scale { c } => a * T::lit(*c),
            Op::Sin { freq } => {
                let f = T::lit(*freq);
                a.mapv(|x| (f * x).sin())
            }
            Op::Cos { freq } => {
                let f = T::lit(*freq);
                a.mapv(|x| (f * x).cos())
            }
            Op::Leaky { slope } => {
                let s = T::lit(*slope);
                a.mapv(|x| if x >= T::zero() { x } else { s * x })
            }
            Op::LeakyTangent { slope } => {
                let s = T::lit(*slope);
                Zip::from(a)
                    .and(inputs[1])
                    .map_collect(|&z, &v| if z >= T::zero() { v } else { s * v })
            }
            Op::Square => a.mapv(|x| x * x),
            Op::Relu => a.mapv(|x| x.max(T::zero())),
            Op::Min => Zip::from(a)
                .and(inputs[1])
                .map_collect(|&x, &y| if x <= y { x } else { y }),
            Op::Sum => Array2::from_elem((1, 1), a.sum()),
            Op::Mean => Array2::from_elem((1, 1), a.sum() / T::from_usize(a.len()).unwrap()),
            Op::RowSum => a.sum_axis(Axis(1)).insert_axis(Axis(1)),
            Op::Stack3x3 { identity } => {
                let n = a.nrows();
                let mut out = Array2::zeros((n, 9));
                for (j, col) in inputs.iter().enumerate() {
                    for r in 0..n {
                        for i in 0..3 {
                            out[[r, i * 3 + j]] = col[[r, i]];
                        }
                    }
                }
                if *identity {
                    for r in 0..n {
                        for i in 0..3 {
                            out[[r, i * 4]] += T::one();
                        }
                    }
                }
                out
            }
            Op::Det3 => {
                let mut out = Array2::zeros((a.nrows(), 1));
                for (r, row) in a.rows().into_iter().enumerate() {
                    out[[r, 0]] = det3(row.as_slice().unwrap_or(&row.to_vec()));
                }
                out
            }
            Op::Adj3 => {
                let mut out = Array2::zeros((a.nrows(), 9));
                for (r, row) in a.rows().into_iter().enumerate() {
                    let adj = adjugate3(row.as_slice().unwrap_or(&row.to_vec()));
                    for k in 0..9 {
                        out[[r, k]] = adj[k];
                    }
                }
                out
            }
            Op::MatMul3 => {
                let b = inputs[1];
                let mut out = Array2::zeros((a.nrows(), 9));
                for r in 0..a.nrows() {
                    for i in 0..3 {
                        for j in 0..3 {
                            let mut acc = T::zero();
                            for k in 0..3 {
                                acc += a[[r, i * 3 + k]] * b[[r, k * 3 + j]];
                            }
                            out[[r, i * 3 + j]] = acc;
                        }
                    }
                }
                out
            }
            Op::Trace3 => {
                let mut out = Array2::zeros((a.nrows(), 1));
                for r in 0..a.nrows() {
                    out[[r, 0]] = a[[r, 0]] + a[[r, 4]] + a[[r, 8]];
                }
                out
            }
            Op::Trilinear(vol) => {
                let mut out = Array2::zeros((a.nrows(), 1));
                for r in 0..a.nrows() {
                    out[[r, 0]] = vol.sample([a[[r, 0]], a[[r, 1]], a[[r, 2]]]).0;
                }
                out
            }
            Op::Ncc(fixed) => {
                let m: Vec<T> = a.iter().copied().collect();
                let stats = NccStats::new(fixed, &m);
                Array2::from_elem((1, 1), T::one() - stats.ncc)
            }
        })
    }

    /// Adjoints of each input given the output adjoint `g`.
    ///
    /// `needs[i]` is false for inputs that cannot reach a trainable leaf;
    /// their adjoints are skipped and returned as `None`.
    pub fn backward<T: Real>(
        &self,
        inputs: &[&Array2<T>],
        _output: &Array2<T>,
        g: &Array2<T>,
        needs: &[bool],
    ) -> Vec<Option<Array2<T>>> {
        let a = inputs[0];
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        let mut out: Vec<Option<Array2<T>>> = vec![None; inputs.len()];
        match self {
            Op::Affine { bias } => {
                let w = inputs[1];
                if need(0) {
                    out[0] = Some(g.dot(w));
                }
                if need(1) {
                    out[1] = Some(g.t().dot(a));
                }
                if *bias && need(2) {
                    out[2] = Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::AddRow => {
                if need(0) {
                    out[0] = Some(g.clone());
                }
                if need(1) {
                    out[1] = Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Broadcast { .. } => {
                out[0] = Some(g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add => {
                if need(0) {
                    out[0] = Some(g.clone());
                }
                if need(1) {
                    out[1] = Some(g.clone());
                }
            }
            Op::Sub => {
                if need(0) {
                    out[0] = Some(g.clone());
                }
                if need(1) {
                    out[1] = Some(g.mapv(|x| -x));
                }
            }
            Op::Mul => {
                let b = inputs[1];
                if need(0) {
                    out[0] = Some(g * b);
                }
                if need(1) {
                    out[1] = Some(g * a);
                }
            }
            Op::Div => {
                let b = inputs[1];
                if need(0) {
                    out[0] = Some(g / b);
                }
                if need(1) {
                    out[1] = Some(Zip::from(g).and(a).and(b).map_collect(|&g, &a, &b| -g * a / (b * b)));
                }
            }
            Op::Scale { c } => out[0] = Some(g * T::lit(*c)),
            Op::Sin { freq } => {
                let f = T::lit(*freq);
                out[0] = Some(Zip::from(g).and(a).map_collect(|&g, &x| g * f * (f * x).cos()));
            }
            Op::Cos { freq } => {
                let f = T::lit(*freq);
                out[0] = Some(Zip::from(g).and(a).map_collect(|&g, &x| -g * f * (f * x).sin()));
            }
            Op::Leaky { slope } => {
                let s = T::lit(*slope);
                out[0] = Some(Zip::from(g).and(a).map_collect(|&g, &x| if x >= T::zero() { g } else { s * g }));
            }
            Op::LeakyTangent { slope } => {
                // second derivative of the rectifier is zero: nothing flows to z
                if need(1) {
                    let s = T::lit(*slope);
                    out[1] = Some(Zip::from(g).and(a).map_collect(|&g, &z| if z >= T::zero() { g } else { s * g }));
                }
            }
            Op::Square => {
                out[0] = Some(Zip::from(g).and(a).map_collect(|&g, &x| (x + x) * g));
            }
            Op::Relu => {
                out[0] = Some(Zip::from(g).and(a).map_collect(|&g, &x| if x > T::zero() { g } else { T::zero() }));
            }
            Op::Min => {
                let b = inputs[1];
                if need(0) {
                    out[0] = Some(Zip::from(g).and(a).and(b).map_collect(|&g, &x, &y| if x <= y { g } else { T::zero() }));
                }
                if need(1) {
                    out[1] = Some(Zip::from(g).and(a).and(b).map_collect(|&g, &x, &y| if x <= y { T::zero() } else { g }));
                }
            }
            Op::Sum => out[0] = Some(Array2::from_elem(a.dim(), g[[0, 0]])),
            Op::Mean => {
                let n = T::from_usize(a.len()).unwrap();
                out[0] = Some(Array2::from_elem(a.dim(), g[[0, 0]] / n));
            }
            Op::RowSum => {
                out[0] = Some(
                    g.broadcast(a.dim()).expect("row-sum adjoint").to_owned(),
                );
            }
            Op::Stack3x3 { .. } => {
                let n = a.nrows();
                for (j, slot) in out.iter_mut().enumerate() {
                    if !need(j) {
                        continue;
                    }
                    let mut d = Array2::zeros((n, 3));
                    for r in 0..n {
                        for i in 0..3 {
                            d[[r, i]] = g[[r, i * 3 + j]];
                        }
                    }
                    *slot = Some(d);
                }
            }
            Op::Det3 => {
                // d det / dA = cofactor matrix = adj(A)^T
                let mut d = Array2::zeros(a.dim());
                for r in 0..a.nrows() {
                    let row: Vec<T> = a.row(r).to_vec();
                    let adj = adjugate3(&row);
                    let gr = g[[r, 0]];
                    for i in 0..3 {
                        for j in 0..3 {
                            d[[r, i * 3 + j]] = gr * adj[j * 3 + i];
                        }
                    }
                }
                out[0] = Some(d);
            }
            Op::Adj3 => {
                let mut d = Array2::zeros(a.dim());
                for r in 0..a.nrows() {
                    for (k, &(p, q, u, v)) in ADJ_TERMS.iter().enumerate() {
                        let gk = g[[r, k]];
                        d[[r, p]] += gk * a[[r, q]];
                        d[[r, q]] += gk * a[[r, p]];
                        d[[r, u]] -= gk * a[[r, v]];
                        d[[r, v]] -= gk * a[[r, u]];
                    }
                }
                out[0] = Some(d);
            }
            Op::MatMul3 => {
                let b = inputs[1];
                let n = a.nrows();
                if need(0) {
                    // dA = G B^T
                    let mut d = Array2::zeros((n, 9));
                    for r in 0..n {
                        for i in 0..3 {
                            for k in 0..3 {
                                let mut acc = T::zero();
                                for j in 0..3 {
                                    acc += g[[r, i * 3 + j]] * b[[r, k * 3 + j]];
                                }
                                d[[r, i * 3 + k]] = acc;
                            }
                        }
                    }
                    out[0] = Some(d);
                }
                if need(1) {
                    // dB = A^T G
                    let mut d = Array2::zeros((n, 9));
                    for r in 0..n {
                        for k in 0..3 {
                            for j in 0..3 {
                                let mut acc = T::zero();
                                for i in 0..3 {
                                    acc += a[[r, i * 3 + k]] * g[[r, i * 3 + j]];
                                }
                                d[[r, k * 3 + j]] = acc;
                            }
                        }
                    }
                    out[1] = Some(d);
                }
            }
            Op::Trace3 => {
                let mut d = Array2::zeros(a.dim());
                for r in 0..a.nrows() {
                    for i in 0..3 {
                        d[[r, i * 4]] = g[[r, 0]];
                    }
                }
                out[0] = Some(d);
            }
            Op::Trilinear(vol) => {
                let mut d = Array2::zeros(a.dim());
                for r in 0..a.nrows() {
                    let (_, grad) = vol.sample([a[[r, 0]], a[[r, 1]], a[[r, 2]]]);
                    for c in 0..3 {
                        d[[r, c]] = g[[r, 0]] * grad[c];
                    }
                }
                out[0] = Some(d);
            }
            Op::Ncc(fixed) => {
                let m: Vec<T> = a.iter().copied().collect();
                let stats = NccStats::new(fixed, &m);
                let gs = g[[0, 0]];
                let mut d = Array2::zeros(a.dim());
                if let Some((inv_norm, inv_smm)) = stats.grad_factors {
                    for (r, (&fc, &mc)) in stats.fc.iter().zip(&stats.mc).enumerate() {
                        // d(1 - ncc)/dm_i
                        d[[r, 0]] = -gs * (fc * inv_norm - stats.ncc * mc * inv_smm);
                    }
                }
                out[0] = Some(d);
            }
        }
        out
    }
}

/// Centred sums behind the global normalized cross-correlation.
pub(crate) struct NccStats<T> {
    pub ncc: T,
    fc: Vec<T>,
    mc: Vec<T>,
    /// `(1/sqrt(Sff*Smm), 1/Smm)` when both inputs have variance.
    grad_factors: Option<(T, T)>,
}

impl<T: Real> NccStats<T> {
    pub fn new(fixed: &[f64], moving: &[T]) -> Self {
        let n = T::from_usize(moving.len()).unwrap();
        let f: Vec<T> = fixed.iter().map(|&v| T::lit(v)).collect();
        let fbar = f.iter().fold(T::zero(), |s, &v| s + v) / n;
        let mbar = moving.iter().fold(T::zero(), |s, &v| s + v) / n;
        let fc: Vec<T> = f.iter().map(|&v| v - fbar).collect();
        let mc: Vec<T> = moving.iter().map(|&v| v - mbar).collect();
        let mut sfm = T::zero();
        let mut sff = T::zero();
        let mut smm = T::zero();
        for (&a, &b) in fc.iter().zip(&mc) {
            sfm += a * b;
            sff += a * a;
            smm += b * b;
        }
        if sff > T::zero() && smm > T::zero() {
            let inv_norm = T::one() / (sff * smm).sqrt();
            Self {
                ncc: sfm * inv_norm,
                fc,
                mc,
                grad_factors: Some((inv_norm, T::one() / smm)),
            }
        } else {
            // degenerate: identical constants correlate perfectly, anything else not at all
            let equal = sff == T::zero()
                && smm == T::zero()
                && f.iter().zip(moving).all(|(&a, &b)| a == b);
            Self {
                ncc: if equal { T::one() } else { T::zero() },
                fc,
                mc,
                grad_factors: None,
            }
        }
    }
}
