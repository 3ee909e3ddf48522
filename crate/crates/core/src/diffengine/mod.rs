//! A small special-purpose differentiation engine.
//!
//! Values are dense row-major matrices (`rows = points`). Every primitive is
//! described once by [`Op`] and evaluated by one of two executors:
//!
//! * [`Tape`] records each node so [`Tape::backward`] can return parameter
//!   gradients of a scalar output;
//! * [`Eager`] evaluates and forgets, for inference over frozen parameters.
//!
//! Input derivatives (`d/dw`, `d/dt` and the mixed `d2/dw dt`) are carried
//! forward in a [`TangentBundle`] whose propagation rules are themselves
//! built from recorded primitives, so the reverse pass differentiates
//! through them.

mod bundle;
mod eager;
mod op;
mod tape;

pub use bundle::{Seeds, TangentBundle, DIRECTIONS, SPATIAL, TIME};
pub use eager::Eager;
pub use op::{adjugate3, det3, Op};
pub use tape::{Gradients, NodeId, Tape};

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::Result;

/// Floating-point element type of the engine (`f32` or `f64`).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + LinalgScalar
        + ScalarOperand
        + Debug
        + Display
        + Default
        + AddAssign
        + SubAssign
        + MulAssign
        + Send
        + Sync
        + 'static
{
}

/// Arithmetic precision of a fit or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(crate::error::Error::invalid(format!(
                "unknown precision `{other}` (expected f32 or f64)"
            ))),
        }
    }
}

/// An executor of [`Op`]s.
///
/// Network and loss code is written once against this trait and runs both
/// recorded (for training) and eagerly (for inference).
pub trait Ops<T: Real> {
    type Node: Clone;

    /// A value that never receives a gradient.
    fn constant(&mut self, value: Array2<T>) -> Self::Node;

    /// A trainable leaf. Executors without gradients treat it as a constant.
    fn param(&mut self, value: Array2<T>) -> Self::Node {
        self.constant(value)
    }

    fn record(&mut self, op: Op, inputs: &[&Self::Node]) -> Result<Self::Node>;

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Array2<T>;

    fn scalar(&self, node: &Self::Node) -> T {
        self.value(node)[[0, 0]]
    }

    fn affine(&mut self, x: &Self::Node, w: &Self::Node, b: Option<&Self::Node>) -> Result<Self::Node> {
        match b {
            Some(b) => self.record(Op::Affine { bias: true }, &[x, w, b]),
            None => self.record(Op::Affine { bias: false }, &[x, w]),
        }
    }
    fn add_row(&mut self, x: &Self::Node, row: &Self::Node) -> Result<Self::Node> {
        self.record(Op::AddRow, &[x, row])
    }
    fn broadcast(&mut self, row: &Self::Node, rows: usize) -> Result<Self::Node> {
        self.record(Op::Broadcast { rows }, &[row])
    }
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Div, &[a, b])
    }
    fn scale(&mut self, a: &Self::Node, c: f64) -> Result<Self::Node> {
        self.record(Op::Scale { c }, &[a])
    }
    fn sin(&mut self, a: &Self::Node, freq: f64) -> Result<Self::Node> {
        self.record(Op::Sin { freq }, &[a])
    }
    fn cos(&mut self, a: &Self::Node, freq: f64) -> Result<Self::Node> {
        self.record(Op::Cos { freq }, &[a])
    }
    fn leaky(&mut self, a: &Self::Node, slope: f64) -> Result<Self::Node> {
        self.record(Op::Leaky { slope }, &[a])
    }
    fn leaky_tangent(&mut self, z: &Self::Node, v: &Self::Node, slope: f64) -> Result<Self::Node> {
        self.record(Op::LeakyTangent { slope }, &[z, v])
    }
    fn square(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Square, &[a])
    }
    fn relu(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Relu, &[a])
    }
    fn min(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Min, &[a, b])
    }
    fn sum(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Mean, &[a])
    }
    fn row_sum(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::RowSum, &[a])
    }
    fn stack3x3(&mut self, cols: [&Self::Node; 3], identity: bool) -> Result<Self::Node> {
        self.record(Op::Stack3x3 { identity }, &cols)
    }
    fn det3(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Det3, &[a])
    }
    fn adj3(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Adj3, &[a])
    }
    fn matmul3(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        self.record(Op::MatMul3, &[a, b])
    }
    fn trace3(&mut self, a: &Self::Node) -> Result<Self::Node> {
        self.record(Op::Trace3, &[a])
    }
}
