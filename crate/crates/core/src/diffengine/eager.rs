use std::rc::Rc;

use ndarray::Array2;

use super::{Op, Ops, Real};
use crate::error::Result;

/// Evaluates ops immediately and keeps nothing but the live values.
///
/// Used for inference over frozen parameters. Each thread owns its own
/// executor.
#[derive(Default)]
pub struct Eager;

impl Eager {
    pub fn new() -> Self {
        Eager
    }
}

impl<T: Real> Ops<T> for Eager {
    type Node = Rc<Array2<T>>;

    fn constant(&mut self, value: Array2<T>) -> Self::Node {
        Rc::new(value)
    }

    fn record(&mut self, op: Op, inputs: &[&Self::Node]) -> Result<Self::Node> {
        let values: Vec<&Array2<T>> = inputs.iter().map(|n| n.as_ref()).collect();
        Ok(Rc::new(op.forward(&values)?))
    }

    fn value<'a>(&'a self, node: &'a Self::Node) -> &'a Array2<T> {
        node
    }
}
