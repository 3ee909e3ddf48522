use ndarray::Array2;

use super::{Op, Ops, Real};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

struct Node<T> {
    op: Option<Op>,
    inputs: Vec<usize>,
    value: Array2<T>,
    trainable: bool,
}

/// A Wengert list of eagerly evaluated nodes.
///
/// Nodes are appended in evaluation order, so every node's inputs precede
/// it. A tape has a single owner for the duration of one loss evaluation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Option<Op>, inputs: Vec<usize>, value: Array2<T>, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a primitive by name; unknown names are rejected.
    pub fn record_primitive(&mut self, name: &str, inputs: &[NodeId], payload: &[f64]) -> Result<NodeId> {
        let op = Op::from_name(name, payload)?;
        let refs: Vec<&NodeId> = inputs.iter().collect();
        self.record(op, &refs)
    }

    /// Reverse pass from a scalar node.
    ///
    /// The tape itself is left untouched, so repeated calls give identical
    /// gradients.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        let out = &self.nodes[output.0];
        if out.value.dim() != (1, 1) {
            return Err(Error::NotScalar(out.value.dim()));
        }
        let mut adjoints: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        adjoints[output.0] = Some(Array2::from_elem((1, 1), T::one()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            if !node.trainable {
                continue;
            }
            let Some(g) = adjoints[idx].take() else { continue };
            let inputs: Vec<&Array2<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].trainable).collect();
            let grads = op.backward(&inputs, &node.value, &g, &needs);
            for (&i, grad) in node.inputs.iter().zip(grads) {
                let Some(grad) = grad else { continue };
                if !self.nodes[i].trainable {
                    continue;
                }
                match &mut adjoints[i] {
                    Some(acc) => *acc += &grad,
                    slot => *slot = Some(grad),
                }
            }
            // interior adjoints are no longer needed; keep the slot empty
        }
        Ok(Gradients { adjoints })
    }
}

impl<T: Real> Ops<T> for Tape<T> {
    type Node = NodeId;

    fn constant(&mut self, value: Array2<T>) -> NodeId {
        self.push(None, Vec::new(), value, false)
    }

    fn param(&mut self, value: Array2<T>) -> NodeId {
        self.push(None, Vec::new(), value, true)
    }

    fn record(&mut self, op: Op, inputs: &[&NodeId]) -> Result<NodeId> {
        let values: Vec<&Array2<T>> = inputs.iter().map(|n| &self.nodes[n.0].value).collect();
        let value = op.forward(&values)?;
        let trainable = inputs.iter().any(|n| self.nodes[n.0].trainable);
        let idx = inputs.iter().map(|n| n.0).collect();
        Ok(self.push(Some(op), idx, value, trainable))
    }

    fn value<'a>(&'a self, node: &'a NodeId) -> &'a Array2<T> {
        &self.nodes[node.0].value
    }
}

/// Adjoints of trainable leaves after a reverse pass.
pub struct Gradients<T> {
    adjoints: Vec<Option<Array2<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Adjoint of `node`, or `None` when the output does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&Array2<T>> {
        self.adjoints.get(node.0).and_then(|a| a.as_ref())
    }

    /// Adjoint of `node`, zero-filled to `shape` when absent.
    pub fn get_or_zero(&self, node: NodeId, shape: (usize, usize)) -> Array2<T> {
        self.get(node).cloned().unwrap_or_else(|| Array2::zeros(shape))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn primitive_values() {
        let mut tape = Tape::<f64>::new();
        let zero = tape.constant(array![[0.0]]);
        let s = tape.record_primitive("sin", &[zero], &[1.0]).unwrap();
        assert_eq!(tape.scalar(&s), 0.0);

        let eye = tape.constant(array![[1., 0., 0., 0., 1., 0., 0., 0., 1.]]);
        let d = tape.record_primitive("det3", &[eye], &[]).unwrap();
        assert_eq!(tape.scalar(&d), 1.0);

        let m2 = tape.constant(array![[-2.0]]);
        let l = tape.record_primitive("leaky", &[m2], &[0.01]).unwrap();
        assert_eq!(tape.scalar(&l), -0.02);
    }

    #[test]
    fn unknown_and_misshapen_ops_are_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Array2::zeros((2, 3)));
        let b = tape.constant(Array2::zeros((3, 2)));
        assert!(matches!(
            tape.record_primitive("softmax", &[a], &[]),
            Err(Error::UnknownOp(_))
        ));
        match tape.record_primitive("add", &[a, b], &[]) {
            Err(Error::Shape { op, shapes }) => {
                assert_eq!(op, "add");
                assert_eq!(shapes, vec![(2, 3), (3, 2)]);
            }
            other => panic!("expected shape error, got {:?}", other.map(|n| n.index())),
        }
        assert!(tape.record_primitive("det3", &[a], &[]).is_err());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(array![[1.0, 2.0, 3.0]]);
        let sq = tape.square(&p).unwrap();
        let s = tape.sum(&sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(p).unwrap(), &array![[2.0, 4.0, 6.0]]);
    }

    #[test]
    fn det_gradient_at_identity_is_identity() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(array![[1., 0., 0., 0., 1., 0., 0., 0., 1.]]);
        let d = tape.det3(&p).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(p).unwrap(), &array![[1., 0., 0., 0., 1., 0., 0., 0., 1.]]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(array![[1.0, 2.0]]);
        let q = tape.square(&p).unwrap();
        assert!(matches!(tape.backward(q), Err(Error::NotScalar((1, 2)))));
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(array![[0.3, -1.2], [2.0, 0.7]]);
        let s = tape.sin(&p, 3.0).unwrap();
        let m = tape.mul(&s, &p).unwrap();
        let out = tape.mean(&m).unwrap();
        let g1 = tape.backward(out).unwrap().get(p).unwrap().clone();
        let g2 = tape.backward(out).unwrap().get(p).unwrap().clone();
        assert_eq!(g1, g2);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(array![[2.0]]);
        let p = tape.param(array![[3.0]]);
        let m = tape.mul(&c, &p).unwrap();
        let g = tape.backward(m).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap()[[0, 0]], 2.0);
    }
}
