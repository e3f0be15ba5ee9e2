//! Recording tape for reverse-mode differentiation. Tapes form a
//! thread-local stack; ops record onto the innermost active tape, which
//! lets a discriminator update run on its own short-lived tape in the
//! middle of a generator-side recording.

use super::ops::Op;
use super::vjp;
use super::Tensor;
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::HashMap;

pub(super) enum NodeKind {
    Leaf,
    Computed(Op),
}

pub(super) struct Node {
    pub kind: NodeKind,
    /// (node id on this tape if tracked, saved value) per input.
    pub inputs: Vec<(Option<usize>, Tensor)>,
    pub output: Tensor,
}

#[derive(Default)]
struct TapeData {
    nodes: Vec<Node>,
    /// tensor id → node id, for tensors produced or registered on this tape.
    index: HashMap<u64, usize>,
}

impl TapeData {
    fn leaf(&mut self, t: &Tensor) -> usize {
        if let Some(&nid) = self.index.get(&t.id()) {
            return nid;
        }
        let nid = self.nodes.len();
        self.nodes.push(Node {
            kind: NodeKind::Leaf,
            inputs: Vec::new(),
            output: t.clone(),
        });
        self.index.insert(t.id(), nid);
        nid
    }
}

thread_local! {
    static STACK: RefCell<Vec<TapeData>> = const { RefCell::new(Vec::new()) };
}

pub(super) fn recording_active() -> bool {
    STACK.with(|s| !s.borrow().is_empty())
}

pub(super) fn record(op: Op, inputs: &[&Tensor], output: &Tensor) {
    STACK.with(|s| {
        let mut stack = s.borrow_mut();
        let tape = stack.last_mut().expect("record without active tape");
        let slots = inputs
            .iter()
            .map(|t| {
                let nid = match tape.index.get(&t.id()) {
                    Some(&nid) => Some(nid),
                    None if t.requires_grad() => Some(tape.leaf(t)),
                    None => None,
                };
                (nid, (*t).clone())
            })
            .collect();
        let nid = tape.nodes.len();
        tape.nodes.push(Node {
            kind: NodeKind::Computed(op),
            inputs: slots,
            output: output.clone(),
        });
        tape.index.insert(output.id(), nid);
    });
}

/// Gradients of one backward pass, keyed by leaf tensor identity.
pub struct GradMap {
    grads: HashMap<u64, Tensor>,
}

impl GradMap {
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.grads.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// RAII guard for one recording scope. `begin` pushes a fresh tape;
/// `backward` consumes the guard, pops the tape, and returns leaf
/// gradients. Dropping without backward simply discards the recording.
pub struct Tape {
    depth: usize,
    // Tapes are thread-confined by construction.
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Tape {
    #[allow(clippy::new_without_default)]
    pub fn begin() -> Tape {
        let depth = STACK.with(|s| {
            let mut stack = s.borrow_mut();
            stack.push(TapeData::default());
            stack.len()
        });
        Tape {
            depth,
            _not_send: std::marker::PhantomData,
        }
    }

    fn pop(&self) -> TapeData {
        STACK.with(|s| {
            let mut stack = s.borrow_mut();
            assert_eq!(
                stack.len(),
                self.depth,
                "tape scopes must close innermost-first"
            );
            stack.pop().expect("tape stack empty")
        })
    }

    /// Reverse sweep from a [1]-shaped loss. Gradients accumulate by
    /// summation in fixed recording order, so results are bit-stable.
    pub fn backward(self, loss: &Tensor) -> Result<GradMap> {
        let data = self.pop();
        std::mem::forget(self);
        if loss.numel() != 1 {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: format!("loss must be a scalar, got shape {:?}", loss.shape()),
            });
        }
        let Some(&loss_nid) = data.index.get(&loss.id()) else {
            return Err(Error::InvalidArg {
                op: "backward",
                msg: "loss is not on this tape (detached or recorded elsewhere)".into(),
            });
        };

        let mut grads: Vec<Option<Vec<f64>>> = (0..data.nodes.len()).map(|_| None).collect();
        grads[loss_nid] = Some(vec![1.0]);

        for nid in (0..=loss_nid).rev() {
            let Some(gout) = grads[nid].take() else { continue };
            let node = &data.nodes[nid];
            let op = match &node.kind {
                NodeKind::Leaf => {
                    grads[nid] = Some(gout);
                    continue;
                }
                NodeKind::Computed(op) => op,
            };
            let want: Vec<bool> = node.inputs.iter().map(|(nid, _)| nid.is_some()).collect();
            let input_vals: Vec<&Tensor> = node.inputs.iter().map(|(_, t)| t).collect();
            let input_grads = vjp::vjp(op, &input_vals, &node.output, &gout, &want)?;
            for ((slot, _), ig) in node.inputs.iter().zip(input_grads) {
                let (Some(pid), Some(ig)) = (slot, ig) else { continue };
                match &mut grads[*pid] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&ig) {
                            *a += b;
                        }
                    }
                    None => grads[*pid] = Some(ig),
                }
            }
        }

        let mut out = HashMap::new();
        for (nid, node) in data.nodes.iter().enumerate() {
            if let (NodeKind::Leaf, Some(g)) = (&node.kind, grads[nid].take()) {
                out.insert(
                    node.output.id(),
                    Tensor::from_vec(g, node.output.shape()),
                );
            }
        }
        Ok(GradMap { grads: out })
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        let _ = self.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::super::Tensor;
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 3.0], &[3]).tracked();
        let tape = Tape::begin();
        let loss = x.mul(&x).sum_all();
        let g = tape.backward(&loss).unwrap();
        let gx = g.get(&x).unwrap();
        assert_eq!(gx.data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn tanh_at_zero() {
        let x = Tensor::zeros(&[1]).tracked();
        let tape = Tape::begin();
        let loss = x.tanh().sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::from_vec(vec![2.0], &[1]).tracked();
        let tape = Tape::begin();
        // x*x + 3x: grad 2x + 3 = 7
        let loss = x.mul(&x).add(&x.scale(3.0)).sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::ones(&[2]).tracked();
        let tape = Tape::begin();
        let y = x.mul(&x);
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn detached_loss_rejected() {
        let x = Tensor::ones(&[2]).tracked();
        let tape = Tape::begin();
        let y = x.mul(&x).sum_all().detach();
        assert!(tape.backward(&y).is_err());
    }

    #[test]
    fn nested_tape_isolates_outer_graph() {
        let w = Tensor::from_vec(vec![3.0], &[1]).tracked();
        let outer = Tape::begin();
        let a = w.mul(&w); // on outer tape
        {
            let inner = Tape::begin();
            let b = w.scale(5.0);
            let gi = inner.backward(&b.sum_all()).unwrap();
            assert_eq!(gi.get(&w).unwrap().data(), &[5.0]);
        }
        let g = outer.backward(&a.sum_all()).unwrap();
        assert_eq!(g.get(&w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn no_tape_means_no_tracking() {
        let x = Tensor::ones(&[2]).tracked();
        let y = x.mul(&x);
        assert!(!y.requires_grad());
    }

    #[test]
    fn constant_inputs_get_no_gradient() {
        let x = Tensor::ones(&[2]).tracked();
        let c = Tensor::from_vec(vec![4.0, 5.0], &[2]);
        let tape = Tape::begin();
        let loss = x.mul(&c).sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[4.0, 5.0]);
        assert!(g.get(&c).is_none());
        assert_eq!(g.len(), 1);
    }
}
