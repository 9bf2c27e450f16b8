//! Reverse-mode differentiation over an append-only node arena.
//!
//! Gradients are propagated strictly in reverse node-id order with in-place
//! accumulation, so every backward pass visits nodes in one fixed order and
//! results are reproducible bit for bit.

use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Process-unique identity of a trainable tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// A named trainable tensor. The id survives value updates, so optimizer
/// state and tape bindings can track it across steps.
#[derive(Clone)]
pub struct Parameter<T> {
    id: ParamId,
    value: Tensor<T>,
}

impl<T: Scalar> std::fmt::Debug for Parameter<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

impl<T: Scalar> Parameter<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Parameter {
            id: ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed)),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn set(&mut self, value: Tensor<T>) {
        assert_eq!(
            self.value.shape(),
            value.shape(),
            "parameter update changed shape"
        );
        self.value = value;
    }

    /// Replace the value without a shape check (checkpoint load).
    pub fn replace(&mut self, value: Tensor<T>) {
        self.value = value;
    }
}

/// Visitor over the named parameters of a model component. Names are
/// slash-joined paths, stable across runs; they key checkpoints and
/// optimizer state.
pub trait Params<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Parameter<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Parameter<T>));

    fn named(&self, prefix: &str) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, p| out.push((name, p.value().clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| n += p.value().len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &mut GradSink<T>)>;

struct Node<T> {
    value: Tensor<T>,
    back: Option<BackFn<T>>,
}

/// Accumulates gradients flowing to parent nodes during backward.
pub struct GradSink<'a, T> {
    grads: &'a mut [Option<Tensor<T>>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn add(&mut self, v: Var, g: Tensor<T>) {
        match &mut self.grads[v.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Gradient of the loss with respect to tape nodes, queryable by bound
/// parameter id after the walk finishes.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Grads<T> {
    pub fn of_var(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node[v.0].as_ref()
    }

    /// Gradient for a parameter, summed over every tape use in this pass.
    pub fn of_param(&self, id: ParamId) -> Option<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for &(pid, v) in &self.bindings {
            if pid != id {
                continue;
            }
            if let Some(g) = self.by_node[v.0].as_ref() {
                match &mut acc {
                    Some(a) => a.accumulate(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        acc
    }
}

/// The recording arena. Build one per forward pass; `Var`s index into it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(ParamId, Var)>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A tape that records backward closures (training mode).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            recording: true,
        }
    }

    /// A tape that runs the identical forward arithmetic but stores no
    /// backward closures. Values are bit-identical to the recording tape.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            bindings: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value held at `v` (cheap: shared storage).
    pub fn value(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    pub fn shape_of(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].value.shape().to_vec()
    }

    /// Push a leaf with no gradient flow.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, None)
    }

    /// Leaf for network input data (alias of `constant`, reads better at call
    /// sites).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.constant(value)
    }

    /// Leaf bound to a trainable parameter; its gradient is retrievable from
    /// the `Grads` of this tape by parameter id.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        let v = self.push(p.value().clone(), None);
        if self.recording {
            self.bindings.push((p.id(), v));
        }
        v
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, back: Option<BackFn<T>>) -> Var {
        let back = if self.recording { back } else { None };
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `loss` (seeded with ones). Deterministic: nodes are
    /// processed in strictly decreasing id order.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert!(self.recording, "backward on an inference tape");
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        grads[loss.0] = Some(Tensor::full(&seed_shape, T::one()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(back) = &self.nodes[id].back {
                let mut sink = GradSink { grads: &mut grads };
                back(&g, &mut sink);
            }
            grads[id] = Some(g);
        }
        Grads {
            by_node: grads,
            bindings: self.bindings.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_ids_are_unique() {
        let a = Parameter::new(Tensor::<f32>::zeros(&[2]));
        let b = Parameter::new(Tensor::<f32>::zeros(&[2]));
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn inference_tape_drops_closures_but_keeps_values() {
        let mut t = Tape::<f32>::inference();
        let x = t.input(Tensor::new(&[2], vec![1.0, 2.0]));
        assert_eq!(t.value(x).to_vec(), vec![1.0, 2.0]);
        assert!(!t.is_recording());
    }

    #[test]
    fn param_used_twice_sums_gradients() {
        // loss = sum(p) + sum(p) so dloss/dp = 2 everywhere.
        let p = Parameter::new(Tensor::<f64>::new(&[3], vec![1.0, 2.0, 3.0]));
        let mut t = Tape::new();
        let a = t.param(&p);
        let b = t.param(&p);
        let s1 = t.sum_all(a);
        let s2 = t.sum_all(b);
        let loss = t.add(s1, s2);
        let grads = t.backward(loss);
        let g = grads.of_param(p.id()).unwrap();
        assert_eq!(g.to_vec(), vec![2.0, 2.0, 2.0]);
    }
}
