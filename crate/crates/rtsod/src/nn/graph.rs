//! The autodiff tape: eager values plus recorded backward closures.

use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

pub type Arr = ArrayD<f64>;

/// Handle to a value on the tape.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&Arr, &[Arc<Arr>], &mut [Option<Arr>])>;

struct Node {
    backward: Option<BackFn>,
}

pub struct Graph {
    values: Vec<Arc<Arr>>,
    nodes: Vec<Node>,
    requires: Vec<bool>,
    /// (value index, parameter-store index) for every registered parameter.
    param_slots: Vec<(usize, usize)>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            nodes: Vec::new(),
            requires: Vec::new(),
            param_slots: Vec::new(),
        }
    }

    fn push(&mut self, value: Arc<Arr>, requires: bool, backward: Option<BackFn>) -> Var {
        self.values.push(value);
        self.requires.push(requires);
        self.nodes.push(Node { backward });
        Var(self.values.len() - 1)
    }

    /// A value that never receives gradients (inputs, masks, targets).
    pub fn constant(&mut self, a: Arr) -> Var {
        self.push(Arc::new(a), false, None)
    }

    /// Leaf that accumulates a gradient; used directly in tests and through
    /// [`Graph::param`] for trainable weights.
    pub fn leaf(&mut self, a: Arr, requires_grad: bool) -> Var {
        self.push(Arc::new(a), requires_grad, None)
    }

    /// Registers a parameter from the store. Frozen parameters join the tape
    /// as plain constants so no gradient work is spent on them; gradients
    /// still flow *through* ops that consume them.
    pub fn param(&mut self, store: &super::params::ParamStore, idx: usize) -> Var {
        let requires = !store.is_frozen(idx);
        let v = self.push(store.value_arc(idx), requires, None);
        if requires {
            self.param_slots.push((v.0, idx));
        }
        v
    }

    /// [`Graph::param`] looked up by name.
    pub fn named_param(&mut self, store: &super::params::ParamStore, name: &str) -> Var {
        self.param(store, store.idx(name))
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.values[v.0]
    }

    pub(crate) fn node_count(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Records an op node. `backward` receives (output grad, all values,
    /// all grad slots) and must accumulate into its inputs' slots.
    pub(crate) fn op(&mut self, out: Arr, inputs: &[Var], backward: BackFn) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let back = if requires { Some(backward) } else { None };
        self.push(Arc::new(out), requires, back)
    }

    /// Reverse sweep from a scalar (shape `[1]`) loss.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert_eq!(
            self.values[loss.0].len(),
            1,
            "backward expects a scalar loss"
        );
        let mut grads: Vec<Option<Arr>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Arr::ones(IxDyn(&[1])));
        for idx in (0..self.nodes.len()).rev() {
            if grads[idx].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[idx].backward {
                let g = grads[idx].take().unwrap();
                back(&g, &self.values, &mut grads);
                // Interior gradients are not needed after their node runs;
                // leaves (no backward fn) keep theirs for collection.
            } else if self.requires[idx] {
                // Leaf with gradient: keep it.
            } else {
                grads[idx] = None;
            }
        }
        Gradients { by_value: grads }
    }

    /// Sums leaf gradients per parameter-store slot (a parameter referenced
    /// several times on one tape, e.g. by a siamese encoder, accumulates).
    pub fn param_grads(&self, grads: &Gradients, store_len: usize) -> Vec<Option<Arr>> {
        let mut out: Vec<Option<Arr>> = (0..store_len).map(|_| None).collect();
        for &(value_idx, store_idx) in &self.param_slots {
            if let Some(g) = &grads.by_value[value_idx] {
                match &mut out[store_idx] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Gradient buffer produced by [`Graph::backward`].
pub struct Gradients {
    pub(crate) by_value: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_value[v.0].as_ref()
    }
}

/// Accumulates `g` into an optional slot.
pub(crate) fn accumulate(slot: &mut Option<Arr>, g: Arr) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Per-store-slot gradient accumulation across batch samples.
pub fn accumulate_param_grads(dst: &mut Vec<Option<Arr>>, src: Vec<Option<Arr>>) {
    if dst.is_empty() {
        *dst = src;
        return;
    }
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        if let Some(g) = s {
            match d {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        }
    }
}

/// Scales every present gradient, e.g. by 1/batch.
pub fn scale_param_grads(grads: &mut [Option<Arr>], k: f64) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * k);
    }
}
