//! Central-difference verification of analytic gradients.

use super::graph::Graph;
use super::params::ParamStore;
use super::Var;

/// `|a - b| / max(|a|, |b|, 1e-5)`; the floor keeps near-zero pairs from
/// inflating the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Finite-difference settings. `max_entries_per_param` bounds the probe
/// count on large tensors; probed indices are evenly strided so every part
/// of the tensor is exercised.
pub struct GradCheck {
    pub eps: f64,
    pub max_entries_per_param: usize,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { eps: 1e-5, max_entries_per_param: 48 }
    }
}

impl GradCheck {
    /// Compares analytic gradients of the scalar built by `build` against
    /// central differences for every named parameter. Returns the worst
    /// relative error observed. `build` must be a pure function of the
    /// store contents.
    pub fn check<F>(&self, store: &mut ParamStore, params: &[&str], build: F) -> f64
    where
        F: Fn(&mut Graph, &ParamStore) -> Var,
    {
        let mut graph = Graph::new();
        let loss = build(&mut graph, store);
        let grads = graph.backward(loss);
        let pgrads = graph.param_grads(&grads, store.len());
        let mut worst: f64 = 0.0;
        for &name in params {
            let idx = store.idx(name);
            assert!(!store.is_frozen(idx), "gradcheck target {name} is frozen");
            let len = store.value(idx).len();
            let stride = len.div_ceil(self.max_entries_per_param).max(1);
            for j in (0..len).step_by(stride) {
                let orig = store.value(idx).as_slice().unwrap()[j];
                let lp = self.eval_at(store, idx, j, orig + self.eps, &build);
                let lm = self.eval_at(store, idx, j, orig - self.eps, &build);
                store.value_mut(idx).as_slice_mut().unwrap()[j] = orig;
                let numeric = (lp - lm) / (2.0 * self.eps);
                let analytic = pgrads[idx]
                    .as_ref()
                    .map(|g| g.as_slice().unwrap()[j])
                    .unwrap_or(0.0);
                let err = relative_error(analytic, numeric);
                if err > worst {
                    worst = err;
                }
            }
        }
        worst
    }

    fn eval_at<F>(&self, store: &mut ParamStore, idx: usize, j: usize, v: f64, build: &F) -> f64
    where
        F: Fn(&mut Graph, &ParamStore) -> Var,
    {
        store.value_mut(idx).as_slice_mut().unwrap()[j] = v;
        let mut graph = Graph::new();
        let loss = build(&mut graph, store);
        let out = graph.value(loss).as_slice().unwrap();
        assert_eq!(out.len(), 1, "gradcheck target must be scalar");
        out[0]
    }
}
