//! AdamW with decoupled weight decay.

use super::graph::Arr;
use super::params::ParamStore;

/// First-moment decay.
const BETA1: f64 = 0.9;
/// Second-moment decay.
const BETA2: f64 = 0.999;
/// Denominator stabilizer.
const EPS: f64 = 1e-8;

/// AdamW over every parameter of a store. Moment buffers are allocated for
/// all parameters up front so optimizer state round-trips through
/// checkpoints independently of which parameters received gradients.
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = (0..store.len())
            .map(|i| vec![0.0; store.value(i).len()])
            .collect();
        let v = (0..store.len())
            .map(|i| vec![0.0; store.value(i).len()])
            .collect();
        AdamW { lr, weight_decay, t: 0, m, v }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update. Frozen parameters and parameters without a
    /// gradient this step are left untouched (their moments included); the
    /// shared step counter advances once per call.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Arr>]) {
        assert_eq!(grads.len(), store.len());
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for i in 0..store.len() {
            if store.is_frozen(i) {
                continue;
            }
            let Some(g) = &grads[i] else { continue };
            let g = g.as_slice().expect("contiguous gradient");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            assert_eq!(g.len(), m.len());
            let p = store.value_mut(i);
            let pv = p.as_slice_mut().expect("contiguous parameter");
            for j in 0..g.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                pv[j] -= self.lr * (mhat / (vhat.sqrt() + EPS) + self.weight_decay * pv[j]);
            }
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn moments(&self, i: usize) -> (&[f64], &[f64]) {
        (&self.m[i], &self.v[i])
    }

    /// Restores optimizer state captured by a checkpoint. Buffer lengths
    /// must match the store this optimizer was built for.
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len(), "moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "moment count mismatch");
        for (a, b) in m.iter().zip(&self.m) {
            assert_eq!(a.len(), b.len(), "moment length mismatch");
        }
        for (a, b) in v.iter().zip(&self.v) {
            assert_eq!(a.len(), b.len(), "moment length mismatch");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
