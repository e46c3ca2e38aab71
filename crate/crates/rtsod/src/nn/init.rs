//! Parameter creation. All weights are registered in a [`ParamStore`] in
//! construction order, which fixes the checkpoint layout, and are drawn from
//! a caller-supplied RNG so runs are reproducible from the seed alone.

use super::graph::Arr;
use super::params::ParamStore;
use ndarray::IxDyn;
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// He-normal tensor: `N(0, sqrt(2 / fan_in))`.
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Arr {
    assert!(fan_in > 0);
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Arr::from_shape_vec(IxDyn(shape), data).unwrap()
}

/// Registers a convolution weight `name.w [co, ci, kh, kw]` (He-normal over
/// the receptive field) and bias `name.b [co]` (zeros).
pub fn add_conv<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) {
    let w = he_normal(rng, &[co, ci, kh, kw], ci * kh * kw);
    store.add(&format!("{name}.w"), w);
    store.add(&format!("{name}.b"), super::zeros(&[co]));
}

/// Registers a linear weight `name.w [in, out]` (He-normal, matching the
/// token-matrix layout of [`Graph::linear`]) and, if requested, bias
/// `name.b [out]` (zeros).
///
/// [`Graph::linear`]: super::graph::Graph
pub fn add_linear<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) {
    let w = he_normal(rng, &[in_dim, out_dim], in_dim);
    store.add(&format!("{name}.w"), w);
    if bias {
        store.add(&format!("{name}.b"), super::zeros(&[out_dim]));
    }
}

/// Registers a zero-initialized linear layer. Used where a branch must start
/// as an exact identity or no-op contribution.
pub fn add_linear_zero(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
    bias: bool,
) {
    store.add(&format!("{name}.w"), super::zeros(&[in_dim, out_dim]));
    if bias {
        store.add(&format!("{name}.b"), super::zeros(&[out_dim]));
    }
}
