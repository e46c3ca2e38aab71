//! Cross- and self-attention correlation between the two modality streams.
//!
//! One attention block underlies everything here: queries come from the
//! first argument, keys and values from the second, and the block output is
//! `softmax(Q Kᵀ / √d_k) V + Q`. The inter-modal step masks the RGB queries
//! with the warped-thermal region map and the semantic gate before attending
//! over the *unwarped* thermal features; the intra-modal step self-attends
//! over the sum of the RGB features and the inter-modal result so that
//! locally discovered correlation spreads across the whole map.

use crate::nn::init::add_linear;
use crate::nn::{Arr, Graph, ParamStore, Var};
use rand::Rng;

/// Attention at levels finer than this token extent runs on average-pooled
/// queries/keys/values and the output is upsampled back; quadratic cost on
/// a 96x96 grid would dominate a training step otherwise.
pub const TOKEN_CAP: usize = 24;

/// Registers the three projection weights of one attention block:
/// `{name}.q.w [c_q, d_k]`, `{name}.k.w [c_kv, d_k]`, `{name}.v.w [c_kv, d_k]`.
/// No biases; the block's only affine freedom is the projections.
pub fn add_attention<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    c_q: usize,
    c_kv: usize,
    d_k: usize,
) {
    add_linear(store, rng, &format!("{name}.q"), c_q, d_k, false);
    add_linear(store, rng, &format!("{name}.k"), c_kv, d_k, false);
    add_linear(store, rng, &format!("{name}.v"), c_kv, d_k, false);
}

/// Single-head attention over spatial maps, also returning the softmax
/// weight matrix `[n_q, n_kv]` so callers can assert row-stochasticity.
///
/// `q_chw` is `[c_q, h, w]`, `kv_chw` is `[c_kv, h', w']`; the output is
/// `[d_k, h, w]` where `d_k` is the projections' output width.
pub fn attention_correlate_with_weights(
    g: &mut Graph,
    q_chw: Var,
    kv_chw: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> (Var, Var) {
    let sq = g.value(q_chw).shape().to_vec();
    let skv = g.value(kv_chw).shape().to_vec();
    assert_eq!(sq.len(), 3, "attention query input must be [c, h, w]");
    assert_eq!(skv.len(), 3, "attention kv input must be [c, h, w]");
    let (h, w) = (sq[1], sq[2]);
    let d_k = g.value(wq).shape()[1];
    assert_eq!(g.value(wk).shape()[1], d_k, "k projection width");
    assert_eq!(g.value(wv).shape()[1], d_k, "v projection width");

    let qt = g.chw_to_tokens(q_chw);
    let kvt = g.chw_to_tokens(kv_chw);
    let q = g.linear(qt, wq, None);
    let k = g.linear(kvt, wk, None);
    let v = g.linear(kvt, wv, None);
    let scores = g.matmul_nt(q, k);
    let scores = g.scale(scores, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax_rows(scores);
    let mixed = g.matmul(weights, v);
    let out = g.add(mixed, q);
    (g.tokens_to_chw(out, h, w), weights)
}

/// See [`attention_correlate_with_weights`]; discards the weight matrix.
pub fn attention_correlate(
    g: &mut Graph,
    q_chw: Var,
    kv_chw: Var,
    wq: Var,
    wk: Var,
    wv: Var,
) -> Var {
    attention_correlate_with_weights(g, q_chw, kv_chw, wq, wk, wv).0
}

/// Attention using the registered block `{name}.{q,k,v}.w`.
pub fn attention_with_params(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    q_chw: Var,
    kv_chw: Var,
) -> Var {
    let wq = g.named_param(store, &format!("{name}.q.w"));
    let wk = g.named_param(store, &format!("{name}.k.w"));
    let wv = g.named_param(store, &format!("{name}.v.w"));
    attention_correlate(g, q_chw, kv_chw, wq, wk, wv)
}

/// Smallest integer factor dividing both extents that brings them within
/// `cap` tokens per side. Falls back to the full extent (a single token) if
/// nothing smaller divides evenly.
fn pool_factor(h: usize, w: usize, cap: usize) -> usize {
    for f in 1..=h.max(w) {
        if h % f == 0 && w % f == 0 && h / f <= cap && w / f <= cap {
            return f;
        }
    }
    h.max(w)
}

/// Attention with the [`TOKEN_CAP`] applied: inputs are average-pooled to at
/// most `cap` tokens per side, attended, and the output is bilinearly
/// resized back to the query's resolution.
fn capped_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    q_chw: Var,
    kv_chw: Var,
    cap: usize,
) -> Var {
    let s = g.value(q_chw).shape().to_vec();
    let (h, w) = (s[1], s[2]);
    let f = pool_factor(h, w, cap);
    if f == 1 {
        return attention_with_params(g, store, name, q_chw, kv_chw);
    }
    let qp = g.avg_pool(q_chw, f);
    let kvp = g.avg_pool(kv_chw, f);
    let out = attention_with_params(g, store, name, qp, kvp);
    g.bilinear_resize(out, h, w)
}

/// Registers the per-level attention blocks: each pyramid level gets an
/// independent inter-modal and intra-modal block with `d_k` equal to the
/// level's channel count (so the residual inside the block type-checks).
pub fn register_correlation<R: Rng>(store: &mut ParamStore, rng: &mut R, channels: &[usize; 4]) {
    for (i, &c) in channels.iter().enumerate() {
        add_attention(store, rng, &format!("correlate.level{i}.inter"), c, c, c);
        add_attention(store, rng, &format!("correlate.level{i}.intra"), c, c, c);
    }
}

/// Single-channel region map: grayscale of the warped thermal image, zeroed
/// where the warp sampled out of bounds, resized to a pyramid level's shape.
/// Differentiable through the warped intensities (and hence the homography);
/// the validity mask enters as a constant.
pub fn region_map(g: &mut Graph, warped_t: Var, valid: &Arr, lh: usize, lw: usize) -> Var {
    let gray = g.channel_mean(warped_t);
    let mask = g.constant(valid.clone());
    let masked = g.mul(gray, mask);
    g.bilinear_resize(masked, lh, lw)
}

/// Single-channel semantic gate `sigmoid(channel mean of f_s)` resized to a
/// level's shape. Broadcast over the RGB channels by the caller.
pub fn semantic_gate_map(g: &mut Graph, f_s: Var, lh: usize, lw: usize) -> Var {
    let pooled = g.channel_mean(f_s);
    let gate = g.sigmoid(pooled);
    g.bilinear_resize(gate, lh, lw)
}

/// Inter-modal correlation at one level: RGB features masked by the region
/// map and (optionally) the semantic gate form the queries; the unwarped
/// thermal features supply keys and values.
pub fn inter_modal_correlate(
    g: &mut Graph,
    store: &ParamStore,
    level: usize,
    f_rgb: Var,
    f_t: Var,
    map_i: Var,
    gate_i: Option<Var>,
) -> Var {
    let mut q = g.mul_broadcast_c(f_rgb, map_i);
    if let Some(gate) = gate_i {
        q = g.mul_broadcast_c(q, gate);
    }
    let name = format!("correlate.level{level}.inter");
    capped_attention(g, store, &name, q, f_t, TOKEN_CAP)
}

/// Intra-modal correlation at one level: self-attention over the sum of the
/// RGB features and the inter-modal result.
pub fn intra_modal_correlate(
    g: &mut Graph,
    store: &ParamStore,
    level: usize,
    f_rgb: Var,
    f_inter: Var,
) -> Var {
    let x = g.add(f_rgb, f_inter);
    let name = format!("correlate.level{level}.intra");
    capped_attention(g, store, &name, x, x, TOKEN_CAP)
}
