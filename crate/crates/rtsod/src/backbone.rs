//! Dual-stream hierarchical encoders and top-level semantic fusion.
//!
//! Each modality gets its own four-stage encoder: a strided patch embedding
//! (4x4 stride 4, then 2x2 stride 2 per later stage) followed by one
//! residual mixing block per stage. The stage outputs form a pyramid at
//! strides 4, 8, 16 and 32. The two streams share an architecture but never
//! share weights. `fuse_semantics` combines the two stride-32 feature maps
//! with one cross-attention block (RGB side as queries) and projects the
//! result to the semantic channel width.

use crate::correlate::{attention_with_params, add_attention};
use crate::nn::init::{add_conv, add_linear};
use crate::nn::{Graph, ParamStore, Var};
use rand::Rng;

/// Registers one encoder stream under `prefix` (for example `backbone.rgb`):
/// per stage `{prefix}.stage{i}.embed` (strided), `.mix1` and `.mix2` (3x3).
pub fn register_encoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    prefix: &str,
    in_channels: usize,
    channels: &[usize; 4],
) {
    for (i, &c) in channels.iter().enumerate() {
        let (ci, k) = if i == 0 {
            (in_channels, 4)
        } else {
            (channels[i - 1], 2)
        };
        add_conv(store, rng, &format!("{prefix}.stage{i}.embed"), c, ci, k, k);
        add_conv(store, rng, &format!("{prefix}.stage{i}.mix1"), c, c, 3, 3);
        add_conv(store, rng, &format!("{prefix}.stage{i}.mix2"), c, c, 3, 3);
    }
}

/// Registers the semantic-fusion block: one attention block over the two
/// stride-32 maps plus a channel projection to `semantic_channels`.
pub fn register_fusion<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    c4: usize,
    attention_dim: usize,
    semantic_channels: usize,
) {
    add_attention(store, rng, "fusion.attn", c4, c4, attention_dim);
    add_linear(store, rng, "fusion.proj", attention_dim, semantic_channels, true);
}

fn conv_pair(g: &mut Graph, store: &ParamStore, name: &str) -> (Var, Var) {
    let w = g.named_param(store, &format!("{name}.w"));
    let b = g.named_param(store, &format!("{name}.b"));
    (w, b)
}

/// Residual mixing block `relu(x + conv2(relu(conv1(x))))` at constant
/// channel count and resolution.
fn mix_block(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let (w1, b1) = conv_pair(g, store, &format!("{name}.mix1"));
    let y = g.conv2d(x, w1, Some(b1), 1, 1);
    let y = g.relu(y);
    let (w2, b2) = conv_pair(g, store, &format!("{name}.mix2"));
    let y = g.conv2d(y, w2, Some(b2), 1, 1);
    let s = g.add(x, y);
    g.relu(s)
}

/// Runs one encoder stream over `image` (`[c, h, w]`, both extents divisible
/// by 32) and returns the four pyramid levels, coarsest last.
pub fn encode(g: &mut Graph, store: &ParamStore, prefix: &str, image: Var) -> Vec<Var> {
    let s = g.value(image).shape().to_vec();
    assert_eq!(s.len(), 3, "encoder input must be [c, h, w]");
    assert!(
        s[1] % 32 == 0 && s[2] % 32 == 0,
        "encoder input extents must be divisible by 32, got {}x{}",
        s[1],
        s[2]
    );
    let mut x = image;
    let mut levels = Vec::with_capacity(4);
    for i in 0..4 {
        let name = format!("{prefix}.stage{i}");
        let (we, be) = conv_pair(g, store, &format!("{name}.embed"));
        let stride = if i == 0 { 4 } else { 2 };
        x = g.conv2d(x, we, Some(be), stride, 0);
        x = mix_block(g, store, &name, x);
        levels.push(x);
    }
    levels
}

/// Fuses the two stride-32 feature maps into the semantic feature: one
/// cross-attention block with the RGB side as queries, then a learned
/// channel projection.
pub fn fuse_semantics(g: &mut Graph, store: &ParamStore, f_rgb4: Var, f_t4: Var) -> Var {
    let s = g.value(f_rgb4).shape().to_vec();
    assert_eq!(
        g.value(f_t4).shape(),
        s.as_slice(),
        "fusion inputs must share shape"
    );
    let (h, w) = (s[1], s[2]);
    let attended = attention_with_params(g, store, "fusion.attn", f_rgb4, f_t4);
    let tokens = g.chw_to_tokens(attended);
    let pw = g.named_param(store, "fusion.proj.w");
    let pb = g.named_param(store, "fusion.proj.b");
    let projected = g.linear(tokens, pw, Some(pb));
    g.tokens_to_chw(projected, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::GradCheck;
    use crate::nn::{tensor, Arr};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_store(seed: u64, channels: &[usize; 4]) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_encoder(&mut store, &mut rng, "backbone.rgb", 3, channels);
        register_encoder(&mut store, &mut rng, "backbone.t", 1, channels);
        register_fusion(&mut store, &mut rng, channels[3], channels[3], 6);
        store
    }

    #[test]
    fn pyramid_sizes_follow_the_stride_ladder() {
        let store = toy_store(0, &[2, 3, 4, 5]);
        let mut g = Graph::new();
        let img = g.constant(Arr::zeros(IxDyn(&[3, 64, 96])));
        let levels = encode(&mut g, &store, "backbone.rgb", img);
        assert_eq!(levels.len(), 4);
        let want = [
            vec![2, 16, 24],
            vec![3, 8, 12],
            vec![4, 4, 6],
            vec![5, 2, 3],
        ];
        for (lvl, shape) in levels.iter().zip(&want) {
            assert_eq!(g.value(*lvl).shape(), shape.as_slice());
            assert!(g.value(*lvl).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn encoding_is_deterministic_given_parameters() {
        let store = toy_store(1, &[2, 3, 4, 5]);
        let img_data: Vec<f64> = (0..3 * 32 * 32).map(|i| (i as f64 * 0.01).sin()).collect();
        let run = || -> Vec<Vec<f64>> {
            let mut g = Graph::new();
            let img = g.constant(tensor(&[3, 32, 32], img_data.clone()));
            encode(&mut g, &store, "backbone.rgb", img)
                .into_iter()
                .map(|v| g.value(v).as_slice().unwrap().to_vec())
                .collect()
        };
        let (a, b) = (run(), run());
        for (la, lb) in a.iter().zip(&b) {
            assert!(la.iter().zip(lb).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn streams_have_independent_weights() {
        let store = toy_store(2, &[2, 3, 4, 5]);
        let img_data: Vec<f64> = (0..32 * 32).map(|i| (i as f64 * 0.02).cos()).collect();
        let mut g = Graph::new();
        // Same single-channel content through both streams; the thermal
        // stream takes 1 channel natively, the RGB stream sees it stacked.
        let gray = tensor(&[1, 32, 32], img_data.clone());
        let rgb = tensor(&[3, 32, 32], [&img_data[..], &img_data[..], &img_data[..]].concat());
        let ti = g.constant(gray);
        let ri = g.constant(rgb);
        let lt = encode(&mut g, &store, "backbone.t", ti);
        let lr = encode(&mut g, &store, "backbone.rgb", ri);
        let a = g.value(lt[3]).as_slice().unwrap().to_vec();
        let b = g.value(lr[3]).as_slice().unwrap().to_vec();
        assert_ne!(a, b, "streams must not be weight-tied");
    }

    #[test]
    fn fusion_output_shape_and_sensitivity_to_both_inputs() {
        let store = toy_store(3, &[2, 3, 4, 5]);
        let base: Vec<f64> = (0..5 * 2 * 2).map(|i| (i as f64 * 0.13).sin()).collect();
        let run = |rgb_bump: f64, t_bump: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let mut r = base.clone();
            r[0] += rgb_bump;
            let mut t = base.clone();
            t[7] += t_bump;
            let fr = g.constant(tensor(&[5, 2, 2], r));
            let ft = g.constant(tensor(&[5, 2, 2], t));
            let fs = fuse_semantics(&mut g, &store, fr, ft);
            assert_eq!(g.value(fs).shape(), &[6, 2, 2]);
            g.value(fs).as_slice().unwrap().to_vec()
        };
        let baseline = run(0.0, 0.0);
        assert_ne!(baseline, run(1e-2, 0.0), "fusion ignores its RGB input");
        assert_ne!(baseline, run(0.0, 1e-2), "fusion ignores its thermal input");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut store = toy_store(4, &[2, 3, 4, 5]);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let rgb_params: Vec<&str> = names
            .iter()
            .filter(|n| n.starts_with("backbone.rgb."))
            .map(String::as_str)
            .collect();
        let img_data: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            (0..3 * 32 * 32).map(|_| rng.random_range(0.0..1.0)).collect()
        };
        let check = GradCheck {
            eps: 1e-6,
            max_entries_per_param: 8,
        };
        let worst = check.check(&mut store, &rgb_params, |g, store| {
            let img = g.constant(tensor(&[3, 32, 32], img_data.clone()));
            let levels = encode(g, store, "backbone.rgb", img);
            // Squared mean keeps the loss curved so the probe is not in the
            // linear regime where errors hide.
            let m = g.mean_all(levels[3]);
            g.mul(m, m)
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let mut store = toy_store(5, &[2, 3, 4, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        store.add("probe.r4", crate::nn::init::he_normal(&mut rng, &[5, 2, 2], 5));
        store.add("probe.t4", crate::nn::init::he_normal(&mut rng, &[5, 2, 2], 5));
        let params = [
            "fusion.attn.q.w",
            "fusion.attn.k.w",
            "fusion.attn.v.w",
            "fusion.proj.w",
            "fusion.proj.b",
            "probe.r4",
            "probe.t4",
        ];
        let check = GradCheck::default();
        let worst = check.check(&mut store, &params, |g, store| {
            let fr = g.named_param(store, "probe.r4");
            let ft = g.named_param(store, "probe.t4");
            let fs = fuse_semantics(g, store, fr, ft);
            let m = g.mean_all(fs);
            g.mul(m, m)
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
