//! Top-down decoder from the correlated pyramid to a saliency map.
//!
//! Every level is 1x1-projected to a common working width; decoding starts
//! at the coarsest level and repeatedly upsamples 2x, adds the next finer
//! projected skip, and applies one residual mixing block. A single-channel
//! head at stride 4 and a final 4x upsample produce logits at the input
//! resolution.

use crate::nn::init::add_conv;
use crate::nn::{Graph, ParamStore, Var};
use rand::Rng;

/// Registers the decoder under `decoder.`: per-level 1x1 projections, one
/// mixing block per level, and the 1-channel head.
pub fn register_decoder<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    channels: &[usize; 4],
    width: usize,
) {
    for (i, &c) in channels.iter().enumerate() {
        add_conv(store, rng, &format!("decoder.proj{i}"), width, c, 1, 1);
    }
    for i in 0..4 {
        add_conv(store, rng, &format!("decoder.mix{i}.conv1"), width, width, 3, 3);
        add_conv(store, rng, &format!("decoder.mix{i}.conv2"), width, width, 3, 3);
    }
    add_conv(store, rng, "decoder.head", 1, width, 1, 1);
}

pub struct SaliencyPrediction {
    /// `[1, H, W]` at the input resolution.
    pub logits: Var,
    /// `sigmoid(logits)`.
    pub prob: Var,
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, pad: usize) -> Var {
    let w = g.named_param(store, &format!("{name}.w"));
    let b = g.named_param(store, &format!("{name}.b"));
    g.conv2d(x, w, Some(b), 1, pad)
}

fn mix(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let y = conv(g, store, &format!("{name}.conv1"), x, 1);
    let y = g.relu(y);
    let y = conv(g, store, &format!("{name}.conv2"), y, 1);
    let s = g.add(x, y);
    g.relu(s)
}

/// Decodes the four correlated feature maps (finest first, strides 4, 8,
/// 16, 32) into a saliency prediction at `4 * levels[0]`'s resolution.
pub fn decode(g: &mut Graph, store: &ParamStore, levels: &[Var]) -> SaliencyPrediction {
    assert_eq!(levels.len(), 4, "decoder expects a 4-level pyramid");
    let mut x = conv(g, store, "decoder.proj3", levels[3], 0);
    x = mix(g, store, "decoder.mix3", x);
    for i in (0..3).rev() {
        let s = g.value(levels[i]).shape().to_vec();
        x = g.bilinear_resize(x, s[1], s[2]);
        let skip = conv(g, store, &format!("decoder.proj{i}"), levels[i], 0);
        x = g.add(x, skip);
        x = mix(g, store, &format!("decoder.mix{i}"), x);
    }
    let logits_s4 = conv(g, store, "decoder.head", x, 0);
    let s = g.value(logits_s4).shape().to_vec();
    let logits = g.bilinear_resize(logits_s4, s[1] * 4, s[2] * 4);
    let prob = g.sigmoid(logits);
    SaliencyPrediction { logits, prob }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::GradCheck;
    use crate::nn::{tensor, Arr};
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CH: [usize; 4] = [2, 3, 4, 5];

    fn store_with(seed: u64, width: usize) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_decoder(&mut store, &mut rng, &CH, width);
        store
    }

    fn pyramid(g: &mut Graph, base: usize, fill: impl Fn(usize, usize) -> f64) -> Vec<Var> {
        (0..4)
            .map(|i| {
                let side = base >> i;
                let n = CH[i] * side * side;
                let data: Vec<f64> = (0..n).map(|j| fill(i, j)).collect();
                g.constant(tensor(&[CH[i], side, side], data))
            })
            .collect()
    }

    #[test]
    fn output_resolution_matches_the_input_frame() {
        let store = store_with(0, 6);
        let mut g = Graph::new();
        let levels = pyramid(&mut g, 16, |i, j| ((i * 31 + j) as f64 * 0.13).sin());
        let pred = decode(&mut g, &store, &levels);
        // Finest level has stride 4, so a 16-cell level implies a 64px frame.
        assert_eq!(g.value(pred.logits).shape(), &[1, 64, 64]);
        assert_eq!(g.value(pred.prob).shape(), &[1, 64, 64]);
        assert!(g
            .value(pred.prob)
            .iter()
            .all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn zero_parameters_with_head_bias_give_a_constant_map() {
        let mut store = store_with(1, 6);
        for i in 0..store.len() {
            for v in store.value_mut(i).iter_mut() {
                *v = 0.0;
            }
        }
        let hb = store.idx("decoder.head.b");
        store.value_mut(hb)[[0]] = 0.7;
        let mut g = Graph::new();
        let levels = pyramid(&mut g, 8, |i, j| ((i + j) as f64 * 0.7).cos());
        let pred = decode(&mut g, &store, &levels);
        for &v in g.value(pred.logits).iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn every_level_influences_the_output() {
        let store = store_with(2, 6);
        for probe in 0..4 {
            let run = |bump: f64| -> f64 {
                let mut g = Graph::new();
                let levels = pyramid(&mut g, 8, |i, j| {
                    let base = ((i * 17 + j) as f64 * 0.29).sin();
                    if i == probe && j == 0 {
                        base + bump
                    } else {
                        base
                    }
                });
                let pred = decode(&mut g, &store, &levels);
                let m = g.mean_all(pred.logits);
                g.value(m)[[0]]
            };
            assert!(
                (run(0.0) - run(0.05)).abs() > 1e-12,
                "level {probe} is disconnected from the output"
            );
        }
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let mut store = store_with(3, 4);
        let names: Vec<String> = store.names().map(str::to_string).collect();
        let params: Vec<&str> = names.iter().map(String::as_str).collect();
        let check = GradCheck {
            eps: 1e-6,
            max_entries_per_param: 6,
        };
        let worst = check.check(&mut store, &params, |g, store| {
            let levels = pyramid(g, 8, |i, j| ((i * 13 + j) as f64 * 0.41).sin());
            let pred = decode(g, store, &levels);
            let m = g.mean_all(pred.logits);
            g.mul(m, m)
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn loss_matches_the_hand_computed_bce_dice_example() {
        let mut g = Graph::new();
        let p = g.constant(Arr::from_elem(IxDyn(&[1, 2, 2]), 0.5));
        let gt = tensor(&[1, 2, 2], vec![1.0, 1.0, 0.0, 0.0]);
        let loss = g.bce_dice_loss(p, &gt, 1.0, 1.0);
        // BCE = ln 2; dice = 1 - (2*1 + 1)/(2 + 2 + 1) = 0.4.
        let want = std::f64::consts::LN_2 + 0.4;
        assert!((g.value(loss)[[0]] - want).abs() < 1e-9);
    }

    #[test]
    fn loss_is_negligible_at_perfect_prediction_and_zero_on_empty_masks() {
        let mut g = Graph::new();
        let gt = tensor(&[1, 2, 2], vec![1.0, 0.0, 1.0, 0.0]);
        let p = g.constant(gt.clone());
        let loss = g.bce_dice_loss(p, &gt, 1.0, 1.0);
        assert!(g.value(loss)[[0]] < 1e-5);

        let mut g2 = Graph::new();
        let zeros = Arr::zeros(IxDyn(&[1, 3, 3]));
        let p0 = g2.constant(zeros.clone());
        let loss0 = g2.bce_dice_loss(p0, &zeros, 0.0, 1.0);
        assert_eq!(g2.value(loss0)[[0]], 0.0);
    }

    #[test]
    fn loss_gradients_match_finite_differences_through_the_sigmoid() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        store.add(
            "probe.logits",
            crate::nn::init::he_normal(&mut rng, &[1, 8, 8], 1),
        );
        let gt_data: Vec<f64> = (0..64).map(|_| f64::from(rng.random_range(0..2))).collect();
        let gt = tensor(&[1, 8, 8], gt_data);
        let check = GradCheck {
            eps: 1e-6,
            max_entries_per_param: 48,
        };
        let worst = check.check(&mut store, &["probe.logits"], |g, store| {
            let logits = g.named_param(store, "probe.logits");
            let prob = g.sigmoid(logits);
            g.bce_dice_loss(prob, &gt, 1.0, 1.0)
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn loss_is_nonnegative_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p_data: Vec<f64> = (0..16).map(|_| rng.random_range(0.0..1.0)).collect();
            let g_data: Vec<f64> = (0..16).map(|_| f64::from(rng.random_range(0..2))).collect();
            let mut g = Graph::new();
            let p = g.constant(tensor(&[1, 4, 4], p_data));
            let loss = g.bce_dice_loss(p, &tensor(&[1, 4, 4], g_data), 1.0, 1.0);
            assert!(g.value(loss)[[0]] >= 0.0);
        }
    }
}
