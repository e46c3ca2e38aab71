//! Full network assembly: alignment, per-level correlation, decoding.
//!
//! [`forward`] builds the whole computation on one tape so the saliency
//! loss can reach the adapters through the warp and the region maps. Every
//! ablation flag in [`RunConfig`] rewires this assembly only; parameter
//! registration is identical across variants so fixed-seed initializations
//! stay comparable.

use crate::align::{self, EstimateOptions, EST_SIZE};
use crate::backbone;
use crate::config::RunConfig;
use crate::correlate;
use crate::decoder::{self, SaliencyPrediction};
use crate::geom::Homography;
use crate::img::Image;
use crate::nn::{tensor, Arr, Graph, ParamStore, Var};
use ndarray::IxDyn;
use rand::Rng;

/// Registers every parameter family the network can use, in a fixed order
/// so a given seed always produces the same initialization regardless of
/// which ablation flags are set.
pub fn register_model<R: Rng>(store: &mut ParamStore, rng: &mut R, cfg: &RunConfig) {
    align::register_estimator(store, rng);
    align::register_adapters(store, rng, cfg.adapter_dim, cfg.semantic_channels);
    backbone::register_encoder(store, rng, "backbone.rgb", 3, &cfg.backbone_channels);
    backbone::register_encoder(store, rng, "backbone.t", 1, &cfg.backbone_channels);
    backbone::register_fusion(
        store,
        rng,
        cfg.backbone_channels[3],
        cfg.attention_dim,
        cfg.semantic_channels,
    );
    correlate::register_correlation(store, rng, &cfg.backbone_channels);
    decoder::register_decoder(store, rng, &cfg.backbone_channels, cfg.decoder_channels);
}

/// One full forward pass, still on the tape.
pub struct Forward {
    pub prediction: SaliencyPrediction,
    /// Estimated homography in input-resolution pixel coordinates;
    /// identity when alignment is disabled or the solve degenerated at the
    /// first iterate.
    pub h_frame: Homography,
    /// Aligned thermal image `[1, S, S]` (the resized thermal itself when
    /// alignment is disabled).
    pub warped: Var,
    /// In-bounds mask of the warp, `[1, S, S]`.
    pub valid: Arr,
    pub degenerate: bool,
}

fn image_var(g: &mut Graph, img: &Image) -> Var {
    g.constant(tensor(
        &[img.channels(), img.height(), img.width()],
        img.as_slice().to_vec(),
    ))
}

/// Runs the network on an RGB/thermal pair of arbitrary resolution. Both
/// inputs are resized to the configured square input size; the thermal
/// stream is collapsed to one channel first.
pub fn forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &RunConfig,
    rgb: &Image,
    thermal: &Image,
) -> Forward {
    assert_eq!(rgb.channels(), 3, "RGB input must have three channels");
    let s = cfg.input_size;
    let rgb_s = rgb.resize_bilinear(s, s);
    let t_native = if cfg.thermal_as_rgb {
        rgb.grayscale()
    } else {
        thermal.grayscale()
    };
    let t_s = t_native.resize_bilinear(s, s);
    let rgb_v = image_var(g, &rgb_s);
    let t_v = image_var(g, &t_s);

    let f_rgb = backbone::encode(g, store, "backbone.rgb", rgb_v);
    let f_t = backbone::encode(g, store, "backbone.t", t_v);

    let f_s = if cfg.disable_semantics {
        let side = s / 32;
        g.constant(Arr::from_elem(
            IxDyn(&[cfg.semantic_channels, side, side]),
            1.0,
        ))
    } else {
        backbone::fuse_semantics(g, store, f_rgb[3], f_t[3])
    };

    let (h_frame, warped, valid, degenerate) = if cfg.disable_she {
        (
            Homography::identity(),
            t_v,
            Arr::from_elem(IxDyn(&[1, s, s]), 1.0),
            false,
        )
    } else {
        let rgb_gray = image_var(g, &rgb_s.grayscale().resize_bilinear(EST_SIZE, EST_SIZE));
        let t_gray = image_var(g, &t_s.resize_bilinear(EST_SIZE, EST_SIZE));
        let opts = EstimateOptions {
            iterations: cfg.estimator_iterations,
            use_adapters: !cfg.disable_adapter,
        };
        let est = align::estimate_homography(g, store, rgb_gray, t_gray, Some(f_s), &opts);
        let h8 = align::lift_to_frame(g, est.h8, s, s);
        let (warped, valid) = g.warp_image(t_v, h8, s, s);
        (align::h8_value(g, h8), warped, valid, est.degenerate)
    };

    let mut correlated = Vec::with_capacity(4);
    for i in 0..4 {
        let out = if cfg.disable_iimc {
            g.add(f_rgb[i], f_t[i])
        } else {
            let side = s >> (i + 2);
            let map_i = correlate::region_map(g, warped, &valid, side, side);
            let gate_i = correlate::semantic_gate_map(g, f_s, side, side);
            let inter =
                correlate::inter_modal_correlate(g, store, i, f_rgb[i], f_t[i], map_i, Some(gate_i));
            if cfg.disable_intra {
                inter
            } else {
                correlate::intra_modal_correlate(g, store, i, f_rgb[i], inter)
            }
        };
        correlated.push(out);
    }

    let prediction = decoder::decode(g, store, &correlated);
    Forward {
        prediction,
        h_frame,
        warped,
        valid,
        degenerate,
    }
}

/// Off-tape inference result.
pub struct Prediction {
    /// Probability map `[1, S, S]`.
    pub prob: Image,
    pub h: Homography,
    pub warped_thermal: Image,
    pub degenerate: bool,
}

fn var_image(g: &Graph, v: Var) -> Image {
    let a = g.value(v);
    let s = a.shape().to_vec();
    Image::from_vec(s[0], s[1], s[2], a.iter().copied().collect())
}

/// Convenience wrapper building a throwaway tape for inference.
pub fn predict(store: &ParamStore, cfg: &RunConfig, rgb: &Image, thermal: &Image) -> Prediction {
    let mut g = Graph::new();
    let out = forward(&mut g, store, cfg, rgb, thermal);
    let mut prob = var_image(&g, out.prediction.prob);
    prob.clamp01();
    Prediction {
        prob,
        h: out.h_frame,
        warped_thermal: var_image(&g, out.warped),
        degenerate: out.degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> RunConfig {
        let mut cfg = RunConfig::paper();
        cfg.input_size = 32;
        cfg.backbone_channels = [2, 3, 4, 5];
        cfg.adapter_dim = 2;
        cfg.attention_dim = 5;
        cfg.semantic_channels = 3;
        cfg.decoder_channels = 4;
        cfg.estimator_iterations = 1;
        cfg.validate().unwrap();
        cfg
    }

    fn toy_store(cfg: &RunConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_model(&mut store, &mut rng, cfg);
        store
    }

    fn toy_inputs() -> (Image, Image) {
        let rgb = Image::from_fn(3, 48, 40, |c, y, x| {
            (0.5 + 0.4 * ((c * 13 + y * 3 + 2 * x) as f64 * 0.11).sin()).clamp(0.0, 1.0)
        });
        let thermal = Image::from_fn(1, 44, 36, |_, y, x| {
            (0.4 + 0.4 * ((y * 5 + x * 7) as f64 * 0.07).cos()).clamp(0.0, 1.0)
        });
        (rgb, thermal)
    }

    fn randomize(store: &mut ParamStore, prefix: &str, seed: u64, mag: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names: Vec<String> = store
            .names()
            .filter(|n| n.starts_with(prefix))
            .map(str::to_string)
            .collect();
        for name in names {
            let idx = store.idx(&name);
            for v in store.value_mut(idx).iter_mut() {
                *v += rng.random_range(-mag..mag);
            }
        }
    }

    fn logits_of(cfg: &RunConfig, store: &ParamStore) -> Vec<f64> {
        let (rgb, thermal) = toy_inputs();
        let mut g = Graph::new();
        let out = forward(&mut g, store, cfg, &rgb, &thermal);
        g.value(out.prediction.logits).iter().copied().collect()
    }

    #[test]
    fn forward_produces_input_resolution_outputs() {
        let cfg = toy_config();
        let store = toy_store(&cfg, 0);
        let (rgb, thermal) = toy_inputs();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &rgb, &thermal);
        assert_eq!(g.value(out.prediction.logits).shape(), &[1, 32, 32]);
        assert_eq!(g.value(out.warped).shape(), &[1, 32, 32]);
        assert_eq!(out.valid.shape(), &[1, 32, 32]);
        assert!(!out.degenerate);
        assert!(out.h_frame.is_finite());
        assert!(g
            .value(out.prediction.prob)
            .iter()
            .all(|&p| (0.0..=1.0).contains(&p)));
        assert!(out.valid.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn forward_is_deterministic_across_tapes() {
        let cfg = toy_config();
        let store = toy_store(&cfg, 1);
        assert_eq!(logits_of(&cfg, &store), logits_of(&cfg, &store));
    }

    #[test]
    fn disabling_alignment_passes_the_thermal_through() {
        let mut cfg = toy_config();
        cfg.disable_she = true;
        let store = toy_store(&cfg, 2);
        let (rgb, thermal) = toy_inputs();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &rgb, &thermal);
        assert_eq!(out.h_frame.to_row_major(), Homography::identity().to_row_major());
        assert!(out.valid.iter().all(|&v| v == 1.0));
        let resized = thermal.grayscale().resize_bilinear(32, 32);
        let warped = g.value(out.warped);
        for (a, b) in warped.iter().zip(resized.as_slice()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn disabling_iimc_ignores_the_correlation_parameters() {
        let mut cfg = toy_config();
        cfg.disable_iimc = true;
        let mut store = toy_store(&cfg, 3);
        let before = logits_of(&cfg, &store);
        randomize(&mut store, "correlate.", 40, 0.5);
        assert_eq!(before, logits_of(&cfg, &store));

        cfg.disable_iimc = false;
        let mut store = toy_store(&cfg, 3);
        let with_iimc = logits_of(&cfg, &store);
        randomize(&mut store, "correlate.", 40, 0.5);
        assert_ne!(with_iimc, logits_of(&cfg, &store));
        assert_eq!(before.len(), with_iimc.len());
    }

    #[test]
    fn disabling_intra_ignores_only_the_self_attention_parameters() {
        let mut cfg = toy_config();
        cfg.disable_intra = true;
        let mut store = toy_store(&cfg, 4);
        let before = logits_of(&cfg, &store);
        randomize(&mut store, "correlate.level0.intra", 41, 0.5);
        randomize(&mut store, "correlate.level3.intra", 42, 0.5);
        assert_eq!(before, logits_of(&cfg, &store));
        randomize(&mut store, "correlate.level0.inter", 43, 0.5);
        assert_ne!(before, logits_of(&cfg, &store));
    }

    #[test]
    fn disabling_semantics_ignores_the_fusion_parameters() {
        let mut cfg = toy_config();
        cfg.disable_semantics = true;
        let mut store = toy_store(&cfg, 5);
        let before = logits_of(&cfg, &store);
        randomize(&mut store, "fusion.", 44, 0.5);
        assert_eq!(before, logits_of(&cfg, &store));

        cfg.disable_semantics = false;
        let mut store = toy_store(&cfg, 5);
        let with_sem = logits_of(&cfg, &store);
        randomize(&mut store, "fusion.", 44, 0.5);
        assert_ne!(with_sem, logits_of(&cfg, &store));
    }

    #[test]
    fn disabling_adapters_ignores_the_adapter_parameters() {
        let mut cfg = toy_config();
        cfg.disable_adapter = true;
        let mut store = toy_store(&cfg, 6);
        // A zero regressor head keeps every iterate at identity and hides
        // feature changes; give it small nonzero weights first.
        randomize(&mut store, "estimator.reg.head.w", 45, 0.01);
        let before = logits_of(&cfg, &store);
        randomize(&mut store, "adapter.", 46, 0.5);
        assert_eq!(before, logits_of(&cfg, &store));

        cfg.disable_adapter = false;
        let mut store = toy_store(&cfg, 6);
        randomize(&mut store, "estimator.reg.head.w", 45, 0.01);
        let plain = logits_of(&cfg, &store);
        // Zero-initialized up-projections make the adapted path identical.
        assert_eq!(before, plain);
        randomize(&mut store, "adapter.", 46, 0.5);
        assert_ne!(plain, logits_of(&cfg, &store));
    }

    #[test]
    fn thermal_as_rgb_ignores_the_thermal_input() {
        let mut cfg = toy_config();
        cfg.thermal_as_rgb = true;
        let store = toy_store(&cfg, 7);
        let (rgb, thermal) = toy_inputs();
        let other = Image::from_fn(1, 20, 28, |_, y, x| f64::from((y + x) % 2 == 0));
        let mut g1 = Graph::new();
        let a = forward(&mut g1, &store, &cfg, &rgb, &thermal);
        let mut g2 = Graph::new();
        let b = forward(&mut g2, &store, &cfg, &rgb, &other);
        assert_eq!(
            g1.value(a.prediction.logits).as_slice().unwrap(),
            g2.value(b.prediction.logits).as_slice().unwrap()
        );
    }

    #[test]
    fn stage_two_gradients_reach_every_trainable_family_but_not_frozen_ones() {
        let cfg = toy_config();
        let mut store = toy_store(&cfg, 8);
        randomize(&mut store, "estimator.reg.head.w", 47, 0.01);
        store.set_frozen_prefix("estimator.", true);
        let (rgb, thermal) = toy_inputs();
        let mut g = Graph::new();
        let out = forward(&mut g, &store, &cfg, &rgb, &thermal);
        let loss = g.mean_all(out.prediction.logits);
        let grads = g.backward(loss);
        let grads = g.param_grads(&grads, store.len());

        for prefix in [
            "adapter.",
            "backbone.rgb.",
            "backbone.t.",
            "fusion.",
            "correlate.",
            "decoder.",
        ] {
            let hit = (0..store.len()).any(|i| {
                store.name(i).starts_with(prefix)
                    && grads[i]
                        .as_ref()
                        .is_some_and(|a| a.iter().any(|&v| v != 0.0))
            });
            assert!(hit, "no nonzero gradient reached {prefix}");
        }
        for i in 0..store.len() {
            if store.name(i).starts_with("estimator.") {
                assert!(grads[i].is_none(), "frozen {} got a gradient", store.name(i));
            }
        }
    }

    #[test]
    fn predict_returns_consistent_images() {
        let cfg = toy_config();
        let store = toy_store(&cfg, 9);
        let (rgb, thermal) = toy_inputs();
        let p = predict(&store, &cfg, &rgb, &thermal);
        assert_eq!((p.prob.channels(), p.prob.height(), p.prob.width()), (1, 32, 32));
        assert_eq!(
            (p.warped_thermal.height(), p.warped_thermal.width()),
            (32, 32)
        );
        assert!(p.prob.as_slice().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.h.is_finite());
    }
}
