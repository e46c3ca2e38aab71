//! Iterative homography estimation between the RGB and thermal frames, with
//! semantic bottleneck adapters inside the (otherwise frozen) estimator.
//!
//! The estimator works on grayscale pairs at a fixed 128x128 working
//! resolution: a siamese 3-layer strided encoder brings both images to a
//! 16x16 feature grid, a global correlation volume scores every RGB cell
//! against every thermal cell, and K shared-weight refinement iterations
//! each look up local correlations around the current warp, regress a corner
//! displacement update, and re-solve the four-point DLT. The returned
//! homography is the *sampling map*: `warp(misaligned_thermal, H)` produces
//! the aligned thermal. Conjugation with frame scale maps lifts it to any
//! full-frame resolution.
//!
//! Adapters (`adapter.*` parameters, trained in stage 2) sit after each
//! encoder layer; their up-projections start at zero so an untrained adapter
//! is an exact identity. Base estimator weights live under `estimator.*`,
//! the prefix the freeze contract applies to.

use crate::geom::{image_corners, GeomError, Homography, Point};
use crate::nn::init::{add_conv, add_linear, add_linear_zero};
use crate::nn::sample::{pixel_grid, DispSide};
use crate::nn::{Arr, Graph, ParamStore, Var};
use ndarray::{Array2, IxDyn};
use rand::Rng;

/// Estimator working resolution (both extents).
pub const EST_SIZE: usize = 128;
/// Encoder channels; three stride-2 layers end at 1/8 resolution.
pub const EST_CHANNELS: [usize; 3] = [16, 24, 32];
/// Channel width of the iterative regressor.
pub const EST_REG_CHANNELS: usize = 24;
/// Correlation lookup radius (taps per side = 2r + 1).
pub const EST_RADIUS: usize = 3;
/// Encoder downsampling factor.
pub const EST_STRIDE: usize = 8;
/// Update gain applied to every head output. The head regresses in
/// feature-cell units (one correlation cell spans EST_STRIDE pixels), so
/// O(1) weights express pixel-scale moves; leaving pixel units to the head
/// itself stalls pretraining, because the zero-initialized head then needs
/// O(10) weights before the loss moves at all.
pub const UPDATE_GAIN: f64 = EST_STRIDE as f64;

/// Feature-grid side length at the bottom of the encoder.
pub const fn feature_side() -> usize {
    EST_SIZE / EST_STRIDE
}

/// Registers the base estimator under `estimator.`: the siamese encoder,
/// the correlation-regressor stack and the zero-initialized update head
/// (so that the first forward pass of an untrained estimator is the
/// identity fixed point).
pub fn register_estimator<R: Rng>(store: &mut ParamStore, rng: &mut R) {
    let mut ci = 1;
    for (l, &c) in EST_CHANNELS.iter().enumerate() {
        add_conv(store, rng, &format!("estimator.enc{l}"), c, ci, 3, 3);
        ci = c;
    }
    let taps = (2 * EST_RADIUS + 1) * (2 * EST_RADIUS + 1);
    add_conv(
        store,
        rng,
        "estimator.reg.proj",
        EST_REG_CHANNELS,
        taps + 2,
        1,
        1,
    );
    for j in 0..4 {
        let c = EST_REG_CHANNELS;
        add_conv(store, rng, &format!("estimator.reg.mix{j}.conv1"), c, c, 3, 3);
        add_conv(store, rng, &format!("estimator.reg.mix{j}.conv2"), c, c, 3, 3);
    }
    add_linear_zero(store, "estimator.reg.head", EST_REG_CHANNELS, 8, true);
}

/// Registers one bottleneck adapter per encoder layer under `adapter.`:
/// separate down-projections for the layer feature and the semantic
/// feature, and a zero-initialized up-projection.
pub fn register_adapters<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    adapter_dim: usize,
    semantic_channels: usize,
) {
    for (l, &c) in EST_CHANNELS.iter().enumerate() {
        add_linear(store, rng, &format!("adapter.layer{l}.feat_dn"), c, adapter_dim, false);
        add_linear(
            store,
            rng,
            &format!("adapter.layer{l}.sem_dn"),
            semantic_channels,
            adapter_dim,
            false,
        );
        add_linear_zero(store, &format!("adapter.layer{l}.up"), adapter_dim, c, false);
    }
}

/// `X` gated by the channel-pooled sigmoid of `Y`: `X ⊙ σ(mean_c(Y))`.
/// `Y` may have any channel count; spatial shapes must match.
pub fn semantic_gate(g: &mut Graph, x: Var, y: Var) -> Var {
    let sx = g.value(x).shape().to_vec();
    let sy = g.value(y).shape().to_vec();
    assert_eq!(
        (sx[1], sx[2]),
        (sy[1], sy[2]),
        "gate inputs must share spatial shape"
    );
    let pooled = g.channel_mean(y);
    let gate = g.sigmoid(pooled);
    g.mul_broadcast_c(x, gate)
}

/// 1x1 channel projection of a spatial map via the token layout.
fn project_channels(g: &mut Graph, x: Var, weight: Var) -> Var {
    let s = g.value(x).shape().to_vec();
    let tokens = g.chw_to_tokens(x);
    let out = g.linear(tokens, weight, None);
    g.tokens_to_chw(out, s[1], s[2])
}

/// Bottleneck adapter: down-project the layer feature and the (resized)
/// semantic feature, gate the former by the latter, rectify, up-project.
/// Returns the bottleneck output; the caller adds the residual.
pub fn s_adapter_forward(
    g: &mut Graph,
    store: &ParamStore,
    layer: usize,
    f_l: Var,
    f_s: Var,
) -> Var {
    let s = g.value(f_l).shape().to_vec();
    let fs_r = g.bilinear_resize(f_s, s[1], s[2]);
    let w_feat = g.named_param(store, &format!("adapter.layer{layer}.feat_dn.w"));
    let w_sem = g.named_param(store, &format!("adapter.layer{layer}.sem_dn.w"));
    let w_up = g.named_param(store, &format!("adapter.layer{layer}.up.w"));
    let x_dn = project_channels(g, f_l, w_feat);
    let y_dn = project_channels(g, fs_r, w_sem);
    let gated = semantic_gate(g, x_dn, y_dn);
    let act = g.relu(gated);
    project_channels(g, act, w_up)
}

/// Runs the shared encoder over one grayscale image, inserting adapters
/// after each layer when a semantic feature is supplied.
fn encode_stream(g: &mut Graph, store: &ParamStore, img: Var, f_s: Option<Var>) -> Var {
    let mut x = img;
    for l in 0..EST_CHANNELS.len() {
        let w = g.named_param(store, &format!("estimator.enc{l}.w"));
        let b = g.named_param(store, &format!("estimator.enc{l}.b"));
        x = g.conv2d(x, w, Some(b), 2, 1);
        x = g.relu(x);
        if let Some(fs) = f_s {
            let a = s_adapter_forward(g, store, l, x, fs);
            x = g.add(x, a);
        }
    }
    x
}

/// Global correlation volume: `vol[q, y, x] = <Fa[:, q], Fb[:, (y, x)]> / sqrt(C)`
/// over all position pairs, with `Fa`'s positions flattened row-major.
pub fn build_correlation_volume(g: &mut Graph, fa: Var, fb: Var) -> Var {
    let sa = g.value(fa).shape().to_vec();
    let sb = g.value(fb).shape().to_vec();
    assert_eq!(sa[0], sb[0], "correlation inputs must share channel count");
    let ta = g.chw_to_tokens(fa);
    let tb = g.chw_to_tokens(fb);
    let vol = g.matmul_nt(ta, tb);
    let vol = g.scale(vol, 1.0 / (sa[0] as f64).sqrt());
    g.reshape(vol, &[sa[1] * sa[2], sb[1], sb[2]])
}

pub struct EstimateOptions {
    pub iterations: usize,
    pub use_adapters: bool,
}

/// Result of one estimation pass, still on the tape.
pub struct Estimate {
    /// Final homography (8-vector, `h22 = 1`) in working-resolution pixel
    /// coordinates; the sampling map that aligns the thermal image.
    pub h8: Var,
    /// Committed corner displacement after each iteration: the proposal if
    /// it kept the alignment score from dropping, the previous state
    /// otherwise (backtracking), so the sequence never regresses in score.
    pub displacements: Vec<Var>,
    /// Raw per-iteration proposals before the acceptance test; training
    /// supervises these so rejected updates still receive gradient.
    pub proposals: Vec<Var>,
    /// True when an iterate's DLT degenerated; `h8` then holds the last
    /// valid iterate and iteration stopped early.
    pub degenerate: bool,
}

/// Iterative estimation over a grayscale pair at the working resolution.
/// `f_s` (when present together with `use_adapters`) switches the encoder to
/// its adapted form.
pub fn estimate_homography(
    g: &mut Graph,
    store: &ParamStore,
    rgb_gray: Var,
    t_gray: Var,
    f_s: Option<Var>,
    opts: &EstimateOptions,
) -> Estimate {
    for v in [rgb_gray, t_gray] {
        assert_eq!(
            g.value(v).shape(),
            &[1, EST_SIZE, EST_SIZE],
            "estimator inputs must be grayscale at the working resolution"
        );
    }
    let fs = if opts.use_adapters { f_s } else { None };
    let f_rgb = encode_stream(g, store, rgb_gray, fs);
    let f_t = encode_stream(g, store, t_gray, fs);
    let vol = build_correlation_volume(g, f_rgb, f_t);

    let edges_rgb = edge_map(g.value(rgb_gray));
    let edges_t = edge_map(g.value(t_gray));

    let side = feature_side();
    let n = side * side;
    let scale = EST_STRIDE as f64;
    // Pixel positions of the feature-cell centers, and the affine constants
    // mapping warped pixel positions back to feature coordinates:
    // f = (p + 0.5) / s - 0.5.
    let mut grid_pix = pixel_grid(side, side);
    grid_pix.mapv_inplace(|f| (f + 0.5) * scale - 0.5);
    let neg_grid = grid_pix.mapv(|v| -v);
    let feat_shift = Arr::from_elem(IxDyn(&[n, 2]), 0.5 / scale - 0.5);

    let corners = image_corners(EST_SIZE, EST_SIZE);
    let mut h_prev = g.constant(Arr::from_shape_vec(
        IxDyn(&[8]),
        Homography::identity().as_flat8().to_vec(),
    )
    .unwrap());
    let mut d_prev = g.constant(Arr::zeros(IxDyn(&[8])));
    let mut displacements = Vec::with_capacity(opts.iterations);
    let mut proposals = Vec::with_capacity(opts.iterations);
    let mut degenerate = false;

    // Alignment score of the current state; backtracking accepts a proposal
    // only if this does not drop. The start value is not the identity's
    // score but a sentinel: the initialization is not an estimate, so it
    // must not veto the first one (which would also leave the result
    // without any parameter in its history).
    let mut score_prev = f64::NEG_INFINITY;

    for _ in 0..opts.iterations {
        let pos_pix = g.apply_h_grid(h_prev, &grid_pix);
        let pos_scaled = g.scale(pos_pix, 1.0 / scale);
        let pos_feat = g.add_const(pos_scaled, &feat_shift);
        let corr = g.corr_lookup(vol, pos_feat, EST_RADIUS);
        let taps = (2 * EST_RADIUS + 1) * (2 * EST_RADIUS + 1);
        let corr = g.reshape(corr, &[taps, side, side]);

        let disp_pix = g.add_const(pos_pix, &neg_grid);
        let disp_feat = g.scale(disp_pix, 1.0 / scale);
        let flow = g.tokens_to_chw(disp_feat, side, side);

        let x = g.concat_channels(&[corr, flow]);
        let wp = g.named_param(store, "estimator.reg.proj.w");
        let bp = g.named_param(store, "estimator.reg.proj.b");
        let mut y = g.conv2d(x, wp, Some(bp), 1, 0);
        y = g.relu(y);
        for j in 0..4 {
            let w1 = g.named_param(store, &format!("estimator.reg.mix{j}.conv1.w"));
            let b1 = g.named_param(store, &format!("estimator.reg.mix{j}.conv1.b"));
            let w2 = g.named_param(store, &format!("estimator.reg.mix{j}.conv2.w"));
            let b2 = g.named_param(store, &format!("estimator.reg.mix{j}.conv2.b"));
            let mut z = g.conv2d(y, w1, Some(b1), 1, 1);
            z = g.relu(z);
            z = g.conv2d(z, w2, Some(b2), 1, 1);
            let s = g.add(y, z);
            y = g.relu(s);
        }
        let pooled = g.spatial_mean(y);
        let pooled = g.reshape(pooled, &[1, EST_REG_CHANNELS]);
        let wh = g.named_param(store, "estimator.reg.head.w");
        let bh = g.named_param(store, "estimator.reg.head.b");
        let delta = g.linear(pooled, wh, Some(bh));
        let delta = g.reshape(delta, &[8]);
        let delta = g.scale(delta, UPDATE_GAIN);

        let d_k = g.add(d_prev, delta);
        let accepted = match g.dlt_from_disp(d_k, corners, DispSide::Dst) {
            Ok(h8) => {
                proposals.push(d_k);
                let score = alignment_score(g.value(h8), &edges_rgb, &edges_t);
                let ok = score >= score_prev;
                if ok {
                    h_prev = h8;
                    d_prev = d_k;
                    score_prev = score;
                }
                displacements.push(d_prev);
                ok
            }
            Err(_) => {
                degenerate = true;
                break;
            }
        };
        // A rejected proposal leaves the state bitwise unchanged, so every
        // later iteration would propose and reject the same update; commit
        // the frozen tail without recomputing it.
        if !accepted {
            while displacements.len() < opts.iterations {
                displacements.push(d_prev);
                proposals.push(*proposals.last().unwrap());
            }
            break;
        }
    }
    Estimate {
        h8: h_prev,
        displacements,
        proposals,
        degenerate,
    }
}

/// Gradient-magnitude map of a `[1, H, W]` grayscale image (central
/// differences, zero border). Edge strength survives a modality change far
/// better than raw intensity, so alignment is scored on these maps.
fn edge_map(img: &Arr) -> Array2<f64> {
    let shape = img.shape();
    assert_eq!(shape[0], 1, "edge_map expects a single-channel image");
    let (h, w) = (shape[1], shape[2]);
    let im = img.view().into_shape_with_order((h, w)).unwrap();
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let gx = (im[[y, x + 1]] - im[[y, x - 1]]) * 0.5;
            let gy = (im[[y + 1, x]] - im[[y - 1, x]]) * 0.5;
            out[[y, x]] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Normalized cross-correlation between the RGB edge map and the thermal
/// edge map sampled through `h8` (RGB frame to thermal frame, bilinear).
/// Returns negative infinity when the warp throws most of the frame out of
/// bounds, and zero when either overlap region is featureless. Computed on
/// plain numbers; backtracking is a discrete choice, not a differentiable
/// one.
fn alignment_score(h8: &Arr, edges_rgb: &Array2<f64>, edges_t: &Array2<f64>) -> f64 {
    let h = h8.as_slice().unwrap();
    let (rows, cols) = edges_rgb.dim();
    let (trows, tcols) = edges_t.dim();
    let mut n = 0usize;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for y in 0..rows {
        for x in 0..cols {
            let (px, py) = (x as f64, y as f64);
            let d = h[6] * px + h[7] * py + 1.0;
            if d.abs() < 1e-12 {
                continue;
            }
            let qx = (h[0] * px + h[1] * py + h[2]) / d;
            let qy = (h[3] * px + h[4] * py + h[5]) / d;
            let (x0, y0) = (qx.floor(), qy.floor());
            if x0 < 0.0 || y0 < 0.0 || x0 + 1.0 > (tcols - 1) as f64 || y0 + 1.0 > (trows - 1) as f64
            {
                continue;
            }
            let (fx, fy) = (qx - x0, qy - y0);
            let (xi, yi) = (x0 as usize, y0 as usize);
            let b = edges_t[[yi, xi]] * (1.0 - fx) * (1.0 - fy)
                + edges_t[[yi, xi + 1]] * fx * (1.0 - fy)
                + edges_t[[yi + 1, xi]] * (1.0 - fx) * fy
                + edges_t[[yi + 1, xi + 1]] * fx * fy;
            let a = edges_rgb[[y, x]];
            n += 1;
            sa += a;
            sb += b;
            saa += a * a;
            sbb += b * b;
            sab += a * b;
        }
    }
    if n * 4 < rows * cols {
        return f64::NEG_INFINITY;
    }
    let nf = n as f64;
    let va = nf * saa - sa * sa;
    let vb = nf * sbb - sb * sb;
    if va <= 1e-12 || vb <= 1e-12 {
        return 0.0;
    }
    (nf * sab - sa * sb) / (va * vb).sqrt()
}

/// Ideal accumulated displacement for a synthesized pair: the warp that
/// undoes `h_true` moves each base corner by `h_true^-1(c) - c`.
pub fn true_displacement(h_true: &Homography, size: usize) -> Result<Arr, GeomError> {
    let inv = h_true.inverse()?;
    let corners = image_corners(size, size);
    let mut d = Vec::with_capacity(8);
    for c in corners {
        let m = inv.apply(c);
        d.push(m.x - c.x);
        d.push(m.y - c.y);
    }
    Ok(Arr::from_shape_vec(IxDyn(&[8]), d).unwrap())
}

/// Mean corner error (pixels) of an accumulated displacement against the
/// ideal displacement for the same corners.
pub fn corner_error(d: &Arr, d_true: &Arr) -> f64 {
    assert_eq!(d.shape(), &[8]);
    assert_eq!(d_true.shape(), &[8]);
    let dv = d.as_slice().unwrap();
    let tv = d_true.as_slice().unwrap();
    let mut acc = 0.0;
    for j in 0..4 {
        let dx = dv[2 * j] - tv[2 * j];
        let dy = dv[2 * j + 1] - tv[2 * j + 1];
        acc += (dx * dx + dy * dy).sqrt();
    }
    acc / 4.0
}

/// Reads an 8-vector off the tape as a [`Homography`].
pub fn h8_value(g: &Graph, h8: Var) -> Homography {
    let v = g.value(h8).as_slice().unwrap();
    let mut flat = [0.0; 8];
    flat.copy_from_slice(v);
    Homography::from_flat8(&flat)
}

/// Conjugates a working-resolution homography onto a `w x h` frame, on the
/// tape (gradients flow back into the 8-vector).
pub fn lift_to_frame(g: &mut Graph, h8: Var, w: usize, h: usize) -> Var {
    let post = crate::geom::frame_scale_map(EST_SIZE, EST_SIZE, w, h);
    let pre = crate::geom::frame_scale_map(w, h, EST_SIZE, EST_SIZE);
    g.conjugate_h(h8, &post, &pre)
}

/// Corner positions moved by an accumulated displacement; used by tests and
/// the pretraining monotonicity report.
pub fn displaced_from(d: &Arr, size: usize) -> [Point; 4] {
    let corners = image_corners(size, size);
    let dv = d.as_slice().unwrap();
    let mut out = corners;
    for j in 0..4 {
        out[j].x += dv[2 * j];
        out[j].y += dv[2 * j + 1];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::GradCheck;
    use crate::nn::tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn estimator_store(seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_estimator(&mut store, &mut rng);
        register_adapters(&mut store, &mut rng, 4, 6);
        store
    }

    fn gray_image(seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..EST_SIZE * EST_SIZE)
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Arr::from_shape_vec(IxDyn(&[1, EST_SIZE, EST_SIZE]), data).unwrap()
    }

    #[test]
    fn semantic_gate_halves_x_when_y_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[2, 2, 2], (0..8).map(|i| i as f64).collect()));
        let y = g.constant(Arr::zeros(IxDyn(&[3, 2, 2])));
        let out = semantic_gate(&mut g, x, y);
        let v = g.value(out).as_slice().unwrap();
        for (i, &o) in v.iter().enumerate() {
            assert!((o - 0.5 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_gate_saturates_for_large_y() {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[1, 2, 2], vec![1.0, -2.0, 3.0, -4.0]));
        let y = g.constant(Arr::from_elem(IxDyn(&[2, 2, 2]), 20.0));
        let out = semantic_gate(&mut g, x, y);
        let v = g.value(out).as_slice().unwrap();
        let want = [1.0, -2.0, 3.0, -4.0];
        for (o, w) in v.iter().zip(&want) {
            assert!((o - w).abs() < 1e-8);
        }
    }

    #[test]
    fn semantic_gate_matches_hand_computed_sigmoid_table() {
        let mut g = Graph::new();
        let x = g.constant(tensor(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        // Channel means: ln(3), 0, -ln(3), ln(1) = 0 -> gates 0.75, 0.5, 0.25, 0.5.
        let l3 = 3.0f64.ln();
        let y = g.constant(tensor(
            &[2, 2, 2],
            vec![l3, 0.0, -l3, 0.0, l3, 0.0, -l3, 0.0],
        ));
        let out = semantic_gate(&mut g, x, y);
        let v = g.value(out).as_slice().unwrap();
        let want = [0.75, 1.0, 0.75, 2.0];
        for (o, w) in v.iter().zip(&want) {
            assert!((o - w).abs() < 1e-9, "{o} vs {w}");
        }
    }

    #[test]
    fn adapter_with_zero_up_projection_outputs_zero() {
        let store = estimator_store(1);
        let mut g = Graph::new();
        let f = g.constant(tensor(
            &[16, 4, 4],
            (0..16 * 16).map(|i| (i as f64 * 0.37).sin()).collect(),
        ));
        let fs = g.constant(tensor(
            &[6, 2, 2],
            (0..24).map(|i| (i as f64 * 0.11).cos()).collect(),
        ));
        let out = s_adapter_forward(&mut g, &store, 0, f, fs);
        assert!(g.value(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_matches_composition_oracle() {
        let mut store = estimator_store(2);
        // Give the up-projection real weights so the oracle is nontrivial.
        let up = store.idx("adapter.layer0.up.w");
        {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let w = store.value_mut(up);
            for v in w.iter_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let c = 16;
        let cs = 6;
        let da = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f_data: Vec<f64> = (0..c * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fs_data: Vec<f64> = (0..cs * 4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut g = Graph::new();
        let f = g.constant(tensor(&[c, 2, 2], f_data.clone()));
        let fs = g.constant(tensor(&[cs, 2, 2], fs_data.clone()));
        let out = s_adapter_forward(&mut g, &store, 0, f, fs);
        let got = g.value(out).as_slice().unwrap().to_vec();

        // Hand-rolled: token t at position i has feature f_data[ch*4 + i].
        let wf = store.by_name("adapter.layer0.feat_dn.w");
        let ws = store.by_name("adapter.layer0.sem_dn.w");
        let wu = store.by_name("adapter.layer0.up.w");
        for i in 0..4 {
            let fd: Vec<f64> = (0..da)
                .map(|o| (0..c).map(|ch| f_data[ch * 4 + i] * wf[[ch, o]]).sum())
                .collect();
            let sd: Vec<f64> = (0..da)
                .map(|o| (0..cs).map(|ch| fs_data[ch * 4 + i] * ws[[ch, o]]).sum())
                .collect();
            let mean = sd.iter().sum::<f64>() / da as f64;
            let gate = 1.0 / (1.0 + (-mean).exp());
            let act: Vec<f64> = fd.iter().map(|&v| (v * gate).max(0.0)).collect();
            for ch in 0..c {
                let want: f64 = (0..da).map(|o| act[o] * wu[[o, ch]]).sum();
                assert!(
                    (got[ch * 4 + i] - want).abs() < 1e-6,
                    "pos {i} ch {ch}: {} vs {}",
                    got[ch * 4 + i],
                    want
                );
            }
        }
    }

    #[test]
    fn correlation_volume_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 3;
        let a_data: Vec<f64> = (0..c * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b_data: Vec<f64> = (0..c * 16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let fa = g.constant(tensor(&[c, 4, 4], a_data.clone()));
        let fb = g.constant(tensor(&[c, 4, 4], b_data.clone()));
        let vol = build_correlation_volume(&mut g, fa, fb);
        assert_eq!(g.value(vol).shape(), &[16, 4, 4]);
        let norm = (c as f64).sqrt();
        for q in 0..16 {
            for p in 0..16 {
                let mut dot = 0.0;
                for ch in 0..c {
                    dot += a_data[ch * 16 + q] * b_data[ch * 16 + p];
                }
                let got = g.value(vol)[[q, p / 4, p % 4]];
                assert!((got - dot / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn correlation_volume_is_zero_when_one_side_is_zero() {
        let mut g = Graph::new();
        let fa = g.constant(tensor(&[2, 2, 2], vec![1.0; 8]));
        let fb = g.constant(Arr::zeros(IxDyn(&[2, 2, 2])));
        let vol = build_correlation_volume(&mut g, fa, fb);
        assert!(g.value(vol).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_head_gives_identity_homography() {
        let store = estimator_store(7);
        let mut g = Graph::new();
        let rgb = g.constant(gray_image(10));
        let t = g.constant(gray_image(11));
        let opts = EstimateOptions {
            iterations: 3,
            use_adapters: false,
        };
        let est = estimate_homography(&mut g, &store, rgb, t, None, &opts);
        assert!(!est.degenerate);
        assert_eq!(est.displacements.len(), 3);
        let h = h8_value(&g, est.h8);
        let id = Homography::identity();
        for (a, b) in h.as_flat8().iter().zip(id.as_flat8().iter()) {
            assert!((a - b).abs() < 1e-9);
        }
        for d in &est.displacements {
            assert!(g.value(*d).iter().all(|&v| v == 0.0));
        }
    }

    /// Writes small random values into a parameter so a path is nontrivial.
    fn randomize(store: &mut ParamStore, name: &str, seed: u64, mag: f64) {
        let idx = store.idx(name);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in store.value_mut(idx).iter_mut() {
            *v = rng.random_range(-mag..mag);
        }
    }

    #[test]
    fn adapted_path_with_zero_up_projection_is_bitwise_identical_to_raw() {
        let mut store = estimator_store(8);
        // A nonzero head makes the iterates move, as after pretraining;
        // zero-init adapters must still leave the result bitwise unchanged.
        randomize(&mut store, "estimator.reg.head.w", 30, 0.01);
        let store = store;
        let rgb = gray_image(12);
        let t = gray_image(13);
        let fs_data: Vec<f64> = (0..6 * 4).map(|i| (i as f64 * 0.21).sin()).collect();
        let run = |use_adapters: bool| -> Vec<u64> {
            let mut g = Graph::new();
            let rv = g.constant(rgb.clone());
            let tv = g.constant(t.clone());
            let fs = g.constant(tensor(&[6, 2, 2], fs_data.clone()));
            let opts = EstimateOptions {
                iterations: 2,
                use_adapters,
            };
            let est = estimate_homography(&mut g, &store, rv, tv, Some(fs), &opts);
            g.value(est.h8).iter().map(|v| v.to_bits()).collect()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn true_displacement_matches_inverse_corner_motion() {
        let h = Homography::from_flat8(&[1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let d = true_displacement(&h, EST_SIZE).unwrap();
        // Inverse of translation(5, 0) moves corners by (-5, 0).
        let dv = d.as_slice().unwrap();
        for j in 0..4 {
            assert!((dv[2 * j] + 5.0).abs() < 1e-9);
            assert!(dv[2 * j + 1].abs() < 1e-9);
        }
        let id_err = corner_error(&Arr::zeros(IxDyn(&[8])), &d);
        assert!((id_err - 5.0).abs() < 1e-9);
    }

    #[test]
    fn warp_loss_gradients_reach_the_adapters() {
        // The stage-2 gradient path: saliency-style loss on the warped image
        // must move adapter parameters (through warp -> H -> DLT -> head ->
        // regressor -> correlation -> encoder -> adapter).
        let mut store = estimator_store(9);
        // Nonzero up-projections so adapters influence the forward pass, and
        // a nonzero head (as after pretraining) so gradients can flow back
        // through the update into the features.
        for l in 0..3 {
            randomize(&mut store, &format!("adapter.layer{l}.up.w"), 20 + l as u64, 0.05);
        }
        randomize(&mut store, "estimator.reg.head.w", 31, 0.01);
        store.set_frozen_prefix("estimator.", true);
        let rgb = gray_image(14);
        let t = gray_image(15);
        let mut g = Graph::new();
        let rv = g.constant(rgb);
        let tv = g.constant(t.clone());
        let fs = g.constant(tensor(
            &[6, 2, 2],
            (0..24).map(|i| (i as f64 * 0.17).cos()).collect(),
        ));
        let opts = EstimateOptions {
            iterations: 2,
            use_adapters: true,
        };
        let est = estimate_homography(&mut g, &store, rv, tv, Some(fs), &opts);
        let (warped, _valid) = g.warp_image(tv, est.h8, EST_SIZE, EST_SIZE);
        let loss = g.mean_all(warped);
        let grads = g.backward(loss);
        let pgrads = g.param_grads(&grads, store.len());
        let mut adapter_hit = false;
        for i in 0..store.len() {
            let name = store.name(i).to_string();
            if name.starts_with("estimator.") {
                assert!(pgrads[i].is_none(), "frozen base received gradient: {name}");
            }
            if name.starts_with("adapter.") {
                if let Some(gr) = &pgrads[i] {
                    if gr.iter().any(|&v| v != 0.0) {
                        adapter_hit = true;
                    }
                }
            }
        }
        assert!(adapter_hit, "no adapter parameter received a gradient");
    }

    #[test]
    fn estimator_gradients_match_finite_differences_on_a_tiny_pair() {
        let mut store = estimator_store(16);
        // Nonzero head so the iteration actually moves.
        randomize(&mut store, "estimator.reg.head.w", 17, 0.01);
        let rgb = gray_image(18);
        let t = gray_image(19);
        let d_true = {
            let h = Homography::from_flat8(&[1.0, 0.0, 3.0, 0.0, 1.0, -2.0, 0.0, 0.0]);
            true_displacement(&h, EST_SIZE).unwrap()
        };
        let params = [
            "estimator.reg.head.w",
            "estimator.reg.head.b",
            "estimator.reg.proj.w",
            "estimator.enc0.w",
        ];
        let check = GradCheck {
            eps: 1e-6,
            max_entries_per_param: 4,
        };
        let worst = check.check(&mut store, &params, |g, store| {
            let rv = g.constant(rgb.clone());
            let tv = g.constant(t.clone());
            let opts = EstimateOptions {
                iterations: 2,
                use_adapters: false,
            };
            let est = estimate_homography(g, store, rv, tv, None, &opts);
            let mut terms = Vec::new();
            for d in &est.displacements {
                terms.push((g.l1_loss(*d, &d_true), 1.0));
            }
            g.weighted_sum_scalars(&terms)
        });
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn edge_map_matches_central_difference_oracle() {
        // 4x4 ramp with a bump: only the 2x2 interior gets nonzero output.
        let data = vec![
            0.0, 1.0, 2.0, 3.0, //
            0.0, 1.0, 5.0, 3.0, //
            0.0, 1.0, 2.0, 3.0, //
            0.0, 1.0, 2.0, 3.0,
        ];
        let img = Arr::from_shape_vec(IxDyn(&[1, 4, 4]), data).unwrap();
        let e = edge_map(&img);
        for y in 0..4 {
            assert_eq!(e[[y, 0]], 0.0);
            assert_eq!(e[[y, 3]], 0.0);
        }
        for x in 0..4 {
            assert_eq!(e[[0, x]], 0.0);
            assert_eq!(e[[3, x]], 0.0);
        }
        // (1,1): gx = (5-0)/2, gy = (1-1)/2. (1,2): gx = (3-1)/2, gy = (2-2)/2.
        assert!((e[[1, 1]] - 2.5).abs() < 1e-12);
        assert!((e[[1, 2]] - 1.0).abs() < 1e-12);
        // (2,1): gy = (1-1)/2 = 0, gx = (2-0)/2. (2,2): gy = (2-5)/2, gx = (3-1)/2.
        assert!((e[[2, 1]] - 1.0).abs() < 1e-12);
        assert!((e[[2, 2]] - (1.0f64 + 2.25).sqrt()).abs() < 1e-12);
    }

    fn shifted_pair(dx: f64, dy: f64) -> (Arr, Arr) {
        // A smooth blob pattern and the same pattern translated by (dx, dy):
        // b(p) = a(p - (dx, dy)), so the map aligning them sends RGB point p
        // to thermal point p + (dx, dy).
        let f = |x: f64, y: f64| {
            ((x * 0.23).sin() + (y * 0.31).cos() + ((x + 2.0 * y) * 0.07).sin()) * 0.5
        };
        let mut a = Vec::with_capacity(EST_SIZE * EST_SIZE);
        let mut b = Vec::with_capacity(EST_SIZE * EST_SIZE);
        for y in 0..EST_SIZE {
            for x in 0..EST_SIZE {
                a.push(f(x as f64, y as f64));
                b.push(f(x as f64 - dx, y as f64 - dy));
            }
        }
        let shape = IxDyn(&[1, EST_SIZE, EST_SIZE]);
        (
            Arr::from_shape_vec(shape.clone(), a).unwrap(),
            Arr::from_shape_vec(shape, b).unwrap(),
        )
    }

    fn translation8(dx: f64, dy: f64) -> Arr {
        Arr::from_shape_vec(IxDyn(&[8]), vec![1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn alignment_score_peaks_at_the_true_translation() {
        let (a, b) = shifted_pair(6.0, -4.0);
        let ea = edge_map(&a);
        let eb = edge_map(&b);
        let at_truth = alignment_score(&translation8(6.0, -4.0), &ea, &eb);
        let at_identity = alignment_score(&translation8(0.0, 0.0), &ea, &eb);
        let nearby = alignment_score(&translation8(4.0, -4.0), &ea, &eb);
        assert!(at_truth > 0.99, "self-match NCC should be ~1, got {at_truth}");
        assert!(at_truth > nearby && nearby > at_identity);
    }

    #[test]
    fn alignment_score_rejects_warps_that_leave_the_frame() {
        let (a, b) = shifted_pair(0.0, 0.0);
        let ea = edge_map(&a);
        let eb = edge_map(&b);
        let far = alignment_score(&translation8(500.0, 0.0), &ea, &eb);
        assert_eq!(far, f64::NEG_INFINITY);
    }

    #[test]
    fn alignment_score_is_neutral_on_featureless_images() {
        let flat = Arr::from_elem(IxDyn(&[1, EST_SIZE, EST_SIZE]), 0.4);
        let e = edge_map(&flat);
        let (a, _) = shifted_pair(0.0, 0.0);
        let ea = edge_map(&a);
        assert_eq!(alignment_score(&translation8(1.0, 2.0), &ea, &e), 0.0);
    }

    #[test]
    fn lift_to_frame_round_trips_point_mapping() {
        let mut g = Graph::new();
        let h = Homography::from_flat8(&[1.02, 0.01, 4.0, -0.02, 0.99, -3.0, 1e-5, -2e-5]);
        let h8 = g.constant(Arr::from_shape_vec(IxDyn(&[8]), h.as_flat8().to_vec()).unwrap());
        let lifted = lift_to_frame(&mut g, h8, 256, 256);
        let hf = h8_value(&g, lifted);
        // A point mapped at full scale must agree with mapping at the working
        // scale and rescaling the result.
        let up = crate::geom::frame_scale_map(EST_SIZE, EST_SIZE, 256, 256);
        let down = crate::geom::frame_scale_map(256, 256, EST_SIZE, EST_SIZE);
        for p in [Point::new(10.0, 30.0), Point::new(200.0, 128.0)] {
            let via = up.apply(h.apply(down.apply(p)));
            let direct = hf.apply(p);
            assert!(via.distance(direct) < 1e-9);
        }
    }
}
