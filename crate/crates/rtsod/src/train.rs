//! Training loops and command-level entry points.
//!
//! Stage one ([`cmd_pretrain`]) trains the base homography estimator alone
//! on synthetic pairs with known misalignment. Stage two ([`cmd_train`])
//! imports those weights frozen and trains everything else against the
//! saliency loss. Both loops draw all randomness from per-epoch seeded
//! generators, so a resumed run replays the exact shuffle sequence and
//! checkpoints restore training bitwise.

use crate::align::{self, EstimateOptions, EST_SIZE};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{self, holdout_by_id, MisalignParams, Sample, Split, ToySceneSpec};
use crate::error::{Error, Result};
use crate::geom::{frame_scale_map, GeomError, Homography};
use crate::img::Image;
use crate::metrics::{self, EvalItem, EvalReport, Scores};
use crate::model;
use crate::nn::graph::{accumulate_param_grads, scale_param_grads};
use crate::nn::optim::AdamW;
use crate::nn::{tensor, Arr, Graph, ParamStore, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error as ThisError;

#[derive(ThisError, Debug)]
pub enum TrainError {
    #[error(
        "stage-2 training requires a pretrained estimator checkpoint; \
         joint training from scratch is not supported (pass --estimator)"
    )]
    MissingPretrainedEstimator,
    #[error("sample {id} has no true homography; pretraining needs H/ files")]
    MissingTrueHomography { id: String },
    #[error("non-finite loss at epoch {epoch}, batch {batch} (sample {sample})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        sample: String,
    },
    #[error("no training samples remain after the validation split")]
    NoTrainingSamples,
    #[error(transparent)]
    Geom(#[from] GeomError),
}

/// Derives an independent, reproducible generator for one epoch.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mixed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Per-iterate pretraining loss weights, exponentially emphasizing later
/// iterates (normalized to sum 1). Equal weighting lets the refinement tail
/// oscillate once the first iterations carry most of the improvement; this
/// keeps pressure on every subsequent iterate to not regress.
fn iterate_weights(k: usize) -> Vec<f64> {
    const GAMMA: f64 = 0.8;
    let mut ws: Vec<f64> = (0..k).map(|i| GAMMA.powi((k - 1 - i) as i32)).collect();
    let norm: f64 = ws.iter().sum();
    for w in &mut ws {
        *w /= norm;
    }
    ws
}

fn image_arr(img: &Image) -> Arr {
    tensor(
        &[img.channels(), img.height(), img.width()],
        img.as_slice().to_vec(),
    )
}

/// Grayscale working-resolution inputs for the estimator: (rgb, thermal).
pub fn estimator_pair(sample: &Sample) -> (Arr, Arr) {
    let rgb = sample.rgb.grayscale().resize_bilinear(EST_SIZE, EST_SIZE);
    let t = sample
        .thermal
        .grayscale()
        .resize_bilinear(EST_SIZE, EST_SIZE);
    (image_arr(&rgb), image_arr(&t))
}

/// Ideal corner displacement (the recovery map's corner offsets) at the
/// working resolution, conjugating the stored homography out of native
/// pixel coordinates when the source frame is not already EST_SIZE.
pub fn estimator_target(sample: &Sample) -> std::result::Result<Arr, TrainError> {
    let h_native = sample
        .true_homography
        .as_ref()
        .ok_or_else(|| TrainError::MissingTrueHomography {
            id: sample.id.clone(),
        })?;
    let (w, h) = (sample.thermal.width(), sample.thermal.height());
    let h_work = if (w, h) == (EST_SIZE, EST_SIZE) {
        *h_native
    } else {
        let to_native = frame_scale_map(EST_SIZE, EST_SIZE, w, h);
        let to_work = frame_scale_map(w, h, EST_SIZE, EST_SIZE);
        to_work.compose(h_native)?.compose(&to_native)?
    };
    Ok(align::true_displacement(&h_work, EST_SIZE)?)
}

struct PretrainItem {
    id: String,
    rgb: Arr,
    thermal: Arr,
    d_true: Arr,
}

fn pretrain_items(samples: Vec<Sample>) -> std::result::Result<Vec<PretrainItem>, TrainError> {
    samples
        .into_iter()
        .map(|s| {
            let d_true = estimator_target(&s)?;
            let (rgb, thermal) = estimator_pair(&s);
            Ok(PretrainItem {
                id: s.id,
                rgb,
                thermal,
                d_true,
            })
        })
        .collect()
}

/// Mean corner error of the estimator over a set of pairs, plus the error
/// of always answering identity.
fn holdout_corner_errors(store: &ParamStore, items: &[&PretrainItem], iterations: usize) -> (f64, f64) {
    let opts = EstimateOptions {
        iterations,
        use_adapters: false,
    };
    let zero = Arr::zeros(ndarray::IxDyn(&[8]));
    let mut est_sum = 0.0;
    let mut id_sum = 0.0;
    for item in items {
        let mut g = Graph::new();
        let rv = g.constant(item.rgb.clone());
        let tv = g.constant(item.thermal.clone());
        let est = align::estimate_homography(&mut g, store, rv, tv, None, &opts);
        let d = g.value(*est.displacements.last().expect("at least one iteration"));
        est_sum += align::corner_error(&d, &item.d_true);
        id_sum += align::corner_error(&zero, &item.d_true);
    }
    let n = items.len().max(1) as f64;
    (est_sum / n, id_sum / n)
}

pub struct PretrainOutcome {
    pub store: ParamStore,
    /// Held-out corner error of always answering identity.
    pub identity_error: f64,
    /// Held-out corner error of the estimator before any update.
    pub initial_error: f64,
    pub final_error: f64,
    pub checkpoint: PathBuf,
}

/// Pretrains the base estimator on the dataset named by the config and
/// writes `estimator.bin` (all tensors flagged frozen) under `out_dir`.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let samples = data::load_vt_dataset(&cfg.data_root, Split::Train)?;
    let items = pretrain_items(samples).map_err(Error::from)?;
    let (holdout, train): (Vec<_>, Vec<_>) = items.iter().partition(|s| holdout_by_id(&s.id));
    if train.is_empty() {
        return Err(TrainError::NoTrainingSamples.into());
    }

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    align::register_estimator(&mut store, &mut rng);
    let mut opt = AdamW::new(&store, cfg.lr, cfg.weight_decay);
    let opts = EstimateOptions {
        iterations: cfg.estimator_iterations,
        use_adapters: false,
    };

    let (initial_error, identity_error) =
        holdout_corner_errors(&store, &holdout, cfg.estimator_iterations);
    let _ = writeln!(
        log,
        "stage=pretrain lr={} wd={} batch={} epochs={} iterations={} train={} holdout={} identity_error={identity_error:.4}",
        cfg.lr,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.epochs,
        cfg.estimator_iterations,
        train.len(),
        holdout.len()
    );

    for epoch in 0..cfg.epochs {
        // Rebuilt from identity every epoch so the permutation is a pure
        // function of (seed, epoch) and resumed runs replay it exactly.
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.rng_seed, epoch));
        // Non-regression hinge: each iterate should be at least as close as
        // its predecessor, so any increase is penalized and the refinement
        // tail learns to hold still once converged. Off during the first
        // quarter of training: at the zero-initialized head every iterate is
        // identical, and the hinge would penalize exactly the perturbations
        // that escape that fixed point.
        let hinge = if epoch * 4 >= cfg.epochs { 0.5 } else { 0.0 };
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Option<Arr>> = Vec::new();
            for &i in batch {
                let item = train[i];
                let mut g = Graph::new();
                let rv = g.constant(item.rgb.clone());
                let tv = g.constant(item.thermal.clone());
                let est = align::estimate_homography(&mut g, &store, rv, tv, None, &opts);
                let ws = iterate_weights(est.proposals.len());
                let l1s: Vec<Var> = est
                    .proposals
                    .iter()
                    .map(|&d| g.l1_loss(d, &item.d_true))
                    .collect();
                let mut terms: Vec<(Var, f64)> =
                    l1s.iter().zip(&ws).map(|(&l, &w)| (l, w)).collect();
                if hinge > 0.0 && l1s.len() > 1 {
                    let lambda = hinge / (l1s.len() - 1) as f64;
                    for k in 1..l1s.len() {
                        let neg_prev = g.scale(l1s[k - 1], -1.0);
                        let rise = g.add(l1s[k], neg_prev);
                        terms.push((g.relu(rise), lambda));
                    }
                }
                let loss = g.weighted_sum_scalars(&terms);
                let lv = g.value(loss)[[0]];
                if !lv.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        sample: item.id.clone(),
                    }
                    .into());
                }
                epoch_loss += lv;
                let back = g.backward(loss);
                accumulate_param_grads(&mut grads, g.param_grads(&back, store.len()));
            }
            scale_param_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut store, &grads);
        }
        let (err, _) = holdout_corner_errors(&store, &holdout, cfg.estimator_iterations);
        let _ = writeln!(
            log,
            "epoch={epoch} loss={:.6} holdout_corner_error={err:.4}",
            epoch_loss / train.len() as f64
        );
    }

    let (final_error, _) = holdout_corner_errors(&store, &holdout, cfg.estimator_iterations);
    store.set_frozen_prefix("estimator.", true);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("estimator.bin");
    Checkpoint::from_store(
        &store,
        cfg,
        cfg.epochs as u64,
        Some(final_error),
        cfg.rng_seed,
        0,
        None,
    )
    .save(&path)?;
    let _ = writeln!(
        log,
        "pretrain_done holdout_corner_error={final_error:.4} identity_error={identity_error:.4} checkpoint={}",
        path.display()
    );
    Ok(PretrainOutcome {
        store,
        identity_error,
        initial_error,
        final_error,
        checkpoint: path,
    })
}

struct TrainItem {
    sample: Sample,
    gt_input: Arr,
}

fn homography_log_value(h: &Homography) -> String {
    h.to_row_major()
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect::<Vec<_>>()
        .join(",")
}

fn validation_pass(
    store: &ParamStore,
    cfg: &RunConfig,
    val: &[&TrainItem],
) -> Result<Option<(Scores, Homography)>> {
    if val.is_empty() {
        return Ok(None);
    }
    let mut scores = Vec::with_capacity(val.len());
    let mut first_h = Homography::identity();
    for (i, item) in val.iter().enumerate() {
        let p = model::predict(store, cfg, &item.sample.rgb, &item.sample.thermal);
        if i == 0 {
            first_h = p.h;
        }
        let gt = item.sample.gt.as_ref().expect("validation sample has gt");
        scores.push(metrics::score_pair(&p.prob, gt)?);
    }
    let n = scores.len() as f64;
    let mean = Scores {
        e: scores.iter().map(|s| s.e).sum::<f64>() / n,
        s: scores.iter().map(|s| s.s).sum::<f64>() / n,
        f: scores.iter().map(|s| s.f).sum::<f64>() / n,
    };
    Ok(Some((mean, first_h)))
}

pub struct TrainOutcome {
    pub store: ParamStore,
    pub epochs_run: usize,
    pub last_val: Option<Scores>,
    pub checkpoint: PathBuf,
}

/// Stage-2 training: imports the pretrained estimator (frozen unless the
/// config unfreezes it), trains adapters, encoders, fusion, correlation,
/// and decoder against the saliency loss, and checkpoints every epoch to
/// `out_dir/checkpoint.bin`.
pub fn cmd_train(
    cfg: &RunConfig,
    estimator: Option<&Path>,
    resume: Option<&Path>,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let estimator = estimator.ok_or(TrainError::MissingPretrainedEstimator)?;

    let samples = data::load_vt_dataset(&cfg.data_root, Split::Train)?;
    let s = cfg.input_size;
    let items: Vec<TrainItem> = samples
        .into_iter()
        .map(|sample| {
            let gt = sample.gt.as_ref().expect("train split guarantees gt");
            let gt_input = image_arr(&gt.resize_nearest(s, s));
            TrainItem { sample, gt_input }
        })
        .collect();
    let (val, train): (Vec<_>, Vec<_>) = items.iter().partition(|t| holdout_by_id(&t.sample.id));
    if train.is_empty() {
        return Err(TrainError::NoTrainingSamples.into());
    }

    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    model::register_model(&mut store, &mut rng, cfg);
    Checkpoint::load(estimator)?.restore_prefix(
        &mut store,
        "estimator.",
        !cfg.full_finetune_estimator,
    )?;
    let mut opt = AdamW::new(&store, cfg.lr, cfg.weight_decay);

    let mut start_epoch = 0usize;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        ck.restore_into(&mut store)?;
        ck.restore_optim(&mut opt)?;
        start_epoch = ck.epoch as usize;
    }

    let _ = writeln!(
        log,
        "stage=train lr={} wd={} batch={} epochs={} input={} seed={} start_epoch={start_epoch} train={} val={}",
        cfg.lr,
        cfg.weight_decay,
        cfg.batch_size,
        cfg.epochs,
        cfg.input_size,
        cfg.rng_seed,
        train.len(),
        val.len()
    );

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join("checkpoint.bin");
    let mut last_val = None;
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut epoch_rng(cfg.rng_seed, epoch));
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads: Vec<Option<Arr>> = Vec::new();
            for &i in batch {
                let item = train[i];
                let mut g = Graph::new();
                let out = model::forward(&mut g, &store, cfg, &item.sample.rgb, &item.sample.thermal);
                let loss = g.bce_dice_loss(
                    out.prediction.prob,
                    &item.gt_input,
                    cfg.bce_weight,
                    cfg.dice_weight,
                );
                let lv = g.value(loss)[[0]];
                if !lv.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                        sample: item.sample.id.clone(),
                    }
                    .into());
                }
                epoch_loss += lv;
                let back = g.backward(loss);
                accumulate_param_grads(&mut grads, g.param_grads(&back, store.len()));
            }
            scale_param_grads(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut store, &grads);
        }

        let val_line = validation_pass(&store, cfg, &val)?;
        let mut line = format!(
            "epoch={epoch} loss={:.6}",
            epoch_loss / train.len() as f64
        );
        if let Some((scores, h)) = &val_line {
            line.push_str(&format!(
                " val_e={:.4} val_s={:.4} val_f={:.4} h_sample={}",
                scores.e,
                scores.s,
                scores.f,
                homography_log_value(h)
            ));
            last_val = Some(*scores);
        }
        let _ = writeln!(log, "{line}");

        Checkpoint::from_store(
            &store,
            cfg,
            (epoch + 1) as u64,
            last_val.map(|v| 1.0 - v.s),
            cfg.rng_seed,
            0,
            Some(&opt),
        )
        .save(&ckpt_path)?;
    }

    Ok(TrainOutcome {
        store,
        epochs_run: cfg.epochs.saturating_sub(start_epoch),
        last_val,
        checkpoint: ckpt_path,
    })
}

/// Rebuilds a parameter store (and its config) from a full checkpoint.
pub fn store_from_checkpoint(ck: &Checkpoint) -> Result<(RunConfig, ParamStore)> {
    let cfg = ck.config()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    model::register_model(&mut store, &mut rng, &cfg);
    ck.restore_into(&mut store)?;
    Ok((cfg, store))
}

/// Runs inference over a labelled dataset and writes the tab-separated
/// metric report to `report_path`.
pub fn cmd_eval(
    checkpoint: &Path,
    data_root: &Path,
    report_path: &Path,
    log: &mut dyn Write,
) -> Result<EvalReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, store) = store_from_checkpoint(&ck)?;
    let samples = data::load_vt_dataset(data_root, Split::Test)?;
    let mut eval_items = Vec::with_capacity(samples.len());
    for sample in samples {
        let Some(gt) = sample.gt else {
            return Err(data::DataError::MissingGroundTruth { id: sample.id }.into());
        };
        let p = model::predict(&store, &cfg, &sample.rgb, &sample.thermal);
        eval_items.push(EvalItem {
            id: sample.id,
            pred: p.prob,
            gt,
            attributes: sample.attributes,
        });
    }
    let report = metrics::evaluate_dataset(&eval_items)?;
    if let Some(dir) = report_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(report_path, report.to_tsv()).map_err(|e| Error::io(report_path, e))?;
    let _ = writeln!(
        log,
        "eval n={} e={:.4} s={:.4} f={:.4} report={}",
        report.per_image.len(),
        report.aggregate.e,
        report.aggregate.s,
        report.aggregate.f,
        report_path.display()
    );
    Ok(report)
}

/// Runs one RGB/thermal pair through a checkpoint and writes `pred.png`,
/// `H.txt` (9 reals, row-major), and `warped_t.png` under `out_dir`.
pub fn cmd_infer(
    checkpoint: &Path,
    rgb_path: &Path,
    thermal_path: &Path,
    out_dir: &Path,
    log: &mut dyn Write,
) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let (cfg, store) = store_from_checkpoint(&ck)?;
    let rgb = crate::img::load_rgb(rgb_path)?;
    let thermal = crate::img::load_native(thermal_path)?;
    let p = model::predict(&store, &cfg, &rgb, &thermal);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    p.prob.save_gray8(&out_dir.join("pred.png"))?;
    p.warped_thermal.save_gray8(&out_dir.join("warped_t.png"))?;
    let mut text = String::new();
    for row in p.h.to_row_major().chunks(3) {
        text.push_str(&format!("{} {} {}\n", row[0], row[1], row[2]));
    }
    let h_path = out_dir.join("H.txt");
    std::fs::write(&h_path, text).map_err(|e| Error::io(&h_path, e))?;
    let _ = writeln!(
        log,
        "infer degenerate={} out={}",
        p.degenerate,
        out_dir.display()
    );
    Ok(())
}

/// Materializes `count` toy scenes (alternating one and two salient
/// objects, tagged SO/MO in attributes.txt) under `out_root`.
pub fn cmd_synth(
    cfg: &RunConfig,
    count: usize,
    image_size: usize,
    out_root: &Path,
    log: &mut dyn Write,
) -> Result<()> {
    let mut attr_lines = String::new();
    for i in 0..count {
        let n_objects = 1 + i % 2;
        let spec = ToySceneSpec {
            image_size,
            n_objects,
            misalign: MisalignParams::standard(),
        };
        let seed = cfg.rng_seed.wrapping_add(i as u64);
        let sample = data::generate_toy_scene(&spec, seed)?;
        data::write_sample(out_root, &sample)?;
        let tag = if n_objects == 1 { "SO" } else { "MO" };
        attr_lines.push_str(&format!("{}: {}\n", sample.id, tag));
    }
    let attr_path = out_root.join("attributes.txt");
    std::fs::write(&attr_path, attr_lines).map_err(|e| Error::io(&attr_path, e))?;
    let _ = writeln!(
        log,
        "synth count={count} image_size={image_size} seed={} root={}",
        cfg.rng_seed,
        out_root.display()
    );
    Ok(())
}
