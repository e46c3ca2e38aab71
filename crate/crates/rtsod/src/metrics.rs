//! Saliency metrics and dataset-level reporting.
//!
//! Three standard measures, each mapping a probability map and a binary
//! mask to `[0, 1]`:
//!
//! * F: precision/recall balance of the adaptively binarized prediction,
//!   threshold `min(1, 2 * mean(pred))`, beta^2 = 0.3.
//! * S: 0.5 * object similarity + 0.5 * region similarity, where the
//!   region term is a 4-block SSIM split at the mask centroid.
//! * E: mean enhanced-alignment of the binarized prediction's bias matrix
//!   against the mask's bias matrix.
//!
//! Variance-like quantities use the population convention (divide by N).
//! Degenerate masks follow the usual conventions: for an all-zero mask
//! S = 1 - mean(pred), E = 1 - mean(binarized), F = 0; for an all-one
//! mask S = mean(pred) and E = mean(binarized).
//!
//! [`reference`] holds deliberately naive re-derivations of the same
//! formulas used only for cross-checking.

use crate::img::Image;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Error, Debug)]
pub enum EvalError {
    #[error("metric inputs must be single-channel, got {0} channels")]
    NotSingleChannel(usize),
    #[error("prediction is {pred_h}x{pred_w} but ground truth is {gt_h}x{gt_w}")]
    ShapeMismatch {
        pred_h: usize,
        pred_w: usize,
        gt_h: usize,
        gt_w: usize,
    },
    #[error("cannot evaluate an empty dataset")]
    EmptyDataset,
}

/// The three measures for one image or one aggregate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub e: f64,
    pub s: f64,
    pub f: f64,
}

/// One evaluation input: a prediction, its mask, and optional challenge
/// attribute tags.
pub struct EvalItem {
    pub id: String,
    pub pred: Image,
    pub gt: Image,
    pub attributes: Vec<String>,
}

/// Per-image scores, their means, and per-attribute means over the tagged
/// subsets (sorted by attribute name; empty when nothing is tagged).
pub struct EvalReport {
    pub per_image: Vec<(String, Scores)>,
    pub aggregate: Scores,
    pub per_attribute: Vec<(String, Scores, usize)>,
}

fn validate(pred: &Image, gt: &Image) -> Result<(usize, usize), EvalError> {
    if pred.channels() != 1 {
        return Err(EvalError::NotSingleChannel(pred.channels()));
    }
    if gt.channels() != 1 {
        return Err(EvalError::NotSingleChannel(gt.channels()));
    }
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(EvalError::ShapeMismatch {
            pred_h: pred.height(),
            pred_w: pred.width(),
            gt_h: gt.height(),
            gt_w: gt.width(),
        });
    }
    Ok((gt.height(), gt.width()))
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Adaptive binarization at `min(1, 2 * mean)`, inclusive so that a
/// binary prediction always reproduces itself. Exact zeros never
/// activate, which keeps the all-zero map binarizing to all zeros even
/// though its threshold is 0.
fn binarize_adaptive(pred: &Image) -> Vec<bool> {
    let tau = (2.0 * mean(pred.as_slice())).min(1.0);
    pred.as_slice().iter().map(|&v| v >= tau && v > 0.0).collect()
}

fn mask_of(gt: &Image) -> Vec<bool> {
    gt.as_slice().iter().map(|&v| v >= 0.5).collect()
}

/// Adaptive-threshold F-measure with beta^2 = 0.3; 0 when precision and
/// recall are both zero or the mask is empty.
pub fn f_measure(pred: &Image, gt: &Image) -> Result<f64, EvalError> {
    validate(pred, gt)?;
    let bin = binarize_adaptive(pred);
    let mask = mask_of(gt);
    let tp = bin.iter().zip(&mask).filter(|&(&b, &g)| b && g).count() as f64;
    let np = bin.iter().filter(|&&b| b).count() as f64;
    let ng = mask.iter().filter(|&&g| g).count() as f64;
    let p = if np > 0.0 { tp / np } else { 0.0 };
    let r = if ng > 0.0 { tp / ng } else { 0.0 };
    if p + r == 0.0 {
        Ok(0.0)
    } else {
        Ok(1.3 * p * r / (0.3 * p + r))
    }
}

/// Enhanced-alignment measure of the adaptively binarized prediction.
pub fn e_measure(pred: &Image, gt: &Image) -> Result<f64, EvalError> {
    validate(pred, gt)?;
    let bin: Vec<f64> = binarize_adaptive(pred)
        .into_iter()
        .map(|b| f64::from(u8::from(b)))
        .collect();
    let mask: Vec<f64> = mask_of(gt)
        .into_iter()
        .map(|g| f64::from(u8::from(g)))
        .collect();
    let mg = mean(&mask);
    let mb = mean(&bin);
    if mg == 0.0 {
        return Ok(1.0 - mb);
    }
    if mg == 1.0 {
        return Ok(mb);
    }
    let eps = 1e-12;
    let total: f64 = bin
        .iter()
        .zip(&mask)
        .map(|(&b, &g)| {
            let pg = g - mg;
            let pb = b - mb;
            let xi = 2.0 * pg * pb / (pg * pg + pb * pb + eps);
            (1.0 + xi).powi(2) / 4.0
        })
        .sum();
    Ok(total / mask.len() as f64)
}

fn object_score(vals: &[f64]) -> f64 {
    let x = mean(vals);
    let var = vals.iter().map(|&v| (v - x).powi(2)).sum::<f64>() / vals.len() as f64;
    2.0 * x / (x * x + 1.0 + var.sqrt())
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    let xp = mean(p);
    let xg = mean(g);
    let mut vp = 0.0;
    let mut vg = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in p.iter().zip(g) {
        vp += (a - xp).powi(2);
        vg += (b - xg).powi(2);
        cov += (a - xp) * (b - xg);
    }
    vp /= n;
    vg /= n;
    cov /= n;
    let alpha = 4.0 * xp * xg * cov;
    let beta = (xp * xp + xg * xg) * (vp + vg);
    if beta == 0.0 {
        // Both blocks are constant (or both all-zero); similar only when
        // the constants agree.
        f64::from(xp == xg)
    } else {
        alpha / beta
    }
}

/// Centroid split point along one axis, 1-based: the first block takes
/// indices `0..split`. Always at least 1 and at most the axis length.
fn centroid_split(weighted_sum: f64, total: f64, len: usize) -> usize {
    let c = (weighted_sum / total).round();
    (c as usize).clamp(1, len)
}

fn s_region(pred: &Image, mask: &[bool], h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                total += 1.0;
                sx += (x + 1) as f64;
                sy += (y + 1) as f64;
            }
        }
    }
    let cx = centroid_split(sx, total, w);
    let cy = centroid_split(sy, total, h);
    let mut acc = 0.0;
    for (ys, xs) in [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ] {
        let n = ys.len() * xs.len();
        if n == 0 {
            continue;
        }
        let mut pv = Vec::with_capacity(n);
        let mut gv = Vec::with_capacity(n);
        for y in ys.clone() {
            for x in xs.clone() {
                pv.push(pred.get(0, y, x));
                gv.push(f64::from(u8::from(mask[y * w + x])));
            }
        }
        acc += (n as f64 / (h * w) as f64) * ssim_block(&pv, &gv);
    }
    acc
}

/// Structure measure: 0.5 * object term + 0.5 * centroid-split region
/// term, clamped to `[0, 1]`.
pub fn s_measure(pred: &Image, gt: &Image) -> Result<f64, EvalError> {
    let (h, w) = validate(pred, gt)?;
    let mask = mask_of(gt);
    let mg = mask.iter().filter(|&&g| g).count() as f64 / mask.len() as f64;
    let mp = mean(pred.as_slice());
    if mg == 0.0 {
        return Ok(1.0 - mp);
    }
    if mg == 1.0 {
        return Ok(mp);
    }
    let fg: Vec<f64> = pred
        .as_slice()
        .iter()
        .zip(&mask)
        .filter(|&(_, &g)| g)
        .map(|(&v, _)| v)
        .collect();
    let bg: Vec<f64> = pred
        .as_slice()
        .iter()
        .zip(&mask)
        .filter(|&(_, &g)| !g)
        .map(|(&v, _)| 1.0 - v)
        .collect();
    let s_obj = mg * object_score(&fg) + (1.0 - mg) * object_score(&bg);
    let s = 0.5 * s_obj + 0.5 * s_region(pred, &mask, h, w);
    Ok(s.clamp(0.0, 1.0))
}

/// All three measures for one prediction/mask pair. The prediction is
/// bilinearly resized to the mask's resolution if sizes differ, and
/// clamped to `[0, 1]`.
pub fn score_pair(pred: &Image, gt: &Image) -> Result<Scores, EvalError> {
    if pred.channels() != 1 {
        return Err(EvalError::NotSingleChannel(pred.channels()));
    }
    let mut p = if pred.height() != gt.height() || pred.width() != gt.width() {
        pred.resize_bilinear(gt.height(), gt.width())
    } else {
        pred.clone()
    };
    p.clamp01();
    Ok(Scores {
        e: e_measure(&p, gt)?,
        s: s_measure(&p, gt)?,
        f: f_measure(&p, gt)?,
    })
}

fn mean_scores(scores: &[Scores]) -> Scores {
    let n = scores.len() as f64;
    Scores {
        e: scores.iter().map(|s| s.e).sum::<f64>() / n,
        s: scores.iter().map(|s| s.s).sum::<f64>() / n,
        f: scores.iter().map(|s| s.f).sum::<f64>() / n,
    }
}

/// Scores every item, then averages overall and per attribute tag.
pub fn evaluate_dataset(items: &[EvalItem]) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut per_image = Vec::with_capacity(items.len());
    let mut by_attr: BTreeMap<&str, Vec<Scores>> = BTreeMap::new();
    for item in items {
        let scores = score_pair(&item.pred, &item.gt)?;
        per_image.push((item.id.clone(), scores));
        for a in &item.attributes {
            by_attr.entry(a.as_str()).or_default().push(scores);
        }
    }
    let all: Vec<Scores> = per_image.iter().map(|(_, s)| *s).collect();
    let aggregate = mean_scores(&all);
    let per_attribute = by_attr
        .into_iter()
        .map(|(name, scores)| (name.to_string(), mean_scores(&scores), scores.len()))
        .collect();
    Ok(EvalReport {
        per_image,
        aggregate,
        per_attribute,
    })
}

impl EvalReport {
    /// Tab-separated report: one row per image, a summary block, and (when
    /// attributes are present) an attribute table in the same format.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tEm\tSm\tFm\n");
        for (id, s) in &self.per_image {
            out.push_str(&format!("{id}\t{:.6}\t{:.6}\t{:.6}\n", s.e, s.s, s.f));
        }
        out.push_str("\nsummary\tEm\tSm\tFm\n");
        out.push_str(&format!(
            "mean\t{:.6}\t{:.6}\t{:.6}\n",
            self.aggregate.e, self.aggregate.s, self.aggregate.f
        ));
        if !self.per_attribute.is_empty() {
            out.push_str("\nattribute\tEm\tSm\tFm\tcount\n");
            for (name, s, n) in &self.per_attribute {
                out.push_str(&format!(
                    "{name}\t{:.6}\t{:.6}\t{:.6}\t{n}\n",
                    s.e, s.s, s.f
                ));
            }
        }
        out
    }
}

/// Independent scalar-loop re-derivations of the three measures, kept
/// free of any code shared with the primary implementations. Used by the
/// test suite to cross-check formula transcription.
pub mod reference {
    use crate::img::Image;

    fn grid(img: &Image) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        for y in 0..img.height() {
            let mut row = Vec::new();
            for x in 0..img.width() {
                row.push(img.get(0, y, x));
            }
            rows.push(row);
        }
        rows
    }

    fn binarize(img: &Image) -> Vec<Vec<f64>> {
        let g = grid(img);
        let mut sum = 0.0;
        let mut count = 0.0;
        for row in &g {
            for &v in row {
                sum += v;
                count += 1.0;
            }
        }
        let mut tau = 2.0 * sum / count;
        if tau > 1.0 {
            tau = 1.0;
        }
        g.iter()
            .map(|row| {
                row.iter()
                    .map(|&v| if v >= tau && v > 0.0 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    fn mask_grid(gt: &Image) -> Vec<Vec<f64>> {
        grid(gt)
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| if v >= 0.5 { 1.0 } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    pub fn f_measure(pred: &Image, gt: &Image) -> f64 {
        let bin = binarize(pred);
        let mask = mask_grid(gt);
        let mut tp = 0.0;
        let mut npred = 0.0;
        let mut ngt = 0.0;
        for y in 0..bin.len() {
            for x in 0..bin[0].len() {
                tp += bin[y][x] * mask[y][x];
                npred += bin[y][x];
                ngt += mask[y][x];
            }
        }
        let precision = if npred > 0.0 { tp / npred } else { 0.0 };
        let recall = if ngt > 0.0 { tp / ngt } else { 0.0 };
        if precision + recall == 0.0 {
            0.0
        } else {
            (1.0 + 0.3) * precision * recall / (0.3 * precision + recall)
        }
    }

    pub fn e_measure(pred: &Image, gt: &Image) -> f64 {
        let bin = binarize(pred);
        let mask = mask_grid(gt);
        let h = mask.len();
        let w = mask[0].len();
        let n = (h * w) as f64;
        let mut mg = 0.0;
        let mut mb = 0.0;
        for y in 0..h {
            for x in 0..w {
                mg += mask[y][x];
                mb += bin[y][x];
            }
        }
        mg /= n;
        mb /= n;
        if mg == 0.0 {
            return 1.0 - mb;
        }
        if mg == 1.0 {
            return mb;
        }
        let mut total = 0.0;
        for y in 0..h {
            for x in 0..w {
                let pg = mask[y][x] - mg;
                let pb = bin[y][x] - mb;
                let xi = 2.0 * pg * pb / (pg * pg + pb * pb + 1e-12);
                total += (1.0 + xi) * (1.0 + xi) / 4.0;
            }
        }
        total / n
    }

    fn moments(vals: &[f64]) -> (f64, f64) {
        let n = vals.len() as f64;
        let mut m = 0.0;
        for &v in vals {
            m += v;
        }
        m /= n;
        let mut var = 0.0;
        for &v in vals {
            var += (v - m) * (v - m);
        }
        (m, var / n)
    }

    fn ssim(p: &[f64], g: &[f64]) -> f64 {
        let (xp, vp) = moments(p);
        let (xg, vg) = moments(g);
        let n = p.len() as f64;
        let mut cov = 0.0;
        for i in 0..p.len() {
            cov += (p[i] - xp) * (g[i] - xg);
        }
        cov /= n;
        let alpha = 4.0 * xp * xg * cov;
        let beta = (xp * xp + xg * xg) * (vp + vg);
        if beta == 0.0 {
            if xp == xg {
                1.0
            } else {
                0.0
            }
        } else {
            alpha / beta
        }
    }

    pub fn s_measure(pred: &Image, gt: &Image) -> f64 {
        let p = grid(pred);
        let mask = mask_grid(gt);
        let h = mask.len();
        let w = mask[0].len();
        let n = (h * w) as f64;
        let mut ngt = 0.0;
        let mut mp = 0.0;
        for y in 0..h {
            for x in 0..w {
                ngt += mask[y][x];
                mp += p[y][x];
            }
        }
        mp /= n;
        if ngt == 0.0 {
            return 1.0 - mp;
        }
        if ngt == n {
            return mp;
        }

        let mut fg = Vec::new();
        let mut bg = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if mask[y][x] == 1.0 {
                    fg.push(p[y][x]);
                } else {
                    bg.push(1.0 - p[y][x]);
                }
            }
        }
        let u = ngt / n;
        let score_of = |vals: &[f64]| {
            let (x, var) = moments(vals);
            2.0 * x / (x * x + 1.0 + var.sqrt())
        };
        let s_object = u * score_of(&fg) + (1.0 - u) * score_of(&bg);

        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask[y][x] == 1.0 {
                    sx += (x + 1) as f64;
                    sy += (y + 1) as f64;
                }
            }
        }
        let clampi = |v: f64, hi: usize| -> usize {
            let r = v.round() as i64;
            r.max(1).min(hi as i64) as usize
        };
        let cx = clampi(sx / ngt, w);
        let cy = clampi(sy / ngt, h);
        let mut s_reg = 0.0;
        for (y0, y1, x0, x1) in [
            (0, cy, 0, cx),
            (0, cy, cx, w),
            (cy, h, 0, cx),
            (cy, h, cx, w),
        ] {
            if y0 == y1 || x0 == x1 {
                continue;
            }
            let mut pv = Vec::new();
            let mut gv = Vec::new();
            for row in y0..y1 {
                for col in x0..x1 {
                    pv.push(p[row][col]);
                    gv.push(mask[row][col]);
                }
            }
            let weight = pv.len() as f64 / n;
            s_reg += weight * ssim(&pv, &gv);
        }

        let s = 0.5 * s_object + 0.5 * s_reg;
        s.max(0.0).min(1.0)
    }
}
