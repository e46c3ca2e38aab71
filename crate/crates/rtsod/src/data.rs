//! Dataset ingestion, synthetic misalignment, and toy-scene generation.
//!
//! Folder layout: `root/{RGB,T,GT}/<id>.<ext>` with `ext` in {png, jpg,
//! jpeg, bmp}, optionally `root/H/<id>.txt` (nine whitespace-separated
//! reals, row-major) holding the true homography of a synthetically
//! misaligned pair and `root/attributes.txt` with lines `id: TAG1,TAG2`.
//!
//! Warp convention: `warp(img, h)` reads `img` at `h(x)` for every output
//! pixel `x`. A sample's `true_homography` is the map that produced its
//! stored thermal from the aligned one, so warping the stored thermal by
//! `true_homography.inverse()` re-aligns it with the RGB frame.

use crate::geom::{image_corners, solve_dlt, Homography, Point};
use crate::img::{self, Image};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("cannot encode {path}: {reason}")]
    Encode { path: PathBuf, reason: String },
    #[error("sample {id} is missing the {modality} modality")]
    MissingModality { id: String, modality: &'static str },
    #[error("sample {id} has no ground-truth mask")]
    MissingGroundTruth { id: String },
    #[error("bad homography file {path}: {reason}")]
    BadHomography { path: PathBuf, reason: String },
    #[error("bad attributes file {path}: {reason}")]
    BadAttributes { path: PathBuf, reason: String },
    #[error("dataset at {root} contains no samples")]
    EmptyDataset { root: PathBuf },
    #[error("no usable misalignment after {attempts} attempts")]
    DegenerateMisalignment { attempts: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), source }
    }
}

/// Loader strictness: a train split requires ground truth, a test split
/// tolerates its absence (inference-only use).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Split {
    Train,
    Test,
}

/// One RGB-thermal pair with optional mask, attribute tags, and (for
/// synthetic data) the homography that misaligned the thermal image.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub rgb: Image,
    pub thermal: Image,
    pub gt: Option<Image>,
    pub attributes: Vec<String>,
    pub true_homography: Option<Homography>,
}

/// Ranges for random misalignment sampling. All ranges are symmetric about
/// the identity, so zero ranges reproduce the input exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MisalignParams {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub perspective_frac: f64,
}

impl MisalignParams {
    /// Declared default ranges: rotation up to 10 degrees, translation up
    /// to 10% of size, scale in [0.9, 1.1], corner jitter up to 2%.
    pub fn standard() -> Self {
        MisalignParams {
            rotation_deg: 10.0,
            translate_frac: 0.1,
            scale_lo: 0.9,
            scale_hi: 1.1,
            perspective_frac: 0.02,
        }
    }

    pub fn identity() -> Self {
        MisalignParams {
            rotation_deg: 0.0,
            translate_frac: 0.0,
            scale_lo: 1.0,
            scale_hi: 1.0,
            perspective_frac: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0
            && self.translate_frac == 0.0
            && self.scale_lo == 1.0
            && self.scale_hi == 1.0
            && self.perspective_frac == 0.0
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rotation_deg < 0.0 || self.translate_frac < 0.0 || self.perspective_frac < 0.0 {
            return Err("misalignment ranges must be non-negative".into());
        }
        if !(self.scale_lo > 0.0 && self.scale_lo <= 1.0 && self.scale_hi >= 1.0) {
            return Err("scale range must contain 1 and stay positive".into());
        }
        Ok(())
    }
}

const IMAGE_EXTS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];
const MIN_IMAGE_SIDE: usize = 8;

fn find_image(dir: &Path, id: &str) -> Option<PathBuf> {
    IMAGE_EXTS
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

fn stems_in(dir: &Path) -> Result<Vec<String>, DataError> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let entry = entry.map_err(|e| DataError::io(dir, e))?;
        let path = entry.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if path.is_file() && ext_ok {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push(stem.to_string());
            }
        }
    }
    Ok(out)
}

fn check_min_size(im: &Image, path: &Path) -> Result<(), DataError> {
    if im.height() < MIN_IMAGE_SIDE || im.width() < MIN_IMAGE_SIDE {
        return Err(DataError::Decode {
            path: path.to_path_buf(),
            reason: format!("image smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"),
        });
    }
    Ok(())
}

fn parse_homography_file(path: &Path) -> Result<Homography, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let vals: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse::<f64>).collect();
    let vals = vals.map_err(|e| DataError::BadHomography {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if vals.len() != 9 {
        return Err(DataError::BadHomography {
            path: path.to_path_buf(),
            reason: format!("expected 9 values, found {}", vals.len()),
        });
    }
    let mut m = [0.0; 9];
    m.copy_from_slice(&vals);
    let h = Homography::from_row_major(&m)
        .and_then(|h| {
            h.inverse()?;
            Ok(h)
        })
        .map_err(|e| DataError::BadHomography {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    Ok(h)
}

fn parse_attributes_file(path: &Path) -> Result<BTreeMap<String, Vec<String>>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
    let mut map = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((id, tags)) = line.split_once(':') else {
            return Err(DataError::BadAttributes {
                path: path.to_path_buf(),
                reason: format!("line {}: missing ':'", ln + 1),
            });
        };
        let tags: Vec<String> = tags
            .split(',')
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        map.insert(id.trim().to_string(), tags);
    }
    Ok(map)
}

/// Loads every sample under `root`, sorted lexicographically by id. The id
/// universe is the union of stems found in RGB/, T/, and GT/; a stem
/// missing RGB or T is an error, and a stem missing GT is an error only for
/// [`Split::Train`].
pub fn load_vt_dataset(root: &Path, split: Split) -> Result<Vec<Sample>, DataError> {
    let rgb_dir = root.join("RGB");
    let t_dir = root.join("T");
    let gt_dir = root.join("GT");
    let h_dir = root.join("H");
    let mut ids: Vec<String> = stems_in(&rgb_dir)?
        .into_iter()
        .chain(stems_in(&t_dir)?)
        .chain(stems_in(&gt_dir)?)
        .collect();
    ids.sort();
    ids.dedup();
    if ids.is_empty() {
        return Err(DataError::EmptyDataset { root: root.to_path_buf() });
    }
    let attr_path = root.join("attributes.txt");
    let attrs = if attr_path.is_file() {
        parse_attributes_file(&attr_path)?
    } else {
        BTreeMap::new()
    };
    let mut samples = Vec::with_capacity(ids.len());
    for id in ids {
        let rgb_path = find_image(&rgb_dir, &id)
            .ok_or(DataError::MissingModality { id: id.clone(), modality: "RGB" })?;
        let t_path = find_image(&t_dir, &id)
            .ok_or(DataError::MissingModality { id: id.clone(), modality: "T" })?;
        let rgb = img::load_rgb(&rgb_path)?;
        check_min_size(&rgb, &rgb_path)?;
        let thermal = img::load_native(&t_path)?;
        check_min_size(&thermal, &t_path)?;
        let gt = match find_image(&gt_dir, &id) {
            Some(p) => {
                let m = img::load_mask(&p)?;
                if m.height() != rgb.height() || m.width() != rgb.width() {
                    return Err(DataError::Decode {
                        path: p,
                        reason: "ground-truth size differs from RGB".into(),
                    });
                }
                Some(m)
            }
            None if split == Split::Train => {
                return Err(DataError::MissingGroundTruth { id });
            }
            None => None,
        };
        let h_path = h_dir.join(format!("{id}.txt"));
        let true_homography =
            if h_path.is_file() { Some(parse_homography_file(&h_path)?) } else { None };
        let attributes = attrs.get(&id).cloned().unwrap_or_default();
        samples.push(Sample { id, rgb, thermal, gt, attributes, true_homography });
    }
    Ok(samples)
}

fn draw_symmetric<R: Rng>(rng: &mut R, half_range: f64) -> f64 {
    if half_range > 0.0 {
        rng.random_range(-half_range..half_range)
    } else {
        0.0
    }
}

/// Samples a misalignment homography for a `w x h` frame: a random affine
/// map about the image center plus independent per-corner jitter, solved
/// back to a homography through the four displaced corners. Degenerate
/// draws are retried up to 8 times.
pub fn sample_misalignment<R: Rng>(
    rng: &mut R,
    w: usize,
    h: usize,
    params: &MisalignParams,
) -> Result<Homography, DataError> {
    let corners = image_corners(w, h);
    let (cx, cy) = ((w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0);
    const ATTEMPTS: usize = 8;
    for _ in 0..ATTEMPTS {
        let theta = draw_symmetric(rng, params.rotation_deg).to_radians();
        let scale = if params.scale_lo < params.scale_hi {
            rng.random_range(params.scale_lo..params.scale_hi)
        } else {
            params.scale_lo
        };
        let tx = draw_symmetric(rng, params.translate_frac) * (w - 1) as f64;
        let ty = draw_symmetric(rng, params.translate_frac) * (h - 1) as f64;
        let (sin, cos) = theta.sin_cos();
        let mut dst = [Point::new(0.0, 0.0); 4];
        for (d, c) in dst.iter_mut().zip(&corners) {
            let (rx, ry) = (c.x - cx, c.y - cy);
            let ax = scale * (cos * rx - sin * ry) + cx + tx;
            let ay = scale * (sin * rx + cos * ry) + cy + ty;
            let jx = draw_symmetric(rng, params.perspective_frac) * (w - 1) as f64;
            let jy = draw_symmetric(rng, params.perspective_frac) * (h - 1) as f64;
            *d = Point::new(ax + jx, ay + jy);
        }
        if let Ok(h_true) = solve_dlt(&corners, &dst) {
            if h_true.inverse().is_ok() {
                return Ok(h_true);
            }
        }
    }
    Err(DataError::DegenerateMisalignment { attempts: ATTEMPTS })
}

/// Replaces the thermal image by its warp under `h_true` (zero fill outside
/// the source frame) and records `h_true` on the sample.
pub fn misalign_with(sample: &Sample, h_true: &Homography) -> Sample {
    let (warped, _valid) = crate::nn::sample::warp_image_plain(&sample.thermal, h_true);
    let mut out = sample.clone();
    out.thermal = warped;
    out.true_homography = Some(*h_true);
    out
}

/// Applies random misalignment to an aligned sample. Identity parameter
/// ranges short-circuit to a bitwise no-op with an identity homography; the
/// result is deterministic in `(sample, params, seed)`.
pub fn synthesize_misalignment(
    sample: &Sample,
    params: &MisalignParams,
    seed: u64,
) -> Result<Sample, DataError> {
    if params.is_identity() {
        let mut out = sample.clone();
        out.true_homography = Some(Homography::identity());
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h_true =
        sample_misalignment(&mut rng, sample.thermal.width(), sample.thermal.height(), params)?;
    Ok(misalign_with(sample, &h_true))
}

/// Toy-scene recipe: `n_objects` bright shapes on a textured background,
/// plus equally bright thermally-cold distractor shapes that only the
/// thermal channel can rule out.
#[derive(Clone, Copy, Debug)]
pub struct ToySceneSpec {
    pub image_size: usize,
    pub n_objects: usize,
    pub misalign: MisalignParams,
}

#[derive(Clone, Copy)]
enum ShapeKind {
    Circle,
    Square,
    Diamond,
}

#[derive(Clone, Copy)]
struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Square => dx.abs() <= self.r && dy.abs() <= self.r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.4 * self.r,
        }
    }
}

fn draw_shape<R: Rng>(rng: &mut R, size: usize) -> Shape {
    let kind = match rng.random_range(0..3u32) {
        0 => ShapeKind::Circle,
        1 => ShapeKind::Square,
        _ => ShapeKind::Diamond,
    };
    let s = size as f64;
    let r = s * rng.random_range(0.08..0.18);
    let lo = r + 2.0;
    let hi = s - 3.0 - r;
    let cx = rng.random_range(lo..hi);
    let cy = rng.random_range(lo..hi);
    Shape { kind, cx, cy, r }
}

fn draw_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    let lum: f64 = rng.random_range(0.75..0.95);
    let mut c = [0.0; 3];
    for ch in &mut c {
        *ch = (lum + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0);
    }
    c
}

fn paint(rgb: &mut Image, shape: &Shape, color: &[f64; 3]) {
    let (h, w) = (rgb.height(), rgb.width());
    for y in 0..h {
        for x in 0..w {
            if shape.contains(x as f64, y as f64) {
                for (ci, &col) in color.iter().enumerate() {
                    rgb.set(ci, y, x, col);
                }
            }
        }
    }
}

/// Generates one scene deterministically from `(spec, seed)`: the RGB
/// image, its binary ground truth, and a noisy intensity-remap thermal
/// image (hot where salient) misaligned by `spec.misalign`.
pub fn generate_toy_scene(spec: &ToySceneSpec, seed: u64) -> Result<Sample, DataError> {
    assert!(spec.image_size >= 32, "toy scenes need image_size >= 32");
    assert!(spec.n_objects >= 1, "toy scenes need at least one object");
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Background: per-channel base tone plus two shared sinusoidal waves.
    let base_lum = rng.random_range(0.25..0.38);
    let base: Vec<f64> = (0..3)
        .map(|_| base_lum + rng.random_range(-0.04..0.04))
        .collect();
    let mut waves = Vec::new();
    for _ in 0..2 {
        let amp = rng.random_range(0.02..0.05);
        let fx = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
        let fy = rng.random_range(0.5..2.5) * std::f64::consts::TAU / size as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        waves.push((amp, fx, fy, phase));
    }
    let mut rgb = Image::from_fn(3, size, size, |c, y, x| {
        let mut v = base[c];
        for &(amp, fx, fy, phase) in &waves {
            v += amp * (fx * x as f64 + fy * y as f64 + phase).sin();
        }
        v
    });

    // Salient objects, then distractors that mimic their appearance but
    // carry no heat. Distractors avoid sitting on top of true objects.
    let mut objects = Vec::with_capacity(spec.n_objects);
    let mut colors = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        objects.push(draw_shape(&mut rng, size));
        colors.push(draw_color(&mut rng));
    }
    let mut distractors = Vec::with_capacity(spec.n_objects);
    let mut d_colors = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let mut shape = draw_shape(&mut rng, size);
        for _ in 0..20 {
            let clear = objects.iter().all(|o| {
                let d = ((shape.cx - o.cx).powi(2) + (shape.cy - o.cy).powi(2)).sqrt();
                d > 0.9 * (shape.r + o.r)
            });
            if clear {
                break;
            }
            shape = draw_shape(&mut rng, size);
        }
        distractors.push(shape);
        d_colors.push(draw_color(&mut rng));
    }
    for (shape, color) in distractors.iter().zip(&d_colors) {
        paint(&mut rgb, shape, color);
    }
    for (shape, color) in objects.iter().zip(&colors) {
        paint(&mut rgb, shape, color);
    }

    let gt = Image::from_fn(1, size, size, |_, y, x| {
        if objects.iter().any(|o| o.contains(x as f64, y as f64)) {
            1.0
        } else {
            0.0
        }
    });

    // Pixel noise over the finished composition.
    for v in rgb.as_mut_slice() {
        *v = (*v + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0);
    }

    // Thermal: saliency-correlated intensity with Gaussian sensor noise.
    // The noise field is band-limited (two 3x3 binomial blur passes, raw
    // sigma scaled so the marginal deviation stays 0.05): spatially white
    // noise cannot survive the warp-and-unwarp round trip within the
    // documented 0.02 mean-absolute-error recovery bound.
    let raw_sigma = 0.05 / 0.2734;
    let noise = Normal::new(0.0, raw_sigma).expect("valid normal");
    let mut field: Vec<f64> = (0..size * size).map(|_| noise.sample(&mut rng)).collect();
    for _ in 0..2 {
        let mut rows = vec![0.0; size * size];
        for y in 0..size {
            for x in 0..size {
                let xm = x.saturating_sub(1);
                let xp = (x + 1).min(size - 1);
                rows[y * size + x] = 0.25 * field[y * size + xm]
                    + 0.5 * field[y * size + x]
                    + 0.25 * field[y * size + xp];
            }
        }
        for y in 0..size {
            let ym = y.saturating_sub(1);
            let yp = (y + 1).min(size - 1);
            for x in 0..size {
                field[y * size + x] = 0.25 * rows[ym * size + x]
                    + 0.5 * rows[y * size + x]
                    + 0.25 * rows[yp * size + x];
            }
        }
    }
    let mut thermal = Image::zeros(1, size, size);
    for y in 0..size {
        for x in 0..size {
            let v = 0.2 + 0.7 * gt.get(0, y, x) + field[y * size + x];
            thermal.set(0, y, x, v.clamp(0.0, 1.0));
        }
    }

    let aligned = Sample {
        id: format!("{seed:08}"),
        rgb,
        thermal,
        gt: Some(gt),
        attributes: Vec::new(),
        true_homography: None,
    };
    if spec.misalign.is_identity() {
        let mut out = aligned;
        out.true_homography = Some(Homography::identity());
        return Ok(out);
    }
    let h_true = sample_misalignment(&mut rng, size, size, &spec.misalign)?;
    Ok(misalign_with(&aligned, &h_true))
}

/// Writes a sample into the standard folder layout under `root`, creating
/// directories as needed. RGB is stored as 8-bit color PNG, thermal and GT
/// as 8-bit grayscale PNG, the true homography (if any) as `H/<id>.txt`.
pub fn write_sample(root: &Path, sample: &Sample) -> Result<(), DataError> {
    for sub in ["RGB", "T", "GT"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
    }
    sample
        .rgb
        .save_rgb8(&root.join("RGB").join(format!("{}.png", sample.id)))?;
    let thermal_gray =
        if sample.thermal.channels() == 1 { sample.thermal.clone() } else { sample.thermal.grayscale() };
    thermal_gray.save_gray8(&root.join("T").join(format!("{}.png", sample.id)))?;
    if let Some(gt) = &sample.gt {
        gt.save_gray8(&root.join("GT").join(format!("{}.png", sample.id)))?;
    }
    if let Some(h) = &sample.true_homography {
        let dir = root.join("H");
        std::fs::create_dir_all(&dir).map_err(|e| DataError::io(&dir, e))?;
        let path = dir.join(format!("{}.txt", sample.id));
        let mut text = String::new();
        for row in h.to_row_major().chunks(3) {
            let _ = writeln!(text, "{} {} {}", row[0], row[1], row[2]);
        }
        std::fs::write(&path, text).map_err(|e| DataError::io(&path, e))?;
    }
    Ok(())
}

/// FNV-1a hash, the basis of the fixed validation split.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Fixed 10% holdout: a sample validates when its id hashes to 0 mod 10.
pub fn holdout_by_id(id: &str) -> bool {
    fnv1a(id.as_bytes()) % 10 == 0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{image_corners, mean_corner_distance};

    fn flat_sample(size: usize) -> Sample {
        let rgb = Image::from_fn(3, size, size, |c, y, x| {
            ((c + 1) as f64 * 0.1 + (y * size + x) as f64 / (size * size) as f64 * 0.5).min(1.0)
        });
        let thermal = Image::from_fn(1, size, size, |_, y, x| {
            ((x as f64 / size as f64) + (y as f64 / size as f64)) / 2.0
        });
        let gt = Image::from_fn(1, size, size, |_, y, x| {
            if x >= size / 4 && x < size / 2 && y >= size / 4 && y < size / 2 { 1.0 } else { 0.0 }
        });
        Sample {
            id: "t".into(),
            rgb,
            thermal,
            gt: Some(gt),
            attributes: Vec::new(),
            true_homography: None,
        }
    }

    #[test]
    fn identity_misalignment_is_exact_noop() {
        let s = flat_sample(16);
        let out = synthesize_misalignment(&s, &MisalignParams::identity(), 7).unwrap();
        assert_eq!(out.thermal.as_slice(), s.thermal.as_slice());
        let h = out.true_homography.unwrap();
        assert_eq!(h.to_row_major(), Homography::identity().to_row_major());
    }

    #[test]
    fn integer_shift_matches_index_oracle() {
        let s = flat_sample(16);
        let h = Homography::from_flat8(&[1.0, 0.0, 5.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let out = misalign_with(&s, &h);
        for y in 0..16 {
            for x in 0..16 {
                let expect = if x + 5 < 16 { s.thermal.get(0, y, x + 5) } else { 0.0 };
                assert!(
                    (out.thermal.get(0, y, x) - expect).abs() < 1e-12,
                    "pixel ({x},{y})"
                );
            }
        }
    }

    #[test]
    fn misalignment_is_deterministic_per_seed() {
        let s = flat_sample(32);
        let p = MisalignParams::standard();
        let a = synthesize_misalignment(&s, &p, 11).unwrap();
        let b = synthesize_misalignment(&s, &p, 11).unwrap();
        assert_eq!(a.thermal.as_slice(), b.thermal.as_slice());
        assert_eq!(
            a.true_homography.unwrap().to_row_major(),
            b.true_homography.unwrap().to_row_major()
        );
        let c = synthesize_misalignment(&s, &p, 12).unwrap();
        assert_ne!(a.thermal.as_slice(), c.thermal.as_slice());
    }

    #[test]
    fn inverse_warp_recovers_aligned_thermal() {
        let spec = ToySceneSpec {
            image_size: 64,
            n_objects: 2,
            misalign: MisalignParams::identity(),
        };
        for seed in 0..6 {
            let aligned = generate_toy_scene(&spec, seed).unwrap();
            let p = MisalignParams::standard();
            let moved = synthesize_misalignment(&aligned, &p, seed + 100).unwrap();
            let h = moved.true_homography.unwrap();
            let (recovered, valid_back) =
                crate::nn::sample::warp_image_plain(&moved.thermal, &h.inverse().unwrap());
            // Doubly-valid region: pixels that survived both warps.
            let (fwd_valid, _) = crate::nn::sample::warp_image_plain(
                &Image::from_fn(1, 64, 64, |_, _, _| 1.0),
                &h,
            );
            let (fwd_valid_back, _) =
                crate::nn::sample::warp_image_plain(&fwd_valid, &h.inverse().unwrap());
            let mut err = 0.0;
            let mut count = 0.0;
            for i in 0..recovered.as_slice().len() {
                if valid_back.as_slice()[i] > 0.0 && fwd_valid_back.as_slice()[i] > 0.999 {
                    err += (recovered.as_slice()[i] - aligned.thermal.as_slice()[i]).abs();
                    count += 1.0;
                }
            }
            assert!(count > 500.0, "degenerate overlap: {count}");
            let mae = err / count;
            assert!(mae < 0.02, "seed {seed}: mae {mae}");
        }
    }

    #[test]
    fn toy_scene_gt_is_exact_for_identity_misalignment() {
        let spec = ToySceneSpec {
            image_size: 48,
            n_objects: 1,
            misalign: MisalignParams::identity(),
        };
        let s = generate_toy_scene(&spec, 3).unwrap();
        let gt = s.gt.unwrap();
        let vals: Vec<f64> = gt.as_slice().to_vec();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0));
        let frac = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(frac > 0.0, "object missing from gt");
        assert_eq!(
            s.thermal.as_slice().len(),
            48 * 48,
            "thermal is single-channel at scene size"
        );
    }

    #[test]
    fn toy_scene_deterministic_and_fraction_bounded() {
        let spec = ToySceneSpec {
            image_size: 40,
            n_objects: 3,
            misalign: MisalignParams::standard(),
        };
        let a = generate_toy_scene(&spec, 99).unwrap();
        let b = generate_toy_scene(&spec, 99).unwrap();
        assert_eq!(a.rgb.as_slice(), b.rgb.as_slice());
        assert_eq!(a.thermal.as_slice(), b.thermal.as_slice());
        assert_eq!(a.gt.as_ref().unwrap().as_slice(), b.gt.as_ref().unwrap().as_slice());
        for seed in 0..200 {
            let n = 1 + (seed as usize % 3);
            let spec = ToySceneSpec {
                image_size: 40,
                n_objects: n,
                misalign: MisalignParams::identity(),
            };
            let s = generate_toy_scene(&spec, seed).unwrap();
            let gt = s.gt.unwrap();
            let frac = gt.as_slice().iter().sum::<f64>() / (40.0 * 40.0);
            assert!(
                (0.01..=0.6).contains(&frac),
                "seed {seed}: foreground fraction {frac}"
            );
        }
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySceneSpec {
            image_size: 32,
            n_objects: 2,
            misalign: MisalignParams::standard(),
        };
        for seed in 0..3u64 {
            let mut s = generate_toy_scene(&spec, seed).unwrap();
            s.id = format!("{seed:04}");
            write_sample(dir.path(), &s).unwrap();
        }
        let loaded = load_vt_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].id, "0000");
        assert!(loaded.iter().all(|s| s.true_homography.is_some()));
        assert!(loaded.iter().all(|s| s.gt.is_some()));
        // Homography text roundtrips exactly through shortest-float format.
        let orig = generate_toy_scene(&spec, 0).unwrap().true_homography.unwrap();
        let got = loaded[0].true_homography.unwrap();
        let dist = mean_corner_distance(&orig, &got, &image_corners(32, 32));
        assert!(dist < 1e-12, "corner distance {dist}");
    }

    #[test]
    fn missing_modality_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySceneSpec {
            image_size: 32,
            n_objects: 1,
            misalign: MisalignParams::identity(),
        };
        let mut s = generate_toy_scene(&spec, 1).unwrap();
        s.id = "0001".into();
        write_sample(dir.path(), &s).unwrap();
        std::fs::remove_file(dir.path().join("T/0001.png")).unwrap();
        match load_vt_dataset(dir.path(), Split::Train) {
            Err(DataError::MissingModality { id, modality }) => {
                assert_eq!(id, "0001");
                assert_eq!(modality, "T");
            }
            other => panic!("expected MissingModality, got {other:?}"),
        }
    }

    #[test]
    fn missing_gt_train_errors_test_tolerates() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySceneSpec {
            image_size: 32,
            n_objects: 1,
            misalign: MisalignParams::identity(),
        };
        let mut s = generate_toy_scene(&spec, 2).unwrap();
        s.id = "0002".into();
        write_sample(dir.path(), &s).unwrap();
        std::fs::remove_file(dir.path().join("GT/0002.png")).unwrap();
        assert!(matches!(
            load_vt_dataset(dir.path(), Split::Train),
            Err(DataError::MissingGroundTruth { .. })
        ));
        let loaded = load_vt_dataset(dir.path(), Split::Test).unwrap();
        assert!(loaded[0].gt.is_none());
    }

    #[test]
    fn attributes_parse_and_attach() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySceneSpec {
            image_size: 32,
            n_objects: 1,
            misalign: MisalignParams::identity(),
        };
        for (i, tags) in [(0, "SL, TC"), (1, "")].iter().enumerate() {
            let mut s = generate_toy_scene(&spec, i as u64).unwrap();
            s.id = format!("{i:04}");
            write_sample(dir.path(), &s).unwrap();
            let _ = tags;
        }
        std::fs::write(dir.path().join("attributes.txt"), "0000: SL, TC\n0001:\n").unwrap();
        let loaded = load_vt_dataset(dir.path(), Split::Train).unwrap();
        assert_eq!(loaded[0].attributes, vec!["SL".to_string(), "TC".to_string()]);
        assert!(loaded[1].attributes.is_empty());
    }

    #[test]
    fn gt_binarization_contract() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ToySceneSpec {
            image_size: 32,
            n_objects: 1,
            misalign: MisalignParams::identity(),
        };
        let mut s = generate_toy_scene(&spec, 5).unwrap();
        s.id = "0005".into();
        write_sample(dir.path(), &s).unwrap();
        // Overwrite GT with a {0, 128, 255} image; the loader binarizes.
        let tri = Image::from_fn(1, 32, 32, |_, y, _| match y % 3 {
            0 => 0.0,
            1 => 128.0 / 255.0,
            _ => 1.0,
        });
        tri.save_gray8(&dir.path().join("GT/0005.png")).unwrap();
        let loaded = load_vt_dataset(dir.path(), Split::Train).unwrap();
        let gt = loaded[0].gt.as_ref().unwrap();
        assert!(gt.as_slice().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(gt.get(0, 1, 0), 1.0, "128 binarizes up at the 0.5 threshold");
    }

    #[test]
    fn holdout_fraction_near_ten_percent() {
        let held = (0..10000)
            .filter(|i| holdout_by_id(&format!("{i:05}")))
            .count();
        assert!((800..=1200).contains(&held), "holdout {held} of 10000");
    }
}
