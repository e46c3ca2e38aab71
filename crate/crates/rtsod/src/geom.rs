//! Planar projective geometry: homographies, corner displacements and the
//! four-point DLT solve.
//!
//! Conventions used throughout the crate:
//!
//! * Pixel (x, y) refers to the center of the pixel in column x, row y;
//!   the corners of an H x W image are (0, 0), (W-1, 0), (W-1, H-1), (0, H-1)
//!   in that order.
//! * A stored [`Homography`] maps thermal (target) coordinates into RGB
//!   (source) coordinates and is always normalized so `m[2][2] == 1`.
//!   Mapping the other way is done explicitly through [`Homography::inverse`].
//! * All geometry runs in double precision.

use nalgebra::{SMatrix, SVector};
use thiserror::Error;

/// Condition-number ceiling for the DLT system; beyond this the
/// correspondence set is treated as degenerate.
pub const DLT_CONDITION_LIMIT: f64 = 1e12;

#[derive(Error, Debug, PartialEq)]
pub enum GeomError {
    #[error("homography cannot be normalized: m[2][2] is zero")]
    NotNormalizable,
    #[error("homography is singular and cannot be inverted")]
    NotInvertible,
    #[error("degenerate correspondences: DLT condition number exceeds {DLT_CONDITION_LIMIT:e}")]
    DegenerateHomography,
}

/// A point in pixel coordinates (x = column, y = row).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Per-corner (dx, dy) offsets in pixels for the four image corners, in
/// [`image_corners`] order.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct CornerDisplacement {
    pub d: [[f64; 2]; 4],
}

impl CornerDisplacement {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_flat(v: &[f64; 8]) -> Self {
        let mut d = [[0.0; 2]; 4];
        for c in 0..4 {
            d[c][0] = v[2 * c];
            d[c][1] = v[2 * c + 1];
        }
        CornerDisplacement { d }
    }

    pub fn as_flat(&self) -> [f64; 8] {
        let mut v = [0.0; 8];
        for c in 0..4 {
            v[2 * c] = self.d[c][0];
            v[2 * c + 1] = self.d[c][1];
        }
        v
    }

    /// Largest absolute component, useful for identity checks.
    pub fn max_abs(&self) -> f64 {
        self.as_flat().iter().fold(0.0, |a, v| a.max(v.abs()))
    }
}

/// Corners of a w x h image at pixel centers, ordered top-left, top-right,
/// bottom-right, bottom-left.
pub fn image_corners(w: usize, h: usize) -> [Point; 4] {
    let (wm, hm) = ((w - 1) as f64, (h - 1) as f64);
    [
        Point::new(0.0, 0.0),
        Point::new(wm, 0.0),
        Point::new(wm, hm),
        Point::new(0.0, hm),
    ]
}

/// Applies a displacement to a corner set.
pub fn displaced_corners(corners: &[Point; 4], disp: &CornerDisplacement) -> [Point; 4] {
    let mut out = *corners;
    for c in 0..4 {
        out[c].x += disp.d[c][0];
        out[c].y += disp.d[c][1];
    }
    out
}

/// A 3x3 projective transform, normalized so `m[2][2] == 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Builds from a raw matrix, rescaling so the bottom-right entry is 1.
    pub fn normalized(m: [[f64; 3]; 3]) -> Result<Self, GeomError> {
        let w = m[2][2];
        if w == 0.0 || !w.is_finite() {
            return Err(GeomError::NotNormalizable);
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = m[r][c] / w;
            }
        }
        out[2][2] = 1.0;
        Ok(Homography { m: out })
    }

    /// First eight entries row-major; the ninth is fixed at 1.
    pub fn from_flat8(v: &[f64; 8]) -> Self {
        Homography {
            m: [
                [v[0], v[1], v[2]],
                [v[3], v[4], v[5]],
                [v[6], v[7], 1.0],
            ],
        }
    }

    pub fn as_flat8(&self) -> [f64; 8] {
        [
            self.m[0][0], self.m[0][1], self.m[0][2],
            self.m[1][0], self.m[1][1], self.m[1][2],
            self.m[2][0], self.m[2][1],
        ]
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    /// Row-major nine entries, last one always exactly 1.
    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2],
            m[1][0], m[1][1], m[1][2],
            m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self, GeomError> {
        Homography::normalized([
            [v[0], v[1], v[2]],
            [v[3], v[4], v[5]],
            [v[6], v[7], v[8]],
        ])
    }

    /// Projective application with explicit division.
    pub fn apply(&self, p: Point) -> Point {
        let m = &self.m;
        let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
        Point::new(
            (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
            (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
        )
    }

    /// Matrix product `self * other`, so that
    /// `compose(a, b).apply(p) == a.apply(b.apply(p))`.
    pub fn compose(&self, other: &Homography) -> Result<Homography, GeomError> {
        let (a, b) = (&self.m, &other.m);
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                m[r][c] = a[r][0] * b[0][c] + a[r][1] * b[1][c] + a[r][2] * b[2][c];
            }
        }
        Homography::normalized(m)
    }

    /// Inverse via the adjugate, renormalized.
    pub fn inverse(&self) -> Result<Homography, GeomError> {
        let m = &self.m;
        let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        if det == 0.0 || !det.is_finite() {
            return Err(GeomError::NotInvertible);
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = adj[r][c] / det;
            }
        }
        Homography::normalized(out).map_err(|_| GeomError::NotInvertible)
    }

    /// True when every entry is finite.
    pub fn is_finite(&self) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
    }
}

/// Affine map between two pixel grids under the half-pixel-center resize
/// convention: `x_to = (x_from + 0.5) * to / from - 0.5`, per axis.
pub fn frame_scale_map(from_w: usize, from_h: usize, to_w: usize, to_h: usize) -> Homography {
    let sx = to_w as f64 / from_w as f64;
    let sy = to_h as f64 / from_h as f64;
    Homography {
        m: [
            [sx, 0.0, 0.5 * sx - 0.5],
            [0.0, sy, 0.5 * sy - 0.5],
            [0.0, 0.0, 1.0],
        ],
    }
}

/// Mean Euclidean distance between the images of the given corners under two
/// homographies.
pub fn mean_corner_distance(a: &Homography, b: &Homography, corners: &[Point; 4]) -> f64 {
    corners
        .iter()
        .map(|&p| a.apply(p).distance(b.apply(p)))
        .sum::<f64>()
        / 4.0
}

/// DLT solution together with the inverse of the 8x8 system matrix, kept for
/// sensitivity analysis of the solve.
pub struct DltSolution {
    pub h: Homography,
    pub a_inv: SMatrix<f64, 8, 8>,
}

/// Solves for the homography with `apply(h, src[i]) == dst[i]`.
pub fn solve_dlt(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography, GeomError> {
    solve_dlt_full(src, dst).map(|s| s.h)
}

/// Full DLT solve on the inhomogeneous 8x8 system (h33 fixed at 1), with an
/// SVD condition check and two iterative-refinement passes.
pub fn solve_dlt_full(src: &[Point; 4], dst: &[Point; 4]) -> Result<DltSolution, GeomError> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let (s, d) = (src[i], dst[i]);
        if !(s.x.is_finite() && s.y.is_finite() && d.x.is_finite() && d.y.is_finite()) {
            return Err(GeomError::DegenerateHomography);
        }
        let r = 2 * i;
        a[(r, 0)] = s.x;
        a[(r, 1)] = s.y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -s.x * d.x;
        a[(r, 7)] = -s.y * d.x;
        b[r] = d.x;
        a[(r + 1, 3)] = s.x;
        a[(r + 1, 4)] = s.y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -s.x * d.y;
        a[(r + 1, 7)] = -s.y * d.y;
        b[r + 1] = d.y;
    }
    let sv = a.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 0.0) || !smax.is_finite() || smax / smin > DLT_CONDITION_LIMIT {
        return Err(GeomError::DegenerateHomography);
    }
    let a_inv = a.try_inverse().ok_or(GeomError::DegenerateHomography)?;
    let mut h = a_inv * b;
    // Two refinement passes push the residual toward machine level even when
    // pixel-scale coordinates make the raw system poorly scaled.
    for _ in 0..2 {
        let r = b - a * h;
        h += a_inv * r;
    }
    let mut flat = [0.0; 8];
    flat.copy_from_slice(h.as_slice());
    let h = Homography::from_flat8(&flat);
    if !h.is_finite() {
        return Err(GeomError::DegenerateHomography);
    }
    Ok(DltSolution { h, a_inv })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_h(rng: &mut ChaCha8Rng) -> Homography {
        // Mild perturbation of the identity, always invertible in practice.
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let base: f64 = if r == c { 1.0 } else { 0.0 };
                let scale: f64 = if r == 2 && c < 2 { 1e-3 } else { 0.3 };
                m[r][c] = base + rng.random_range(-scale..scale);
            }
        }
        m[2][2] = 1.0 + rng.random_range(-0.1..0.1);
        Homography::normalized(m).unwrap()
    }

    #[test]
    fn identity_maps_points_to_themselves() {
        let h = Homography::identity();
        let p = Point::new(3.25, -7.5);
        assert_eq!(h.apply(p), p);
    }

    #[test]
    fn apply_performs_projective_division() {
        // Bottom row (1, 0, 1): point (1, 1) has denominator 2.
        let h = Homography::normalized([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]])
            .unwrap();
        let q = h.apply(Point::new(1.0, 1.0));
        assert_relative_eq!(q.x, 0.5, max_relative = 1e-15);
        assert_relative_eq!(q.y, 0.5, max_relative = 1e-15);
    }

    #[test]
    fn normalized_rescales_and_rejects_zero() {
        let h = Homography::normalized([[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 2.0]])
            .unwrap();
        assert_eq!(h.rows()[0][0], 1.0);
        assert_eq!(h.rows()[2][2], 1.0);
        let err = Homography::normalized([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        assert_eq!(err.unwrap_err(), GeomError::NotNormalizable);
    }

    #[test]
    fn compose_matches_sequential_application() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_h(&mut rng);
            let b = random_h(&mut rng);
            let ab = a.compose(&b).unwrap();
            for _ in 0..5 {
                let p = Point::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
                let via_compose = ab.apply(p);
                let sequential = a.apply(b.apply(p));
                assert!(via_compose.distance(sequential) < 1e-9);
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let h = random_h(&mut rng);
            let hi = h.inverse().unwrap();
            for _ in 0..5 {
                let p = Point::new(rng.random_range(-8.0..8.0), rng.random_range(-8.0..8.0));
                assert!(hi.apply(h.apply(p)).distance(p) < 1e-9);
            }
        }
    }

    #[test]
    fn dlt_unit_square_to_itself_is_identity() {
        let sq = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        let h = solve_dlt(&sq, &sq).unwrap();
        let id = Homography::identity();
        for r in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(h.rows()[r][c], id.rows()[r][c], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dlt_recovers_known_translation() {
        let src = image_corners(128, 128);
        let dst = [
            Point::new(5.0, 0.0),
            Point::new(132.0, 0.0),
            Point::new(132.0, 127.0),
            Point::new(5.0, 127.0),
        ];
        let h = solve_dlt(&src, &dst).unwrap();
        let p = h.apply(Point::new(50.0, 60.0));
        assert_relative_eq!(p.x, 55.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 60.0, epsilon = 1e-9);
    }

    #[test]
    fn dlt_reprojects_random_correspondences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let src = image_corners(128, 128);
        for _ in 0..200 {
            let mut flat = [0.0; 8];
            for v in flat.iter_mut() {
                *v = rng.random_range(-20.0..20.0);
            }
            let dst = displaced_corners(&src, &CornerDisplacement::from_flat(&flat));
            let h = solve_dlt(&src, &dst).unwrap();
            for i in 0..4 {
                assert!(h.apply(src[i]).distance(dst[i]) < 1e-8);
            }
        }
    }

    #[test]
    fn dlt_rejects_collinear_corners() {
        let src = [
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(3.0, 0.0),
        ];
        let dst = image_corners(4, 4);
        assert_eq!(
            solve_dlt(&src, &dst).unwrap_err(),
            GeomError::DegenerateHomography
        );
    }

    #[test]
    fn dlt_rejects_repeated_corner() {
        let mut src = image_corners(16, 16);
        src[1] = src[0];
        let dst = image_corners(16, 16);
        assert_eq!(
            solve_dlt(&src, &dst).unwrap_err(),
            GeomError::DegenerateHomography
        );
    }

    #[test]
    fn frame_scale_identity_when_sizes_match() {
        let s = frame_scale_map(128, 96, 128, 96);
        let p = Point::new(31.25, 77.0);
        assert_eq!(s.apply(p), p);
    }

    #[test]
    fn frame_scale_maps_centers_between_grids() {
        // Doubling resolution: pixel center 0 maps to 0.5 under half-pixel
        // alignment.
        let s = frame_scale_map(64, 64, 128, 128);
        let q = s.apply(Point::new(0.0, 0.0));
        assert_relative_eq!(q.x, 0.5, epsilon = 1e-12);
        assert_relative_eq!(q.y, 0.5, epsilon = 1e-12);
        let c = s.apply(Point::new(63.0, 63.0));
        assert_relative_eq!(c.x, 126.5, epsilon = 1e-12);
    }

    #[test]
    fn corner_distance_between_translations() {
        let a = Homography::identity();
        let b = Homography::from_flat8(&[1.0, 0.0, 3.0, 0.0, 1.0, 4.0, 0.0, 0.0]);
        let d = mean_corner_distance(&a, &b, &image_corners(32, 32));
        assert_relative_eq!(d, 5.0, epsilon = 1e-12);
    }
}
