//! Differentiable sampling and homography ops.
//!
//! Coordinates follow the pixel-center convention from [`crate::geom`].
//! Resizing uses half-pixel alignment with clamped taps; warping samples at
//! exact mapped positions and zeroes everything whose source position falls
//! outside `[0, w-1] x [0, h-1]`.

use super::graph::{accumulate, Arr, Graph, Var};
use crate::geom::{
    displaced_corners, solve_dlt_full, CornerDisplacement, GeomError, Homography, Point,
};
use ndarray::IxDyn;

/// Whether the corner displacement perturbs the destination or the source
/// side of the DLT correspondences.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DispSide {
    /// `corners -> corners + d`; the solved matrix maps corner space forward.
    Dst,
    /// `corners + d -> corners`; the solved matrix is the exact inverse of
    /// the [`DispSide::Dst`] solution for the same displacement.
    Src,
}

impl Graph {
    /// Adds a constant tensor elementwise.
    pub fn add_const(&mut self, a: Var, c: &Arr) -> Var {
        assert_eq!(self.value(a).shape(), c.shape());
        let out = self.value(a) + c;
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            accumulate(&mut grads[a.0], g.clone());
        }))
    }

    /// Bilinear resize of `[c, h, w]` to `[c, oh, ow]`, half-pixel centers.
    pub fn bilinear_resize(&mut self, a: Var, oh: usize, ow: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        if oh == h && ow == w {
            return self.reshape(a, &[c, h, w]);
        }
        let sy = h as f64 / oh as f64;
        let sx = w as f64 / ow as f64;
        // Tap indices and weights are a pure function of the shapes; compute
        // once and share with the backward closure.
        let mut taps = Vec::with_capacity(oh * ow);
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..ow {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                taps.push((y0, y1, x0, x1, wy, wx));
            }
        }
        let xv = self.value(a).as_slice().unwrap();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            let plane = &xv[ci * h * w..(ci + 1) * h * w];
            let op = &mut out[ci * oh * ow..(ci + 1) * oh * ow];
            for (i, &(y0, y1, x0, x1, wy, wx)) in taps.iter().enumerate() {
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                op[i] = top + (bot - top) * wy;
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                let gp = &gs[ci * oh * ow..(ci + 1) * oh * ow];
                let dp = &mut dx[ci * h * w..(ci + 1) * h * w];
                for (i, &(y0, y1, x0, x1, wy, wx)) in taps.iter().enumerate() {
                    let gv = gp[i];
                    dp[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    dp[y0 * w + x1] += gv * (1.0 - wy) * wx;
                    dp[y1 * w + x0] += gv * wy * (1.0 - wx);
                    dp[y1 * w + x1] += gv * wy * wx;
                }
            }
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
            );
        }))
    }

    /// Projects a constant grid of points through a homography given as its
    /// first eight entries: `[n, 2]` positions out of `grid [n, 2]`.
    pub fn apply_h_grid(&mut self, h8: Var, grid: &Arr) -> Var {
        assert_eq!(self.value(h8).shape(), &[8]);
        assert_eq!(grid.ndim(), 2);
        assert_eq!(grid.shape()[1], 2);
        let n = grid.shape()[0];
        let grid_v = grid.as_slice().unwrap().to_vec();
        let hv = self.value(h8).as_slice().unwrap().to_vec();
        let mut out = vec![0.0; n * 2];
        for i in 0..n {
            let (x, y) = (grid_v[2 * i], grid_v[2 * i + 1]);
            let wd = hv[6] * x + hv[7] * y + 1.0;
            out[2 * i] = (hv[0] * x + hv[1] * y + hv[2]) / wd;
            out[2 * i + 1] = (hv[3] * x + hv[4] * y + hv[5]) / wd;
        }
        let out_idx = self.next_index();
        let out = Arr::from_shape_vec(IxDyn(&[n, 2]), out).unwrap();
        self.op(out, &[h8], Box::new(move |g, v, grads| {
            let hv = v[h8.0].as_slice().unwrap();
            let ov = v[out_idx].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dh = [0.0; 8];
            for i in 0..n {
                let (x, y) = (grid_v[2 * i], grid_v[2 * i + 1]);
                let wd = hv[6] * x + hv[7] * y + 1.0;
                let (xo, yo) = (ov[2 * i], ov[2 * i + 1]);
                let (gx, gy) = (gs[2 * i], gs[2 * i + 1]);
                dh[0] += gx * x / wd;
                dh[1] += gx * y / wd;
                dh[2] += gx / wd;
                dh[3] += gy * x / wd;
                dh[4] += gy * y / wd;
                dh[5] += gy / wd;
                dh[6] += -(gx * xo + gy * yo) * x / wd;
                dh[7] += -(gx * xo + gy * yo) * y / wd;
            }
            accumulate(
                &mut grads[h8.0],
                Arr::from_shape_vec(IxDyn(&[8]), dh.to_vec()).unwrap(),
            );
        }))
    }

    /// Samples `img [c, h, w]` at continuous positions `pos [n, 2]`,
    /// producing `[c, n]` plus a constant validity plane (1 where the
    /// position is inside `[0, w-1] x [0, h-1]`, 0 elsewhere; samples there
    /// are zero and propagate no gradient).
    pub fn sample_at(&mut self, img: Var, pos: Var) -> (Var, Arr) {
        let si = self.value(img).shape().to_vec();
        let sp = self.value(pos).shape().to_vec();
        assert_eq!(si.len(), 3);
        assert_eq!(sp[1], 2);
        let (c, h, w) = (si[0], si[1], si[2]);
        let n = sp[0];
        let pv = self.value(pos).as_slice().unwrap();
        let iv = self.value(img).as_slice().unwrap();
        let mut valid = vec![0.0; n];
        let mut out = vec![0.0; c * n];
        for i in 0..n {
            let (x, y) = (pv[2 * i], pv[2 * i + 1]);
            let inside =
                x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64;
            if !inside {
                continue;
            }
            valid[i] = 1.0;
            let x0 = x.floor() as usize;
            let y0 = y.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let (wx, wy) = (x - x0 as f64, y - y0 as f64);
            for ci in 0..c {
                let p = &iv[ci * h * w..(ci + 1) * h * w];
                let top = p[y0 * w + x0] + (p[y0 * w + x1] - p[y0 * w + x0]) * wx;
                let bot = p[y1 * w + x0] + (p[y1 * w + x1] - p[y1 * w + x0]) * wx;
                out[ci * n + i] = top + (bot - top) * wy;
            }
        }
        let valid_arr = Arr::from_shape_vec(IxDyn(&[1, n]), valid).unwrap();
        let (ri, rp) = (self.requires_grad(img), self.requires_grad(pos));
        let out = Arr::from_shape_vec(IxDyn(&[c, n]), out).unwrap();
        let var = self.op(out, &[img, pos], Box::new(move |g, v, grads| {
            let pv = v[pos.0].as_slice().unwrap();
            let iv = v[img.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dimg = if ri { vec![0.0; c * h * w] } else { Vec::new() };
            let mut dpos = if rp { vec![0.0; n * 2] } else { Vec::new() };
            for i in 0..n {
                let (x, y) = (pv[2 * i], pv[2 * i + 1]);
                let inside =
                    x >= 0.0 && x <= (w - 1) as f64 && y >= 0.0 && y <= (h - 1) as f64;
                if !inside {
                    continue;
                }
                let x0 = x.floor() as usize;
                let y0 = y.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let (wx, wy) = (x - x0 as f64, y - y0 as f64);
                for ci in 0..c {
                    let gv = gs[ci * n + i];
                    if gv == 0.0 {
                        continue;
                    }
                    let base = ci * h * w;
                    if ri {
                        dimg[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                        dimg[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                        dimg[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                        dimg[base + y1 * w + x1] += gv * wy * wx;
                    }
                    if rp {
                        let p = &iv[base..base + h * w];
                        let (v00, v01) = (p[y0 * w + x0], p[y0 * w + x1]);
                        let (v10, v11) = (p[y1 * w + x0], p[y1 * w + x1]);
                        let ddx = (1.0 - wy) * (v01 - v00) + wy * (v11 - v10);
                        let ddy = (1.0 - wx) * (v10 - v00) + wx * (v11 - v01);
                        dpos[2 * i] += gv * ddx;
                        dpos[2 * i + 1] += gv * ddy;
                    }
                }
            }
            if ri {
                accumulate(
                    &mut grads[img.0],
                    Arr::from_shape_vec(IxDyn(&[c, h, w]), dimg).unwrap(),
                );
            }
            if rp {
                accumulate(
                    &mut grads[pos.0],
                    Arr::from_shape_vec(IxDyn(&[n, 2]), dpos).unwrap(),
                );
            }
        }));
        (var, valid_arr)
    }

    /// Warps `img` by sampling it at `h(x)` for every output pixel `x` of an
    /// `oh x ow` grid. Returns the warped `[c, oh, ow]` map and the constant
    /// `[1, oh, ow]` validity mask.
    pub fn warp_image(&mut self, img: Var, h8: Var, oh: usize, ow: usize) -> (Var, Arr) {
        let c = self.value(img).shape()[0];
        let grid = pixel_grid(oh, ow);
        let pos = self.apply_h_grid(h8, &grid);
        let (flat, valid) = self.sample_at(img, pos);
        let out = self.reshape(flat, &[c, oh, ow]);
        let valid = valid
            .into_shape_with_order(IxDyn(&[1, oh, ow]))
            .unwrap();
        (out, valid)
    }

    /// Gathers local correlations: for each anchor `q` of the volume
    /// `[nq, hb, wb]`, samples the plane `vol[q]` at `pos[q] + offset` for
    /// every offset of a `(2r+1)^2` window. Output `[(2r+1)^2, nq]`;
    /// out-of-range taps contribute zero.
    pub fn corr_lookup(&mut self, vol: Var, pos: Var, radius: usize) -> Var {
        let sv = self.value(vol).shape().to_vec();
        let sp = self.value(pos).shape().to_vec();
        assert_eq!(sv.len(), 3);
        assert_eq!(sp, vec![sv[0], 2]);
        let (nq, hb, wb) = (sv[0], sv[1], sv[2]);
        let side = 2 * radius + 1;
        let k2 = side * side;
        let r = radius as f64;
        let vv = self.value(vol).as_slice().unwrap();
        let pv = self.value(pos).as_slice().unwrap();
        let mut out = vec![0.0; k2 * nq];
        let sample_plane = move |plane: &[f64], x: f64, y: f64| -> (f64, f64, f64) {
            // Returns (value, d/dx, d/dy) with zero outside taps.
            let x0f = x.floor();
            let y0f = y.floor();
            let (wx, wy) = (x - x0f, y - y0f);
            let mut v = [[0.0; 2]; 2];
            for (dy, vrow) in v.iter_mut().enumerate() {
                for (dx, val) in vrow.iter_mut().enumerate() {
                    let yy = y0f as isize + dy as isize;
                    let xx = x0f as isize + dx as isize;
                    if yy >= 0 && (yy as usize) < hb && xx >= 0 && (xx as usize) < wb {
                        *val = plane[yy as usize * wb + xx as usize];
                    }
                }
            }
            let top = v[0][0] + (v[0][1] - v[0][0]) * wx;
            let bot = v[1][0] + (v[1][1] - v[1][0]) * wx;
            let val = top + (bot - top) * wy;
            let ddx = (1.0 - wy) * (v[0][1] - v[0][0]) + wy * (v[1][1] - v[1][0]);
            let ddy = (1.0 - wx) * (v[1][0] - v[0][0]) + wx * (v[1][1] - v[0][1]);
            (val, ddx, ddy)
        };
        for q in 0..nq {
            let plane = &vv[q * hb * wb..(q + 1) * hb * wb];
            let (cx, cy) = (pv[2 * q], pv[2 * q + 1]);
            for oy in 0..side {
                for ox in 0..side {
                    let k = oy * side + ox;
                    let (val, _, _) =
                        sample_plane(plane, cx + ox as f64 - r, cy + oy as f64 - r);
                    out[k * nq + q] = val;
                }
            }
        }
        let (rv, rp) = (self.requires_grad(vol), self.requires_grad(pos));
        let out = Arr::from_shape_vec(IxDyn(&[k2, nq]), out).unwrap();
        self.op(out, &[vol, pos], Box::new(move |g, v, grads| {
            let vv = v[vol.0].as_slice().unwrap();
            let pv = v[pos.0].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dvol = if rv { vec![0.0; nq * hb * wb] } else { Vec::new() };
            let mut dpos = if rp { vec![0.0; nq * 2] } else { Vec::new() };
            for q in 0..nq {
                let plane = &vv[q * hb * wb..(q + 1) * hb * wb];
                let (cx, cy) = (pv[2 * q], pv[2 * q + 1]);
                for oy in 0..side {
                    for ox in 0..side {
                        let k = oy * side + ox;
                        let gv = gs[k * nq + q];
                        if gv == 0.0 {
                            continue;
                        }
                        let x = cx + ox as f64 - r;
                        let y = cy + oy as f64 - r;
                        let x0f = x.floor();
                        let y0f = y.floor();
                        let (wx, wy) = (x - x0f, y - y0f);
                        if rp {
                            let (_, ddx, ddy) = sample_plane(plane, x, y);
                            dpos[2 * q] += gv * ddx;
                            dpos[2 * q + 1] += gv * ddy;
                        }
                        if rv {
                            for dy in 0..2usize {
                                for dx in 0..2usize {
                                    let yy = y0f as isize + dy as isize;
                                    let xx = x0f as isize + dx as isize;
                                    if yy >= 0
                                        && (yy as usize) < hb
                                        && xx >= 0
                                        && (xx as usize) < wb
                                    {
                                        let wgt = (if dy == 1 { wy } else { 1.0 - wy })
                                            * (if dx == 1 { wx } else { 1.0 - wx });
                                        dvol[q * hb * wb
                                            + yy as usize * wb
                                            + xx as usize] += gv * wgt;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if rv {
                accumulate(
                    &mut grads[vol.0],
                    Arr::from_shape_vec(IxDyn(&[nq, hb, wb]), dvol).unwrap(),
                );
            }
            if rp {
                accumulate(
                    &mut grads[pos.0],
                    Arr::from_shape_vec(IxDyn(&[nq, 2]), dpos).unwrap(),
                );
            }
        }))
    }

    /// Solves the four-point DLT for a displacement held on the tape,
    /// differentiably. `corners` are the fixed base corners; `side` selects
    /// which side of the correspondences the displacement perturbs.
    ///
    /// The backward pass applies the implicit function theorem to
    /// `A(d) h = b(d)` using the inverse system matrix stored at solve time:
    /// `dh/dd_k = A^-1 (db/dd_k - dA/dd_k h)`.
    pub fn dlt_from_disp(
        &mut self,
        disp: Var,
        corners: [Point; 4],
        side: DispSide,
    ) -> Result<Var, GeomError> {
        assert_eq!(self.value(disp).shape(), &[8]);
        let dv = self.value(disp).as_slice().unwrap();
        let mut flat = [0.0; 8];
        flat.copy_from_slice(dv);
        let d = CornerDisplacement::from_flat(&flat);
        let moved = displaced_corners(&corners, &d);
        let (src, dst) = match side {
            DispSide::Dst => (corners, moved),
            DispSide::Src => (moved, corners),
        };
        let sol = solve_dlt_full(&src, &dst)?;
        let h8 = sol.h.as_flat8();
        let mut a_inv = [[0.0; 8]; 8];
        for r in 0..8 {
            for c in 0..8 {
                a_inv[r][c] = sol.a_inv[(r, c)];
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&[8]), h8.to_vec()).unwrap();
        let out_idx = self.next_index();
        Ok(self.op(out, &[disp], Box::new(move |g, v, grads| {
            let h = v[out_idx].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dd = [0.0; 8];
            for j in 0..4 {
                let rx = 2 * j;
                let ry = 2 * j + 1;
                // rhs = db/dd_k - (dA/dd_k) h, nonzero in at most two rows.
                let mut rhs = [[0.0; 8]; 2]; // for d_x and d_y of corner j
                match side {
                    DispSide::Dst => {
                        let s = src[j];
                        rhs[0][rx] = 1.0 + s.x * h[6] + s.y * h[7];
                        rhs[1][ry] = 1.0 + s.x * h[6] + s.y * h[7];
                    }
                    DispSide::Src => {
                        let t = dst[j];
                        rhs[0][rx] = -h[0] + t.x * h[6];
                        rhs[0][ry] = -h[3] + t.y * h[6];
                        rhs[1][rx] = -h[1] + t.x * h[7];
                        rhs[1][ry] = -h[4] + t.y * h[7];
                    }
                }
                for (axis, rhs_a) in rhs.iter().enumerate() {
                    let mut acc = 0.0;
                    for out_i in 0..8 {
                        if gs[out_i] == 0.0 {
                            continue;
                        }
                        let mut dh_i = 0.0;
                        for (c, rv) in rhs_a.iter().enumerate() {
                            if *rv != 0.0 {
                                dh_i += a_inv[out_i][c] * rv;
                            }
                        }
                        acc += gs[out_i] * dh_i;
                    }
                    dd[2 * j + axis] = acc;
                }
            }
            accumulate(
                &mut grads[disp.0],
                Arr::from_shape_vec(IxDyn(&[8]), dd.to_vec()).unwrap(),
            );
        })))
    }

    /// Conjugates a homography held on the tape with constant frame maps:
    /// `H' = normalize(post * H * pre)`.
    pub fn conjugate_h(&mut self, h8: Var, post: &Homography, pre: &Homography) -> Var {
        assert_eq!(self.value(h8).shape(), &[8]);
        let p = *post.rows();
        let q = *pre.rows();
        let hv = self.value(h8).as_slice().unwrap();
        let hm = [
            [hv[0], hv[1], hv[2]],
            [hv[3], hv[4], hv[5]],
            [hv[6], hv[7], 1.0],
        ];
        let mut m = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = 0.0;
                for i in 0..3 {
                    for l in 0..3 {
                        acc += p[r][i] * hm[i][l] * q[l][c];
                    }
                }
                m[r][c] = acc;
            }
        }
        let m22 = m[2][2];
        assert!(m22 != 0.0, "conjugated homography lost normalization");
        let mut out = [0.0; 8];
        for (i, o) in out.iter_mut().enumerate() {
            let (r, c) = (i / 3, i % 3);
            *o = m[r][c] / m22;
        }
        let out_idx = self.next_index();
        let out = Arr::from_shape_vec(IxDyn(&[8]), out.to_vec()).unwrap();
        self.op(out, &[h8], Box::new(move |g, v, grads| {
            let y = v[out_idx].as_slice().unwrap();
            let gs = g.as_slice().unwrap();
            let mut dh = [0.0; 8];
            for (kl, dh_e) in dh.iter_mut().enumerate() {
                let (k, l) = (kl / 3, kl % 3);
                let mut acc = 0.0;
                for (rc, &gv) in gs.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let (r, c) = (rc / 3, rc % 3);
                    let d = (p[r][k] * q[l][c] - y[rc] * p[2][k] * q[l][2]) / m22;
                    acc += gv * d;
                }
                *dh_e = acc;
            }
            accumulate(
                &mut grads[h8.0],
                Arr::from_shape_vec(IxDyn(&[8]), dh.to_vec()).unwrap(),
            );
        }))
    }
}

/// Row-major `[oh*ow, 2]` grid of pixel-center coordinates.
pub fn pixel_grid(oh: usize, ow: usize) -> Arr {
    let mut g = Vec::with_capacity(oh * ow * 2);
    for y in 0..oh {
        for x in 0..ow {
            g.push(x as f64);
            g.push(y as f64);
        }
    }
    Arr::from_shape_vec(IxDyn(&[oh * ow, 2]), g).unwrap()
}

/// Non-tape warp used by the data pipeline: samples `img` at `h(x)`,
/// zero-filling invalid pixels; also returns the validity mask.
pub fn warp_image_plain(
    img: &crate::img::Image,
    h: &Homography,
) -> (crate::img::Image, crate::img::Image) {
    let (c, ih, iw) = (img.channels(), img.height(), img.width());
    let mut out = crate::img::Image::zeros(c, ih, iw);
    let mut valid = crate::img::Image::zeros(1, ih, iw);
    for y in 0..ih {
        for x in 0..iw {
            let p = h.apply(Point::new(x as f64, y as f64));
            let inside = p.x >= 0.0
                && p.x <= (iw - 1) as f64
                && p.y >= 0.0
                && p.y <= (ih - 1) as f64;
            if !inside {
                continue;
            }
            valid.set(0, y, x, 1.0);
            let x0 = p.x.floor() as usize;
            let y0 = p.y.floor() as usize;
            let x1 = (x0 + 1).min(iw - 1);
            let y1 = (y0 + 1).min(ih - 1);
            let (wx, wy) = (p.x - x0 as f64, p.y - y0 as f64);
            for ci in 0..c {
                let v00 = img.get(ci, y0, x0);
                let v01 = img.get(ci, y0, x1);
                let v10 = img.get(ci, y1, x0);
                let v11 = img.get(ci, y1, x1);
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                out.set(ci, y, x, top + (bot - top) * wy);
            }
        }
    }
    (out, valid)
}
