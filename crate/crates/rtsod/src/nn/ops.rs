//! Elementwise, reduction, shape and matrix ops on the tape.

use super::graph::{accumulate, Arr, Graph, Var};
use ndarray::{Array2, ArrayView2, Axis, IxDyn};

/// Contiguous standard-layout view reshaped to 2-D.
fn as2(a: &Arr, r: usize, c: usize) -> ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((r, c))
        .expect("non-contiguous tensor in 2-D view")
}

/// Transposed copy in standard (row-major) layout.
fn transpose_copy(a: &ArrayView2<'_, f64>) -> Array2<f64> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    Array2::from_shape_fn((c, r), |(i, j)| a[[j, i]])
}

/// Matrix-product results are usually standard layout, but ndarray's
/// degenerate-shape fast paths (single row/column, unit inner dimension) can
/// return other stride patterns; every tape value must be standard layout so
/// later ops can view it flat.
pub(crate) fn standardize(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        let (r, c) = (a.shape()[0], a.shape()[1]);
        Array2::from_shape_fn((r, c), |ix| a[ix])
    }
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shape");
        let out = self.value(a) + self.value(b);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out, &[a, b], Box::new(move |g, _v, grads| {
            if ra {
                accumulate(&mut grads[a.0], g.clone());
            }
            if rb {
                accumulate(&mut grads[b.0], g.clone());
            }
        }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shape");
        let out = self.value(a) * self.value(b);
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out, &[a, b], Box::new(move |g, v, grads| {
            if ra {
                accumulate(&mut grads[a.0], g * &*v[b.0]);
            }
            if rb {
                accumulate(&mut grads[b.0], g * &*v[a.0]);
            }
        }))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).mapv(|v| v * k);
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            accumulate(&mut grads[a.0], g.mapv(|v| v * k));
        }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.op(out, &[a], Box::new(move |g, v, grads| {
            let mut dx = g.clone();
            dx.zip_mut_with(&v[a.0], |d, &x| {
                if x <= 0.0 {
                    *d = 0.0;
                }
            });
            accumulate(&mut grads[a.0], dx);
        }))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out_idx = self.next_index();
        let out = self.value(a).mapv(|v| 1.0 / (1.0 + (-v).exp()));
        self.op(out, &[a], Box::new(move |g, v, grads| {
            let y = &v[out_idx];
            let mut dx = g.clone();
            dx.zip_mut_with(y, |d, &s| *d *= s * (1.0 - s));
            accumulate(&mut grads[a.0], dx);
        }))
    }

    /// Row-wise softmax of an `[n, m]` matrix, numerically stabilized.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.ndim(), 2, "softmax_rows expects [n, m]");
        let (n, m) = (x.shape()[0], x.shape()[1]);
        let out_idx = self.next_index();
        let mut out = x.clone();
        {
            let mut o2 = out.view_mut().into_shape_with_order((n, m)).unwrap();
            for mut row in o2.rows_mut() {
                let mx = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
        }
        self.op(out, &[a], Box::new(move |g, v, grads| {
            let s = as2(&v[out_idx], n, m);
            let g2 = as2(g, n, m);
            let mut dx = Array2::<f64>::zeros((n, m));
            for i in 0..n {
                let mut dot = 0.0;
                for j in 0..m {
                    dot += g2[[i, j]] * s[[i, j]];
                }
                for j in 0..m {
                    dx[[i, j]] = s[[i, j]] * (g2[[i, j]] - dot);
                }
            }
            accumulate(&mut grads[a.0], dx.into_dyn());
        }))
    }

    /// `a [n, m] * b [m, p] -> [n, p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[1], sb[0], "matmul inner dims");
        let (n, m, p) = (sa[0], sa[1], sb[1]);
        let out = standardize(as2(self.value(a), n, m).dot(&as2(self.value(b), m, p)));
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out.into_dyn(), &[a, b], Box::new(move |g, v, grads| {
            let g2 = as2(g, n, p);
            if ra {
                let db = as2(&v[b.0], m, p);
                accumulate(&mut grads[a.0], standardize(g2.dot(&db.t())).into_dyn());
            }
            if rb {
                let da = as2(&v[a.0], n, m);
                accumulate(&mut grads[b.0], standardize(da.t().dot(&g2)).into_dyn());
            }
        }))
    }

    /// `a [n, m] * b^T` with `b [p, m] -> [n, p]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        assert_eq!(sa[1], sb[1], "matmul_nt inner dims");
        let (n, m, p) = (sa[0], sa[1], sb[0]);
        let out = standardize(as2(self.value(a), n, m).dot(&as2(self.value(b), p, m).t()));
        let (ra, rb) = (self.requires_grad(a), self.requires_grad(b));
        self.op(out.into_dyn(), &[a, b], Box::new(move |g, v, grads| {
            let g2 = as2(g, n, p);
            if ra {
                let bv = as2(&v[b.0], p, m);
                accumulate(&mut grads[a.0], standardize(g2.dot(&bv)).into_dyn());
            }
            if rb {
                let av = as2(&v[a.0], n, m);
                accumulate(&mut grads[b.0], standardize(g2.t().dot(&av)).into_dyn());
            }
        }))
    }

    /// Token-space linear layer: `x [n, ci] * w [ci, co] (+ b [co])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (sx, sw) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        assert_eq!(sx[1], sw[0], "linear dims");
        let (n, ci, co) = (sx[0], sx[1], sw[1]);
        let mut out = standardize(as2(self.value(x), n, ci).dot(&as2(self.value(w), ci, co)));
        if let Some(bv) = b {
            let bb = self.value(bv);
            assert_eq!(bb.len(), co, "linear bias dim");
            let b1 = bb.view().into_shape_with_order(co).unwrap();
            out += &b1.broadcast((n, co)).unwrap();
        }
        let (rx, rw) = (self.requires_grad(x), self.requires_grad(w));
        let rb = b.map(|bv| self.requires_grad(bv)).unwrap_or(false);
        let mut inputs = vec![x, w];
        if let Some(bv) = b {
            inputs.push(bv);
        }
        self.op(out.into_dyn(), &inputs, Box::new(move |g, v, grads| {
            let g2 = as2(g, n, co);
            if rx {
                let wv = as2(&v[w.0], ci, co);
                accumulate(&mut grads[x.0], standardize(g2.dot(&wv.t())).into_dyn());
            }
            if rw {
                let xv = as2(&v[x.0], n, ci);
                accumulate(&mut grads[w.0], standardize(xv.t().dot(&g2)).into_dyn());
            }
            if rb {
                let db = g2.sum_axis(Axis(0));
                accumulate(&mut grads[b.unwrap().0], db.into_dyn());
            }
        }))
    }

    /// Mean over all entries, producing a `[1]` scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.len() as f64;
        let shape = x.shape().to_vec();
        let out = Arr::from_elem(IxDyn(&[1]), x.sum() / n);
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gv = g[[0]] / n;
            accumulate(&mut grads[a.0], Arr::from_elem(IxDyn(&shape), gv));
        }))
    }

    /// Weighted sum of `[1]` scalars.
    pub fn weighted_sum_scalars(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut total = 0.0;
        for (v, w) in terms {
            assert_eq!(self.value(*v).len(), 1, "weighted_sum_scalars expects [1]");
            total += self.value(*v)[[0]] * w;
        }
        let vars: Vec<Var> = terms.iter().map(|(v, _)| *v).collect();
        let weights: Vec<f64> = terms.iter().map(|(_, w)| *w).collect();
        let out = Arr::from_elem(IxDyn(&[1]), total);
        self.op(out, &vars.clone(), Box::new(move |g, _v, grads| {
            for (var, w) in vars.iter().zip(&weights) {
                accumulate(
                    &mut grads[var.0],
                    Arr::from_elem(IxDyn(&[1]), g[[0]] * w),
                );
            }
        }))
    }

    /// `[c, h, w] -> [h*w, c]` token matrix.
    pub fn chw_to_tokens(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3, "chw_to_tokens expects [c, h, w]");
        let (c, hw) = (s[0], s[1] * s[2]);
        // `.t().to_owned()` would keep transposed strides; copy explicitly
        // so downstream 2-D views stay standard layout.
        let out = transpose_copy(&as2(self.value(a), c, hw));
        self.op(out.into_dyn(), &[a], Box::new(move |g, _v, grads| {
            let gt = transpose_copy(&as2(g, hw, c));
            let gt = gt.into_shape_with_order(IxDyn(&[c, s[1], s[2]])).unwrap();
            accumulate(&mut grads[a.0], gt);
        }))
    }

    /// `[h*w, c] -> [c, h, w]`.
    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 2, "tokens_to_chw expects [n, c]");
        assert_eq!(s[0], h * w, "token count must equal h*w");
        let c = s[1];
        let out = transpose_copy(&as2(self.value(a), h * w, c))
            .into_shape_with_order(IxDyn(&[c, h, w]))
            .unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let g2 = transpose_copy(&as2(g, c, h * w));
            accumulate(&mut grads[a.0], g2.into_dyn());
        }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), shape.iter().product::<usize>(), "reshape size");
        let in_shape = x.shape().to_vec();
        let out = x
            .view()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape of non-contiguous tensor")
            .to_owned();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gb = g
                .view()
                .into_shape_with_order(IxDyn(&in_shape))
                .unwrap()
                .to_owned();
            accumulate(&mut grads[a.0], gb);
        }))
    }

    /// Concatenates `[c_i, h, w]` maps along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (h, w) = {
            let s = self.value(parts[0]).shape();
            (s[1], s[2])
        };
        let mut chans = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &[h, w], "concat spatial shape");
            chans.push(v.shape()[0]);
            data.extend_from_slice(v.as_slice().unwrap());
        }
        let c_total: usize = chans.iter().sum();
        let out = Arr::from_shape_vec(IxDyn(&[c_total, h, w]), data).unwrap();
        let parts_v: Vec<Var> = parts.to_vec();
        self.op(out, parts, Box::new(move |g, _v, grads| {
            let gs = g.as_slice().unwrap();
            let plane = h * w;
            let mut off = 0;
            for (p, &c) in parts_v.iter().zip(&chans) {
                let span = c * plane;
                let gp = Arr::from_shape_vec(
                    IxDyn(&[c, h, w]),
                    gs[off..off + span].to_vec(),
                )
                .unwrap();
                accumulate(&mut grads[p.0], gp);
                off += span;
            }
        }))
    }

    /// Mean over channels: `[c, h, w] -> [1, h, w]`.
    pub fn channel_mean(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = vec![0.0; h * w];
        let x = self.value(a).as_slice().unwrap();
        for ci in 0..c {
            for i in 0..h * w {
                out[i] += x[ci * h * w + i];
            }
        }
        for v in &mut out {
            *v /= c as f64;
        }
        let out = Arr::from_shape_vec(IxDyn(&[1, h, w]), out).unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for i in 0..h * w {
                    dx[ci * h * w + i] = gs[i] / c as f64;
                }
            }
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
            );
        }))
    }

    /// Mean over the spatial axes: `[c, h, w] -> [c]`.
    pub fn spatial_mean(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = (h * w) as f64;
        let x = self.value(a).as_slice().unwrap();
        let mut out = vec![0.0; c];
        for ci in 0..c {
            out[ci] = x[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / plane;
        }
        let out = Arr::from_shape_vec(IxDyn(&[c]), out).unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                let gv = g[[ci]] / plane;
                for i in 0..h * w {
                    dx[ci * h * w + i] = gv;
                }
            }
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
            );
        }))
    }

    /// `x [c, h, w] * m [1, h, w]`, broadcasting the mask over channels.
    pub fn mul_broadcast_c(&mut self, x: Var, m: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sm = self.value(m).shape().to_vec();
        assert_eq!(sm, vec![1, sx[1], sx[2]], "mask must be [1, h, w]");
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let plane = h * w;
        let xv = self.value(x).as_slice().unwrap();
        let mv = self.value(m).as_slice().unwrap();
        let mut out = vec![0.0; c * plane];
        for ci in 0..c {
            for i in 0..plane {
                out[ci * plane + i] = xv[ci * plane + i] * mv[i];
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&[c, h, w]), out).unwrap();
        let (rx, rm) = (self.requires_grad(x), self.requires_grad(m));
        self.op(out, &[x, m], Box::new(move |g, v, grads| {
            let gs = g.as_slice().unwrap();
            if rx {
                let mv = v[m.0].as_slice().unwrap();
                let mut dx = vec![0.0; c * plane];
                for ci in 0..c {
                    for i in 0..plane {
                        dx[ci * plane + i] = gs[ci * plane + i] * mv[i];
                    }
                }
                accumulate(
                    &mut grads[x.0],
                    Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
                );
            }
            if rm {
                let xv = v[x.0].as_slice().unwrap();
                let mut dm = vec![0.0; plane];
                for ci in 0..c {
                    for i in 0..plane {
                        dm[i] += gs[ci * plane + i] * xv[ci * plane + i];
                    }
                }
                accumulate(
                    &mut grads[m.0],
                    Arr::from_shape_vec(IxDyn(&[1, h, w]), dm).unwrap(),
                );
            }
        }))
    }

    /// Row mean of a token matrix: `[n, c] -> [n, 1]`.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 2);
        let (n, c) = (s[0], s[1]);
        let x = self.value(a);
        let x2 = as2(x, n, c);
        let mut out = Vec::with_capacity(n);
        for row in x2.rows() {
            out.push(row.sum() / c as f64);
        }
        let out = Arr::from_shape_vec(IxDyn(&[n, 1]), out).unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0; n * c];
            for i in 0..n {
                let gv = gs[i] / c as f64;
                for j in 0..c {
                    dx[i * c + j] = gv;
                }
            }
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(IxDyn(&[n, c]), dx).unwrap(),
            );
        }))
    }

    /// `x [n, c] * s [n, 1]`, broadcasting the column over channels.
    pub fn mul_broadcast_col(&mut self, x: Var, s: Var) -> Var {
        let sx = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        assert_eq!(ss, vec![sx[0], 1], "scale must be [n, 1]");
        let (n, c) = (sx[0], sx[1]);
        let xv = self.value(x).as_slice().unwrap();
        let sv = self.value(s).as_slice().unwrap();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for j in 0..c {
                out[i * c + j] = xv[i * c + j] * sv[i];
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
        let (rx, rs) = (self.requires_grad(x), self.requires_grad(s));
        self.op(out, &[x, s], Box::new(move |g, v, grads| {
            let gs = g.as_slice().unwrap();
            if rx {
                let sv = v[s.0].as_slice().unwrap();
                let mut dx = vec![0.0; n * c];
                for i in 0..n {
                    for j in 0..c {
                        dx[i * c + j] = gs[i * c + j] * sv[i];
                    }
                }
                accumulate(
                    &mut grads[x.0],
                    Arr::from_shape_vec(IxDyn(&[n, c]), dx).unwrap(),
                );
            }
            if rs {
                let xv = v[x.0].as_slice().unwrap();
                let mut ds = vec![0.0; n];
                for i in 0..n {
                    for j in 0..c {
                        ds[i] += gs[i * c + j] * xv[i * c + j];
                    }
                }
                accumulate(
                    &mut grads[s.0],
                    Arr::from_shape_vec(IxDyn(&[n, 1]), ds).unwrap(),
                );
            }
        }))
    }

    /// Average pooling with an integer factor over `[c, h, w]`.
    pub fn avg_pool(&mut self, a: Var, factor: usize) -> Var {
        let s = self.value(a).shape().to_vec();
        assert_eq!(s.len(), 3);
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(factor >= 1 && h % factor == 0 && w % factor == 0, "pool factor");
        if factor == 1 {
            return self.reshape(a, &[c, h, w]);
        }
        let (oh, ow) = (h / factor, w / factor);
        let x = self.value(a).as_slice().unwrap();
        let inv = 1.0 / (factor * factor) as f64;
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += x[(ci * h + oy * factor + dy) * w + ox * factor + dx];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc * inv;
                }
            }
        }
        let out = Arr::from_shape_vec(IxDyn(&[c, oh, ow]), out).unwrap();
        self.op(out, &[a], Box::new(move |g, _v, grads| {
            let gs = g.as_slice().unwrap();
            let mut dx = vec![0.0; c * h * w];
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gs[(ci * oh + oy) * ow + ox] * inv;
                        for dy in 0..factor {
                            for dxi in 0..factor {
                                dx[(ci * h + oy * factor + dy) * w + ox * factor + dxi] = gv;
                            }
                        }
                    }
                }
            }
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(IxDyn(&[c, h, w]), dx).unwrap(),
            );
        }))
    }

    pub(crate) fn next_index(&self) -> usize {
        self.len_values()
    }

    pub(crate) fn len_values(&self) -> usize {
        // One value per node; the next pushed op lands at this index.
        self.node_count()
    }
}
