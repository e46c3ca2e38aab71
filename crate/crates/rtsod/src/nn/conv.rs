//! 2-D convolution via im2col and a dense matrix product.

use super::graph::{accumulate, Arr, Graph, Var};
use ndarray::{Array2, IxDyn};

/// Column matrix `[ci*kh*kw, oh*ow]` for a `[ci, h, w]` input.
fn im2col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let mut cols = Array2::<f64>::zeros((ci * kh * kw, oh * ow));
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let mut cr = cols.row_mut(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cr[oy * ow + ox] = x[base + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of a column matrix back into input layout.
fn col2im(
    cols: &Array2<f64>,
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut x = vec![0.0; ci * h * w];
    for c in 0..ci {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let cr = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (c * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[base + ix as usize] += cr[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

impl Graph {
    /// Convolution of `x [ci, h, w]` with `w [co, ci, kh, kw]` and an
    /// optional `[co]` bias; zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(weight).shape().to_vec();
        assert_eq!(sx.len(), 3, "conv2d input must be [ci, h, w]");
        assert_eq!(sw.len(), 4, "conv2d weight must be [co, ci, kh, kw]");
        assert_eq!(sx[0], sw[1], "conv2d channel mismatch");
        let (ci, h, w) = (sx[0], sx[1], sx[2]);
        let (co, kh, kw) = (sw[0], sw[2], sw[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "kernel larger than padded input"
        );
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;

        let cols = im2col(
            self.value(x).as_slice().unwrap(),
            ci,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        );
        let wmat = self
            .value(weight)
            .view()
            .into_shape_with_order((co, ci * kh * kw))
            .unwrap()
            .to_owned();
        let mut out = super::ops::standardize(wmat.dot(&cols));
        if let Some(bv) = bias {
            let b = self.value(bv);
            assert_eq!(b.len(), co, "conv2d bias dim");
            for (r, mut row) in out.rows_mut().into_iter().enumerate() {
                let bb = b.as_slice().unwrap()[r];
                row.mapv_inplace(|v| v + bb);
            }
        }
        let out = out
            .into_shape_with_order(IxDyn(&[co, oh, ow]))
            .unwrap();
        let (rx, rw) = (self.requires_grad(x), self.requires_grad(weight));
        let rb = bias.map(|b| self.requires_grad(b)).unwrap_or(false);
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        self.op(out, &inputs, Box::new(move |g, v, grads| {
            let g2 = g
                .view()
                .into_shape_with_order((co, oh * ow))
                .unwrap();
            if rw || rx {
                // The column matrix is rebuilt here rather than captured;
                // it is the largest buffer in a pass and cheap to recompute.
                let cols = im2col(
                    v[x.0].as_slice().unwrap(),
                    ci,
                    h,
                    w,
                    kh,
                    kw,
                    stride,
                    pad,
                    oh,
                    ow,
                );
                if rw {
                    let dw = super::ops::standardize(g2.dot(&cols.t()));
                    accumulate(
                        &mut grads[weight.0],
                        dw.into_shape_with_order(IxDyn(&[co, ci, kh, kw])).unwrap(),
                    );
                }
                if rx {
                    let wmat = v[weight.0]
                        .view()
                        .into_shape_with_order((co, ci * kh * kw))
                        .unwrap()
                        .to_owned();
                    let dcols = wmat.t().dot(&g2);
                    let dx = col2im(&dcols, ci, h, w, kh, kw, stride, pad, oh, ow);
                    accumulate(
                        &mut grads[x.0],
                        Arr::from_shape_vec(IxDyn(&[ci, h, w]), dx).unwrap(),
                    );
                }
            }
            if rb {
                let mut db = vec![0.0; co];
                for (r, row) in g2.rows().into_iter().enumerate() {
                    db[r] = row.sum();
                }
                accumulate(
                    &mut grads[bias.unwrap().0],
                    Arr::from_shape_vec(IxDyn(&[co]), db).unwrap(),
                );
            }
        }))
    }
}
