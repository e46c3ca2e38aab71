//! Training losses, written directly against probabilities.

use super::graph::{accumulate, Arr, Graph, Var};
use ndarray::IxDyn;

/// Clamp bound keeping the cross-entropy logarithms finite.
const BCE_EPS: f64 = 1e-7;

impl Graph {
    /// Weighted sum of binary cross-entropy and soft Dice, both taking the
    /// predicted probability map directly. The cross-entropy term clamps
    /// probabilities to `[1e-7, 1 - 1e-7]`; the Dice term uses the raw
    /// values with additive smoothing of 1 on both numerator and
    /// denominator.
    pub fn bce_dice_loss(&mut self, p: Var, gt: &Arr, bce_w: f64, dice_w: f64) -> Var {
        assert_eq!(self.value(p).shape(), gt.shape());
        let g = gt.as_slice().unwrap().to_vec();
        let pv = self.value(p).as_slice().unwrap();
        let n = g.len() as f64;
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut psum = 0.0;
        let mut gsum = 0.0;
        for (&pi, &gi) in pv.iter().zip(&g) {
            let pc = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
            bce -= gi * pc.ln() + (1.0 - gi) * (1.0 - pc).ln();
            inter += pi * gi;
            psum += pi;
            gsum += gi;
        }
        bce /= n;
        let dice = 1.0 - (2.0 * inter + 1.0) / (psum + gsum + 1.0);
        let loss = bce_w * bce + dice_w * dice;
        let out = Arr::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        self.op(out, &[p], Box::new(move |gup, v, grads| {
            let scale = gup.as_slice().unwrap()[0];
            let pv = v[p.0].as_slice().unwrap();
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for (&pi, &gi) in pv.iter().zip(&g) {
                inter += pi * gi;
                psum += pi;
                gsum += gi;
            }
            let denom = psum + gsum + 1.0;
            let numer = 2.0 * inter + 1.0;
            let mut dp = vec![0.0; g.len()];
            for ((d, &pi), &gi) in dp.iter_mut().zip(pv.iter()).zip(&g) {
                let mut acc = 0.0;
                if pi > BCE_EPS && pi < 1.0 - BCE_EPS {
                    acc += bce_w * (-gi / pi + (1.0 - gi) / (1.0 - pi)) / n;
                }
                acc += dice_w * (numer - 2.0 * gi * denom) / (denom * denom);
                *d = acc * scale;
            }
            accumulate(
                &mut grads[p.0],
                Arr::from_shape_vec(v[p.0].raw_dim(), dp).unwrap(),
            );
        }))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, a: Var, target: &Arr) -> Var {
        assert_eq!(self.value(a).shape(), target.shape());
        let t = target.as_slice().unwrap().to_vec();
        let av = self.value(a).as_slice().unwrap();
        let n = t.len() as f64;
        let loss: f64 = av
            .iter()
            .zip(&t)
            .map(|(&x, &y)| (x - y).abs())
            .sum::<f64>()
            / n;
        let out = Arr::from_shape_vec(IxDyn(&[1]), vec![loss]).unwrap();
        self.op(out, &[a], Box::new(move |gup, v, grads| {
            let scale = gup.as_slice().unwrap()[0] / n;
            let av = v[a.0].as_slice().unwrap();
            let da: Vec<f64> = av
                .iter()
                .zip(&t)
                .map(|(&x, &y)| {
                    let d = x - y;
                    if d > 0.0 {
                        scale
                    } else if d < 0.0 {
                        -scale
                    } else {
                        0.0
                    }
                })
                .collect();
            accumulate(
                &mut grads[a.0],
                Arr::from_shape_vec(v[a.0].raw_dim(), da).unwrap(),
            );
        }))
    }
}
