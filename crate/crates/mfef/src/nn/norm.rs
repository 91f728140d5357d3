//! Batch normalization over `(B, H, W)` per channel.

use ndarray::{Array1, Array4, Axis};

use super::{GradStore, Mode};
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct BatchNorm2d<F: Scalar> {
    pub gain: Array1<F>,
    pub bias: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub path: String,
    pub eps: F,
    pub momentum: F,
}

/// Everything backward needs, plus the batch moments for [`BatchNorm2d::absorb`].
#[derive(Debug, Clone)]
pub struct BnCache<F: Scalar> {
    pub mode: Mode,
    normalized: Array4<F>,
    inv_std: Array1<F>,
    batch_mean: Array1<F>,
    batch_var: Array1<F>,
}

impl<F: Scalar> BatchNorm2d<F> {
    pub fn new(path: impl Into<String>, channels: usize) -> Self {
        Self {
            gain: Array1::ones(channels),
            bias: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            path: path.into(),
            eps: F::from_f64(1e-5),
            momentum: F::from_f64(0.1),
        }
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    /// Pure forward. `Train` normalizes with batch statistics, `Eval` with
    /// running statistics; neither mutates the layer (see [`Self::absorb`]).
    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, BnCache<F>) {
        let c = self.channels();
        assert_eq!(x.shape()[1], c, "batchnorm {}: channel mismatch", self.path);
        let n = F::from_f64((x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64);

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = Array1::<F>::zeros(c);
                let mut var = Array1::<F>::zeros(c);
                for ci in 0..c {
                    let ch = x.index_axis(Axis(1), ci);
                    let m = ch.sum() / n;
                    let v = ch.iter().map(|&e| (e - m) * (e - m)).fold(F::zero(), |a, b| a + b) / n;
                    mean[ci] = m;
                    var[ci] = v;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };

        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        let mut normalized = x.clone();
        for ci in 0..c {
            let m = mean[ci];
            let is = inv_std[ci];
            normalized
                .index_axis_mut(Axis(1), ci)
                .mapv_inplace(|e| (e - m) * is);
        }
        let mut y = normalized.clone();
        for ci in 0..c {
            let g = self.gain[ci];
            let b = self.bias[ci];
            y.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * g + b);
        }
        (
            y,
            BnCache {
                mode,
                normalized,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        )
    }

    /// Folds the cached batch moments into the running statistics.
    pub fn absorb(&mut self, cache: &BnCache<F>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = self.momentum;
        let keep = F::one() - m;
        for ci in 0..self.channels() {
            self.running_mean[ci] = self.running_mean[ci] * keep + cache.batch_mean[ci] * m;
            self.running_var[ci] = self.running_var[ci] * keep + cache.batch_var[ci] * m;
        }
    }

    pub fn backward(
        &self,
        cache: &BnCache<F>,
        gy: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let c = self.channels();
        assert_eq!(gy.shape(), cache.normalized.shape());
        let n = F::from_f64((gy.shape()[0] * gy.shape()[2] * gy.shape()[3]) as f64);

        let mut ggain = Array1::<F>::zeros(c);
        let mut gbias = Array1::<F>::zeros(c);
        let mut gx = gy.clone();
        for ci in 0..c {
            let xhat = cache.normalized.index_axis(Axis(1), ci);
            let g = gy.index_axis(Axis(1), ci);
            let sum_gy = g.sum();
            let sum_gy_xhat = g
                .iter()
                .zip(xhat.iter())
                .map(|(&a, &b)| a * b)
                .fold(F::zero(), |a, b| a + b);
            ggain[ci] = sum_gy_xhat;
            gbias[ci] = sum_gy;

            let scale = self.gain[ci] * cache.inv_std[ci];
            match cache.mode {
                Mode::Train => {
                    let mean_gy = sum_gy / n;
                    let mean_gy_xhat = sum_gy_xhat / n;
                    let mut out = gx.index_axis_mut(Axis(1), ci);
                    ndarray::Zip::from(&mut out).and(&xhat).for_each(|o, &xh| {
                        *o = scale * (*o - mean_gy - xh * mean_gy_xhat);
                    });
                }
                Mode::Eval => {
                    gx.index_axis_mut(Axis(1), ci).mapv_inplace(|e| e * scale);
                }
            }
        }
        grads.accumulate(&format!("{}.gain", self.path), ggain.into_dyn().view());
        grads.accumulate(&format!("{}.bias", self.path), gbias.into_dyn().view());
        gx
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_forward_standardizes_each_channel() {
        let mut rng = crate::rng::SeedRng::for_params(5);
        let v: Vec<f64> = (0..2 * 3 * 4 * 4).map(|_| rng.standard_normal() * 3.0 + 1.5).collect();
        let x = Array4::from_shape_vec((2, 3, 4, 4), v).unwrap();
        let bn = BatchNorm2d::<f64>::new("bn", 3);
        let (y, _) = bn.forward(&x, Mode::Train);
        for ci in 0..3 {
            let ch = y.index_axis(Axis(1), ci);
            let n = ch.len() as f64;
            let mean = ch.sum() / n;
            let var = ch.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-3); // eps shifts variance slightly
        }
    }

    #[test]
    fn absorb_moves_running_stats_toward_batch() {
        let x = Array4::from_elem((1, 1, 2, 2), 4.0f64);
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        let (_, cache) = bn.forward(&x, Mode::Train);
        bn.absorb(&cache);
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12); // 0.9*0 + 0.1*4
        assert!((bn.running_var[0] - 0.9).abs() < 1e-12); // 0.9*1 + 0.1*0
    }

    #[test]
    fn eval_mode_does_not_couple_batch_elements() {
        let mut bn = BatchNorm2d::<f64>::new("bn", 1);
        bn.running_mean[0] = 1.0;
        bn.running_var[0] = 4.0;
        let x = Array4::from_shape_vec((2, 1, 1, 1), vec![3.0f64, -1.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Eval);
        let inv = 1.0 / (4.0f64 + 1e-5).sqrt();
        assert!((y[[0, 0, 0, 0]] - 2.0 * inv).abs() < 1e-12);
        assert!((y[[1, 0, 0, 0]] + 2.0 * inv).abs() < 1e-12);
    }
}

impl<F: Scalar> super::ParamSet<F> for BatchNorm2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewD<'_, F>)) {
        f(
            &format!("{}.gain", self.path),
            super::ParamKind::NormGain,
            self.gain.view().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            super::ParamKind::NormBias,
            self.bias.view().into_dyn(),
        );
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        f(
            &format!("{}.gain", self.path),
            super::ParamKind::NormGain,
            self.gain.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            super::ParamKind::NormBias,
            self.bias.view_mut().into_dyn(),
        );
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        f(&format!("{}.running_mean", self.path), self.running_mean.view().into_dyn());
        f(&format!("{}.running_var", self.path), self.running_var.view().into_dyn());
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        f(
            &format!("{}.running_mean", self.path),
            self.running_mean.view_mut().into_dyn(),
        );
        f(
            &format!("{}.running_var", self.path),
            self.running_var.view_mut().into_dyn(),
        );
    }
}
