//! Conv → batch-norm → ReLU unit shared by the extraction blocks and the
//! residual backbones.

use ndarray::Array4;

use super::conv::Conv2d;
use super::norm::{BatchNorm2d, BnCache};
use super::{GradStore, Mode, ParamKind, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::Scalar;

#[derive(Debug, Clone)]
pub struct ConvBnRelu<F: Scalar> {
    pub conv: Conv2d<F>,
    pub bn: BatchNorm2d<F>,
}

#[derive(Debug)]
pub struct ConvBnReluCache<F: Scalar> {
    x: Array4<F>,
    bn: BnCache<F>,
    y: Array4<F>,
}

impl<F: Scalar> ConvBnRelu<F> {
    pub fn new(
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        Self {
            conv: Conv2d::new(
                format!("{path}.conv"),
                in_channels,
                out_channels,
                kernel,
                stride,
                false,
                rng,
            ),
            bn: BatchNorm2d::new(format!("{path}.bn"), out_channels),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels()
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, ConvBnReluCache<F>) {
        let z = self.conv.forward(x);
        let (zn, bn) = self.bn.forward(&z, mode);
        let y = zn.mapv(|v| v.max(F::zero()));
        (
            y.clone(),
            ConvBnReluCache {
                x: x.clone(),
                bn,
                y,
            },
        )
    }

    pub fn absorb(&mut self, cache: &ConvBnReluCache<F>) {
        self.bn.absorb(&cache.bn);
    }

    pub fn backward(
        &self,
        cache: &ConvBnReluCache<F>,
        gy: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let mut g = gy.clone();
        ndarray::Zip::from(&mut g).and(&cache.y).for_each(|gv, &yv| {
            if yv <= F::zero() {
                *gv = F::zero();
            }
        });
        let g = self.bn.backward(&cache.bn, &g, grads);
        self.conv.backward(&cache.x, &g, grads)
    }
}

impl<F: Scalar> ParamSet<F> for ConvBnRelu<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.conv.visit(f);
        self.bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(f);
        self.bn.visit_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.bn.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.bn.visit_state_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeedRng::for_params(12);
        let mut block = ConvBnRelu::<f64>::new("cbr", 3, 4, 3, 1, &mut rng);
        let n = 2 * 3 * 4 * 4;
        let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        let x = Array4::from_shape_vec((2, 3, 4, 4), v).unwrap();
        let proj = gradcheck::random_projection(&[2, 4, 4, 4], 42)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();

        let (_, cache) = block.forward(&x, Mode::Train);
        let mut grads = GradStore::new();
        let gx = block.backward(&cache, &proj, &mut grads);

        let mut loss_x = |probe: &Array4<f64>| {
            let (y, _) = block.forward(probe, Mode::Train);
            (&y * &proj).sum()
        };
        let err = gradcheck::check_input_grad(&mut loss_x, &x, &gx, gradcheck::DEFAULT_STEP);
        assert!(err < gradcheck::DEFAULT_TOL, "input grad rel err {err}");

        let mut loss_p = |m: &ConvBnRelu<f64>| {
            let (y, _) = m.forward(&x, Mode::Train);
            (&y * &proj).sum()
        };
        let err =
            gradcheck::check_param_grads(&mut block, &mut loss_p, &grads, gradcheck::DEFAULT_STEP);
        assert!(err < gradcheck::DEFAULT_TOL, "param grad rel err {err}");
    }
}
