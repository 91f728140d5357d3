//! Affine map over flattened features.

use ndarray::{Array1, Array2, Axis};

use super::GradStore;
use crate::rng::{init_parameters, SeedRng};
use crate::tensor::Scalar;

/// `y = x Wᵀ + b` with weight `(out, in)`.
#[derive(Debug, Clone)]
pub struct Linear<F: Scalar> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub path: String,
}

impl<F: Scalar> Linear<F> {
    pub fn new(path: impl Into<String>, in_dim: usize, out_dim: usize, rng: &mut SeedRng) -> Self {
        let weight = init_parameters::<F>(&[out_dim, in_dim], in_dim, rng)
            .expect("linear weight shape")
            .into_dimensionality()
            .expect("rank-2 weight");
        Self {
            weight,
            bias: Array1::zeros(out_dim),
            path: path.into(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        assert_eq!(x.ncols(), self.in_dim(), "linear {}: input dim", self.path);
        x.dot(&self.weight.t()) + &self.bias.view()
    }

    pub fn backward(&self, x: &Array2<F>, gy: &Array2<F>, grads: &mut GradStore<F>) -> Array2<F> {
        assert_eq!(gy.dim(), (x.nrows(), self.out_dim()));
        let gw = gy.t().dot(x);
        grads.accumulate(&format!("{}.weight", self.path), gw.into_dyn().view());
        let gb = gy.sum_axis(Axis(0));
        grads.accumulate(&format!("{}.bias", self.path), gb.into_dyn().view());
        gy.dot(&self.weight)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn forward_matches_manual_affine() {
        let mut rng = SeedRng::for_params(0);
        let mut lin = Linear::<f64>::new("fc", 2, 2, &mut rng);
        lin.weight = array![[1.0, 2.0], [3.0, 4.0]];
        lin.bias = array![0.5, -0.5];
        let x = array![[1.0, 1.0]];
        let y = lin.forward(&x);
        assert_eq!(y, array![[3.5, 6.5]]);
    }
}

impl<F: Scalar> super::ParamSet<F> for Linear<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view().into_dyn(),
        );
        f(&format!("{}.bias", self.path), super::ParamKind::Bias, self.bias.view().into_dyn());
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view_mut().into_dyn(),
        );
        f(
            &format!("{}.bias", self.path),
            super::ParamKind::Bias,
            self.bias.view_mut().into_dyn(),
        );
    }
}
