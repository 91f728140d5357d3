//! Central finite-difference gradient verification.
//!
//! Always runs in `f64`: the default step `h = 1e-5` needs roughly 1e-10
//! arithmetic resolution to resolve a 1e-4 relative tolerance.

use ndarray::Array4;

use crate::nn::{GradStore, ParamSet};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// One-sided derivative disagreement beyond this marks a coordinate as
/// sitting on a kink (ReLU or max-pool switch inside the ±h bracket), where
/// central differences are not a valid probe. Smooth coordinates disagree by
/// only O(h·f''), orders of magnitude below this.
pub const KINK_DISAGREEMENT_TOL: f64 = 1e-3;

/// Outcome of a kink-filtered check.
#[derive(Debug, Clone, Copy)]
pub struct FilteredCheck {
    pub worst_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

impl FilteredCheck {
    fn update(&mut self, analytic: f64, up: f64, down: f64, center: f64, h: f64) {
        let fwd = (up - center) / h;
        let bwd = (center - down) / h;
        if rel_err(fwd, bwd) > KINK_DISAGREEMENT_TOL {
            self.skipped += 1;
            return;
        }
        let numeric = (up - down) / (2.0 * h);
        self.worst_rel_err = self.worst_rel_err.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

/// Relative error with an absolute floor so near-zero pairs compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Max relative error between an analytic input gradient and central
/// differences of `loss` around `x`.
pub fn check_input_grad(
    loss: &mut dyn FnMut(&Array4<f64>) -> f64,
    x: &Array4<f64>,
    analytic: &Array4<f64>,
    h: f64,
) -> f64 {
    assert_eq!(x.shape(), analytic.shape());
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = loss(&probe);
        probe[idx] = orig - h;
        let down = loss(&probe);
        probe[idx] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(rel_err(analytic[idx], numeric));
    }
    worst
}

/// Max relative error between accumulated parameter gradients and central
/// differences of `loss` under single-coordinate parameter perturbations.
///
/// Perturbs every coordinate of every parameter; callers wanting a subsample
/// should shrink the model, not the check.
pub fn check_param_grads<M: ParamSet<f64>>(
    model: &mut M,
    loss: &mut dyn FnMut(&M) -> f64,
    analytic: &GradStore<f64>,
    h: f64,
) -> f64 {
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |path, _, view| layout.push((path.to_string(), view.len())));

    let mut worst = 0.0f64;
    for (path, len) in layout {
        let grad = analytic
            .get(&path)
            .unwrap_or_else(|| panic!("no analytic gradient recorded for {path}"));
        let grad = grad.as_slice().expect("standard layout gradient").to_vec();
        assert_eq!(grad.len(), len, "gradient length mismatch at {path}");
        for i in 0..len {
            poke(model, &path, i, h);
            let up = loss(model);
            poke(model, &path, i, -2.0 * h);
            let down = loss(model);
            poke(model, &path, i, h);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(rel_err(grad[i], numeric));
        }
    }
    worst
}

/// Like [`check_input_grad`], but excludes coordinates whose one-sided
/// derivatives disagree (the loss is locally non-differentiable there).
pub fn check_input_grad_filtered(
    loss: &mut dyn FnMut(&Array4<f64>) -> f64,
    x: &Array4<f64>,
    analytic: &Array4<f64>,
    h: f64,
) -> FilteredCheck {
    assert_eq!(x.shape(), analytic.shape());
    let center = loss(x);
    let mut probe = x.clone();
    let mut out = FilteredCheck {
        worst_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = loss(&probe);
        probe[idx] = orig - h;
        let down = loss(&probe);
        probe[idx] = orig;
        out.update(analytic[idx], up, down, center, h);
    }
    out
}

/// Like [`check_param_grads`], but excludes kink coordinates.
pub fn check_param_grads_filtered<M: ParamSet<f64>>(
    model: &mut M,
    loss: &mut dyn FnMut(&M) -> f64,
    analytic: &GradStore<f64>,
    h: f64,
) -> FilteredCheck {
    let mut layout: Vec<(String, usize)> = Vec::new();
    model.visit(&mut |path, _, view| layout.push((path.to_string(), view.len())));
    let center = loss(model);
    let mut out = FilteredCheck {
        worst_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (path, len) in layout {
        let grad = analytic
            .get(&path)
            .unwrap_or_else(|| panic!("no analytic gradient recorded for {path}"));
        let grad = grad.as_slice().expect("standard layout gradient").to_vec();
        assert_eq!(grad.len(), len, "gradient length mismatch at {path}");
        for i in 0..len {
            poke(model, &path, i, h);
            let up = loss(model);
            poke(model, &path, i, -2.0 * h);
            let down = loss(model);
            poke(model, &path, i, h);
            out.update(grad[i], up, down, center, h);
        }
    }
    out
}

fn poke<M: ParamSet<f64>>(model: &mut M, path: &str, index: usize, delta: f64) {
    let mut hit = false;
    model.visit_mut(&mut |p, _, mut view| {
        if p == path {
            let slice = view.as_slice_mut().expect("standard layout parameter");
            slice[index] += delta;
            hit = true;
        }
    });
    assert!(hit, "parameter path {path} not found");
}

/// Deterministic pseudo-random projection tensor used to reduce a tensor
/// output to the scalar losses these checks need.
pub fn random_projection(shape: &[usize], seed: u64) -> ndarray::ArrayD<f64> {
    let mut rng = crate::rng::SeedRng::with_stream(seed, 2);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), v).expect("projection shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_floors_near_zero() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!(rel_err(1e-9, 0.0) < 1e-2);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
