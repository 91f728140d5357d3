//! Differentiable building blocks with hand-written backward passes.
//!
//! Every layer follows the same contract: `forward(&self, x, mode)` is a pure
//! function returning the output plus a cache holding whatever backward needs;
//! `backward(&self, cache, gy, grads)` returns the input gradient and
//! accumulates parameter gradients into a [`GradStore`] keyed by module path.
//! Batch-normalization running statistics are folded in explicitly via
//! `absorb`, so repeated forwards (e.g. during finite-difference probing)
//! never drift state.

pub mod block;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod pool;

use std::collections::HashMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use crate::tensor::Scalar;

/// Whether normalization layers use batch statistics (`Train`) or running
/// statistics (`Eval`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter role, used to group weight-decay treatment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    NormGain,
    NormBias,
}

/// Accumulated parameter gradients keyed by module path.
#[derive(Debug, Default)]
pub struct GradStore<F: Scalar> {
    grads: HashMap<String, ArrayD<F>>,
}

impl<F: Scalar> GradStore<F> {
    pub fn new() -> Self {
        Self {
            grads: HashMap::new(),
        }
    }

    /// Adds `g` into the slot for `path` (allocating on first touch).
    pub fn accumulate(&mut self, path: &str, g: ArrayViewD<'_, F>) {
        match self.grads.get_mut(path) {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape mismatch at {path}");
                *acc += &g;
            }
            None => {
                self.grads.insert(path.to_string(), g.to_owned());
            }
        }
    }

    pub fn get(&self, path: &str) -> Option<&ArrayD<F>> {
        self.grads.get(path)
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<F>)> {
        self.grads.iter()
    }
}

/// Visits every learnable parameter (and separately every non-learned state
/// buffer such as running statistics) of a module tree.
pub trait ParamSet<F: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ArrayViewD<'_, F>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ArrayViewMutD<'_, F>));

    fn visit_state(&self, _f: &mut dyn FnMut(&str, ArrayViewD<'_, F>)) {}
    fn visit_state_mut(&mut self, _f: &mut dyn FnMut(&str, ArrayViewMutD<'_, F>)) {}
}

/// Total number of scalar parameters in a module tree.
pub fn param_count<F: Scalar>(m: &dyn ParamSet<F>) -> usize {
    let mut n = 0;
    m.visit(&mut |_, _, v| n += v.len());
    n
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
