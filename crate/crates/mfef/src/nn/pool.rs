//! Parameter-free pooling operators and their adjoints.

use ndarray::{Array2, Array4};

use crate::error::{MfefError, Result};
use crate::tensor::Scalar;

/// Mean over the spatial extent: `(B, C, H, W) -> (B, C)`.
pub fn global_avg_pool<F: Scalar>(x: &Array4<F>) -> Array2<F> {
    let (b, c, h, w) = super::conv::dims4(x);
    let n = F::from_f64((h * w) as f64);
    let mut y = Array2::<F>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut acc = F::zero();
            for yy in 0..h {
                for xx in 0..w {
                    acc = acc + x[[bi, ci, yy, xx]];
                }
            }
            y[[bi, ci]] = acc / n;
        }
    }
    y
}

pub fn global_avg_pool_backward<F: Scalar>(g: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, c) = g.dim();
    let scale = F::one() / F::from_f64((h * w) as f64);
    let mut gx = Array4::<F>::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let v = g[[bi, ci]] * scale;
            gx.index_axis_mut(ndarray::Axis(0), bi)
                .index_axis_mut(ndarray::Axis(0), ci)
                .fill(v);
        }
    }
    gx
}

/// Non-overlapping average pooling by integer factors.
pub fn avg_pool2d<F: Scalar>(x: &Array4<F>, fy: usize, fx: usize) -> Result<Array4<F>> {
    let (b, c, h, w) = super::conv::dims4(x);
    if fy == 0 || fx == 0 || h % fy != 0 || w % fx != 0 {
        return Err(MfefError::InvalidShape(format!(
            "average pool factors ({fy}, {fx}) must divide spatial dims ({h}, {w})"
        )));
    }
    let (ho, wo) = (h / fy, w / fx);
    let n = F::from_f64((fy * fx) as f64);
    let mut y = Array4::<F>::zeros((b, c, ho, wo));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = F::zero();
                    for dy in 0..fy {
                        for dx in 0..fx {
                            acc = acc + x[[bi, ci, oy * fy + dy, ox * fx + dx]];
                        }
                    }
                    y[[bi, ci, oy, ox]] = acc / n;
                }
            }
        }
    }
    Ok(y)
}

pub fn avg_pool2d_backward<F: Scalar>(g: &Array4<F>, fy: usize, fx: usize) -> Array4<F> {
    let (b, c, ho, wo) = super::conv::dims4(g);
    let scale = F::one() / F::from_f64((fy * fx) as f64);
    let mut gx = Array4::<F>::zeros((b, c, ho * fy, wo * fx));
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let v = g[[bi, ci, oy, ox]] * scale;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            gx[[bi, ci, oy * fy + dy, ox * fx + dx]] = v;
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_pool_averages() {
        let x = Array4::from_shape_fn((1, 2, 2, 2), |(_, c, y, xx)| {
            (c * 4 + y * 2 + xx) as f64
        });
        let y = global_avg_pool(&x);
        assert_eq!(y[[0, 0]], 1.5);
        assert_eq!(y[[0, 1]], 5.5);
    }

    #[test]
    fn avg_pool_requires_divisible_dims() {
        let x = Array4::<f64>::zeros((1, 1, 6, 6));
        assert!(avg_pool2d(&x, 2, 2).is_ok());
        assert!(avg_pool2d(&x, 4, 2).is_err());
    }
}
