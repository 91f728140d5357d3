//! 2-D convolutions: dense (im2col + GEMM) and depthwise (direct loops).
//!
//! All convolutions use symmetric zero padding of `(k-1)/2`, so spatial size
//! is preserved at stride 1 and halved (rounding down) at stride 2.

use ndarray::{Array1, Array2, Array4, Axis};

use super::GradStore;
use crate::rng::{init_parameters, SeedRng};
use crate::tensor::Scalar;

/// Dense convolution with weight `(C_out, C_in, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Array4<F>,
    pub bias: Option<Array1<F>>,
    pub path: String,
    pub stride: usize,
    pub kernel: usize,
}

impl<F: Scalar> Conv2d<F> {
    pub fn new(
        path: impl Into<String>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let fan_in = in_channels * kernel * kernel;
        let weight = init_parameters::<F>(
            &[out_channels, in_channels, kernel, kernel],
            fan_in,
            rng,
        )
        .expect("conv weight shape")
        .into_dimensionality()
        .expect("rank-4 weight");
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(out_channels)),
            path: path.into(),
            stride,
            kernel,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.pad();
        (
            (h + 2 * p - k) / self.stride + 1,
            (w + 2 * p - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = dims4(x);
        assert_eq!(c, self.in_channels(), "conv {}: channel mismatch", self.path);
        let (ho, wo) = self.out_spatial(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad());
        let cout = self.out_channels();
        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((cout, c * self.kernel * self.kernel))
            .expect("contiguous weight");
        let mut y_mat = cols.dot(&w_mat.t()); // (B*Ho*Wo, C_out)
        if let Some(bias) = &self.bias {
            y_mat += &bias.view();
        }
        y_mat
            .into_shape_with_order((b, ho, wo, cout))
            .expect("conv output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned()
    }

    /// Returns the input gradient; accumulates weight/bias gradients.
    pub fn backward(&self, x: &Array4<F>, gy: &Array4<F>, grads: &mut GradStore<F>) -> Array4<F> {
        let (b, c, h, w) = dims4(x);
        let (ho, wo) = self.out_spatial(h, w);
        assert_eq!(
            gy.shape(),
            &[b, self.out_channels(), ho, wo],
            "conv {}: upstream gradient shape mismatch",
            self.path
        );
        let k = self.kernel;
        let cout = self.out_channels();

        let cols = im2col(x, k, self.stride, self.pad());
        let gy_mat = gy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b * ho * wo, cout))
            .expect("gy reshape");

        let gw = gy_mat.t().dot(&cols); // (C_out, C_in*k*k)
        grads.accumulate(
            &format!("{}.weight", self.path),
            gw.into_shape_with_order((cout, c, k, k))
                .expect("gw reshape")
                .into_dyn()
                .view(),
        );
        if self.bias.is_some() {
            let gb = gy_mat.sum_axis(Axis(0));
            grads.accumulate(&format!("{}.bias", self.path), gb.into_dyn().view());
        }

        let w_mat = self
            .weight
            .view()
            .into_shape_with_order((cout, c * k * k))
            .expect("contiguous weight");
        let gcols = gy_mat.dot(&w_mat); // (B*Ho*Wo, C_in*k*k)
        col2im(&gcols, (b, c, h, w), k, self.stride, self.pad())
    }
}

/// Per-channel convolution with weight `(C, k, k)`, stride 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d<F: Scalar> {
    pub weight: ndarray::Array3<F>,
    pub bias: Option<Array1<F>>,
    pub path: String,
    pub kernel: usize,
}

impl<F: Scalar> DepthwiseConv2d<F> {
    pub fn new(
        path: impl Into<String>,
        channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut SeedRng,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let weight = init_parameters::<F>(&[channels, kernel, kernel], kernel * kernel, rng)
            .expect("depthwise weight shape")
            .into_dimensionality()
            .expect("rank-3 weight");
        Self {
            weight,
            bias: bias.then(|| Array1::zeros(channels)),
            path: path.into(),
            kernel,
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Array4<F>) -> Array4<F> {
        let (b, c, h, w) = dims4(x);
        assert_eq!(c, self.channels(), "depthwise {}: channel mismatch", self.path);
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let mut y = Array4::<F>::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                let ker = self.weight.index_axis(Axis(0), ci);
                let xin = x.index_axis(Axis(0), bi);
                let xin = xin.index_axis(Axis(0), ci);
                let bias = self.bias.as_ref().map(|bv| bv[ci]).unwrap_or_else(F::zero);
                for oy in 0..h {
                    for ox in 0..w {
                        let mut acc = bias;
                        for ky in 0..k {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                acc = acc + ker[[ky, kx]] * xin[[iy - pad, ix - pad]];
                            }
                        }
                        y[[bi, ci, oy, ox]] = acc;
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, x: &Array4<F>, gy: &Array4<F>, grads: &mut GradStore<F>) -> Array4<F> {
        let (b, c, h, w) = dims4(x);
        assert_eq!(gy.shape(), x.shape(), "depthwise {}: gradient shape", self.path);
        let k = self.kernel;
        let pad = (k - 1) / 2;
        let mut gx = Array4::<F>::zeros((b, c, h, w));
        let mut gw = ndarray::Array3::<F>::zeros((c, k, k));
        let mut gb = Array1::<F>::zeros(c);
        for bi in 0..b {
            for ci in 0..c {
                for oy in 0..h {
                    for ox in 0..w {
                        let g = gy[[bi, ci, oy, ox]];
                        gb[ci] = gb[ci] + g;
                        for ky in 0..k {
                            let iy = oy + ky;
                            if iy < pad || iy - pad >= h {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = ox + kx;
                                if ix < pad || ix - pad >= w {
                                    continue;
                                }
                                let (iy, ix) = (iy - pad, ix - pad);
                                gw[[ci, ky, kx]] = gw[[ci, ky, kx]] + g * x[[bi, ci, iy, ix]];
                                gx[[bi, ci, iy, ix]] =
                                    gx[[bi, ci, iy, ix]] + g * self.weight[[ci, ky, kx]];
                            }
                        }
                    }
                }
            }
        }
        grads.accumulate(&format!("{}.weight", self.path), gw.into_dyn().view());
        if self.bias.is_some() {
            grads.accumulate(&format!("{}.bias", self.path), gb.into_dyn().view());
        }
        gx
    }
}

pub(crate) fn dims4<F: Scalar>(x: &Array4<F>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    (s[0], s[1], s[2], s[3])
}

/// Unrolls padded convolution windows into a `(B*Ho*Wo, C*k*k)` matrix.
fn im2col<F: Scalar>(x: &Array4<F>, k: usize, stride: usize, pad: usize) -> Array2<F> {
    let (b, c, h, w) = dims4(x);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let row_len = c * k * k;
    let mut cols = Array2::<F>::zeros((b * ho * wo, row_len));
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout input");
    let cs = cols.as_slice_mut().expect("fresh standard layout");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row_base = ((bi * ho + oy) * wo + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let src_base = ((bi * c + ci) * h + (iy - pad)) * w;
                        let dst_base = row_base + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            cs[dst_base + kx] = xs[src_base + (ix - pad)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds window gradients back onto the input.
fn col2im<F: Scalar>(
    gcols: &Array2<F>,
    input_dims: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (b, c, h, w) = input_dims;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let row_len = c * k * k;
    let mut gx = Array4::<F>::zeros((b, c, h, w));
    let gs = gcols.as_slice().expect("standard layout gradient");
    let gxs = gx.as_slice_mut().expect("fresh standard layout");
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row_base = ((bi * ho + oy) * wo + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = oy * stride + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let dst_base = ((bi * c + ci) * h + (iy - pad)) * w;
                        let src_base = row_base + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = ox * stride + kx;
                            if ix < pad || ix - pad >= w {
                                continue;
                            }
                            gxs[dst_base + (ix - pad)] =
                                gxs[dst_base + (ix - pad)] + gs[src_base + kx];
                        }
                    }
                }
            }
        }
    }
    gx
}


impl<F: Scalar> super::ParamSet<F> for Conv2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view().into_dyn(),
        );
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.path), super::ParamKind::Bias, b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view_mut().into_dyn(),
        );
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.path), super::ParamKind::Bias, b.view_mut().into_dyn());
        }
    }
}

impl<F: Scalar> super::ParamSet<F> for DepthwiseConv2d<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view().into_dyn(),
        );
        if let Some(b) = &self.bias {
            f(&format!("{}.bias", self.path), super::ParamKind::Bias, b.view().into_dyn());
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, super::ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        f(
            &format!("{}.weight", self.path),
            super::ParamKind::Weight,
            self.weight.view_mut().into_dyn(),
        );
        if let Some(b) = &mut self.bias {
            f(&format!("{}.bias", self.path), super::ParamKind::Bias, b.view_mut().into_dyn());
        }
    }
}
