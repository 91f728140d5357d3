//! Sequential channel-then-spatial attention.
//!
//! Channel attention pools the map over space (average and max), pushes both
//! vectors through one shared two-layer MLP, and gates channels with
//! `sigmoid(MLP(avg) + MLP(max))`. Spatial attention pools over channels,
//! stacks the two maps, convolves them down to a single channel, and gates
//! positions. Both gates are strictly inside (0, 1).

use ndarray::{Array2, Array4};

use crate::error::{MfefError, Result};
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::{sigmoid, GradStore, ParamKind, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{FeatureMap, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    /// Channel-MLP bottleneck ratio: the hidden width is `C / reduction`.
    pub reduction: usize,
    /// Kernel size of the spatial-gate convolution.
    pub spatial_kernel: usize,
}

impl AttentionConfig {
    pub fn new(reduction: usize, spatial_kernel: usize) -> Result<Self> {
        if reduction == 0 {
            return Err(MfefError::InvalidConfig(
                "attention reduction must be >= 1".to_string(),
            ));
        }
        if spatial_kernel % 2 == 0 || spatial_kernel == 0 {
            return Err(MfefError::InvalidConfig(format!(
                "spatial kernel must be odd, got {spatial_kernel}"
            )));
        }
        Ok(Self {
            reduction,
            spatial_kernel,
        })
    }
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            reduction: 4,
            spatial_kernel: 7,
        }
    }
}

/// Max over the spatial extent per `(b, c)`, with the flat index of the
/// first maximum in row-major scan order.
fn spatial_max<F: Scalar>(x: &Array4<F>) -> (Array2<F>, Array2<usize>) {
    let (b, c, h, w) = crate::nn::conv::dims4(x);
    let mut m = Array2::<F>::zeros((b, c));
    let mut arg = Array2::<usize>::zeros((b, c));
    for bi in 0..b {
        for ci in 0..c {
            let mut best = F::neg_infinity();
            let mut best_idx = 0usize;
            for yy in 0..h {
                for xx in 0..w {
                    let v = x[[bi, ci, yy, xx]];
                    if v > best {
                        best = v;
                        best_idx = yy * w + xx;
                    }
                }
            }
            m[[bi, ci]] = best;
            arg[[bi, ci]] = best_idx;
        }
    }
    (m, arg)
}

#[derive(Debug, Clone)]
pub struct ChannelAttention<F: Scalar> {
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    channels: usize,
}

#[derive(Debug)]
pub struct ChannelAttentionCache<F: Scalar> {
    x: Array4<F>,
    avg: Array2<F>,
    max: Array2<F>,
    max_arg: Array2<usize>,
    hidden_avg: Array2<F>,
    hidden_max: Array2<F>,
    pub weights: Array2<F>,
}

impl<F: Scalar> ChannelAttention<F> {
    pub fn new(path: &str, channels: usize, reduction: usize, rng: &mut SeedRng) -> Result<Self> {
        if channels % reduction != 0 {
            return Err(MfefError::InvalidConfig(format!(
                "reduction {reduction} must divide channel count {channels}"
            )));
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Linear::new(format!("{path}.fc1"), channels, hidden, rng),
            fc2: Linear::new(format!("{path}.fc2"), hidden, channels, rng),
            channels,
        })
    }

    fn mlp(&self, v: &Array2<F>) -> (Array2<F>, Array2<F>) {
        let hidden = self.fc1.forward(v).mapv(|e| e.max(F::zero()));
        let out = self.fc2.forward(&hidden);
        (hidden, out)
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, ChannelAttentionCache<F>)> {
        let (b, c, h, w) = crate::nn::conv::dims4(x);
        if c != self.channels {
            return Err(MfefError::InvalidShape(format!(
                "channel attention built for {} channels, got {c}",
                self.channels
            )));
        }
        let spatial = F::from_f64((h * w) as f64);
        let mut avg = Array2::<F>::zeros((b, c));
        for bi in 0..b {
            for ci in 0..c {
                avg[[bi, ci]] = x.index_axis(ndarray::Axis(0), bi).index_axis(ndarray::Axis(0), ci).sum()
                    / spatial;
            }
        }
        let (max, max_arg) = spatial_max(x);
        let (hidden_avg, out_avg) = self.mlp(&avg);
        let (hidden_max, out_max) = self.mlp(&max);
        let weights = (&out_avg + &out_max).mapv(sigmoid);

        let mut y = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                let g = weights[[bi, ci]];
                y.index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .mapv_inplace(|v| v * g);
            }
        }
        Ok((
            y,
            ChannelAttentionCache {
                x: x.clone(),
                avg,
                max,
                max_arg,
                hidden_avg,
                hidden_max,
                weights,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &ChannelAttentionCache<F>,
        gy: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let (b, c, h, w) = crate::nn::conv::dims4(&cache.x);
        assert_eq!(gy.shape(), cache.x.shape());

        // Gate gradient and direct input gradient.
        let mut g_w = Array2::<F>::zeros((b, c));
        let mut gx = gy.clone();
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = F::zero();
                for yy in 0..h {
                    for xx in 0..w {
                        acc = acc + gy[[bi, ci, yy, xx]] * cache.x[[bi, ci, yy, xx]];
                    }
                }
                g_w[[bi, ci]] = acc;
                let gate = cache.weights[[bi, ci]];
                gx.index_axis_mut(ndarray::Axis(0), bi)
                    .index_axis_mut(ndarray::Axis(0), ci)
                    .mapv_inplace(|v| v * gate);
            }
        }

        // Through the sigmoid and the shared MLP (both pooled paths).
        let g_pre = ndarray::Zip::from(&g_w)
            .and(&cache.weights)
            .map_collect(|&g, &s| g * s * (F::one() - s));

        let mut g_avg = Array2::<F>::zeros((b, c));
        let mut g_max = Array2::<F>::zeros((b, c));
        for (pooled_in, hidden, g_pool) in [
            (&cache.avg, &cache.hidden_avg, &mut g_avg),
            (&cache.max, &cache.hidden_max, &mut g_max),
        ] {
            let g_hidden = self.fc2.backward(hidden, &g_pre, grads);
            let g_hidden = ndarray::Zip::from(&g_hidden)
                .and(hidden)
                .map_collect(|&g, &hv| if hv > F::zero() { g } else { F::zero() });
            *g_pool = self.fc1.backward(pooled_in, &g_hidden, grads);
        }

        // Average path spreads uniformly; max path routes to the argmax.
        let spatial = F::from_f64((h * w) as f64);
        for bi in 0..b {
            for ci in 0..c {
                let spread = g_avg[[bi, ci]] / spatial;
                let mut outer = gx.index_axis_mut(ndarray::Axis(0), bi);
                let mut ch = outer.index_axis_mut(ndarray::Axis(0), ci);
                ch.mapv_inplace(|v| v + spread);
                let flat = cache.max_arg[[bi, ci]];
                ch[[flat / w, flat % w]] = ch[[flat / w, flat % w]] + g_max[[bi, ci]];
            }
        }
        gx
    }
}

impl<F: Scalar> ParamSet<F> for ChannelAttention<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.fc1.visit(f);
        self.fc2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct SpatialAttention<F: Scalar> {
    pub conv: Conv2d<F>,
}

#[derive(Debug)]
pub struct SpatialAttentionCache<F: Scalar> {
    x: Array4<F>,
    stacked: Array4<F>,
    max_arg: ndarray::Array3<usize>,
    pub weights: Array4<F>, // (B, 1, H, W)
}

impl<F: Scalar> SpatialAttention<F> {
    pub fn new(path: &str, spatial_kernel: usize, rng: &mut SeedRng) -> Self {
        Self {
            conv: Conv2d::new(format!("{path}.conv"), 2, 1, spatial_kernel, 1, true, rng),
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, SpatialAttentionCache<F>)> {
        let (b, c, h, w) = crate::nn::conv::dims4(x);
        let channels = F::from_f64(c as f64);
        let mut stacked = Array4::<F>::zeros((b, 2, h, w));
        let mut max_arg = ndarray::Array3::<usize>::zeros((b, h, w));
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let mut sum = F::zero();
                    let mut best = F::neg_infinity();
                    let mut best_c = 0usize;
                    for ci in 0..c {
                        let v = x[[bi, ci, yy, xx]];
                        sum = sum + v;
                        if v > best {
                            best = v;
                            best_c = ci;
                        }
                    }
                    stacked[[bi, 0, yy, xx]] = sum / channels;
                    stacked[[bi, 1, yy, xx]] = best;
                    max_arg[[bi, yy, xx]] = best_c;
                }
            }
        }
        let weights = self.conv.forward(&stacked).mapv(sigmoid);
        let mut y = x.clone();
        for bi in 0..b {
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        y[[bi, ci, yy, xx]] = y[[bi, ci, yy, xx]] * weights[[bi, 0, yy, xx]];
                    }
                }
            }
        }
        Ok((
            y,
            SpatialAttentionCache {
                x: x.clone(),
                stacked,
                max_arg,
                weights,
            },
        ))
    }

    pub fn backward(
        &self,
        cache: &SpatialAttentionCache<F>,
        gy: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let (b, c, h, w) = crate::nn::conv::dims4(&cache.x);
        assert_eq!(gy.shape(), cache.x.shape());
        let channels = F::from_f64(c as f64);

        let mut g_w = Array4::<F>::zeros((b, 1, h, w));
        let mut gx = gy.clone();
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let mut acc = F::zero();
                    for ci in 0..c {
                        acc = acc + gy[[bi, ci, yy, xx]] * cache.x[[bi, ci, yy, xx]];
                        gx[[bi, ci, yy, xx]] =
                            gx[[bi, ci, yy, xx]] * cache.weights[[bi, 0, yy, xx]];
                    }
                    let s = cache.weights[[bi, 0, yy, xx]];
                    g_w[[bi, 0, yy, xx]] = acc * s * (F::one() - s);
                }
            }
        }

        let g_stacked = self.conv.backward(&cache.stacked, &g_w, grads);
        for bi in 0..b {
            for yy in 0..h {
                for xx in 0..w {
                    let spread = g_stacked[[bi, 0, yy, xx]] / channels;
                    for ci in 0..c {
                        gx[[bi, ci, yy, xx]] = gx[[bi, ci, yy, xx]] + spread;
                    }
                    let mc = cache.max_arg[[bi, yy, xx]];
                    gx[[bi, mc, yy, xx]] = gx[[bi, mc, yy, xx]] + g_stacked[[bi, 1, yy, xx]];
                }
            }
        }
        gx
    }
}

impl<F: Scalar> ParamSet<F> for SpatialAttention<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.conv.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.conv.visit_mut(f);
    }
}

/// Channel attention followed by spatial attention.
#[derive(Debug, Clone)]
pub struct DualAttentionBlock<F: Scalar> {
    pub channel: ChannelAttention<F>,
    pub spatial: SpatialAttention<F>,
}

#[derive(Debug)]
pub struct DualAttentionCache<F: Scalar> {
    pub channel: ChannelAttentionCache<F>,
    pub spatial: SpatialAttentionCache<F>,
}

impl<F: Scalar> DualAttentionBlock<F> {
    pub fn new(
        path: &str,
        channels: usize,
        cfg: AttentionConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(&format!("{path}.channel"), channels, cfg.reduction, rng)?,
            spatial: SpatialAttention::new(&format!("{path}.spatial"), cfg.spatial_kernel, rng),
        })
    }

    /// Channel gate only: returns the `(B, C, 1, 1)` weights and the gated map.
    pub fn channel_attention(
        &self,
        fm: &FeatureMap<F>,
    ) -> Result<(Array4<F>, FeatureMap<F>)> {
        let (out, cache) = self.channel.forward(&fm.data)?;
        let (b, c) = cache.weights.dim();
        let w = cache
            .weights
            .clone()
            .into_shape_with_order((b, c, 1, 1))
            .expect("weight reshape");
        Ok((w, FeatureMap::new(out)?))
    }

    /// Spatial gate only: returns the `(B, 1, H, W)` weights and the gated map.
    pub fn spatial_attention(
        &self,
        fm: &FeatureMap<F>,
    ) -> Result<(Array4<F>, FeatureMap<F>)> {
        let (out, cache) = self.spatial.forward(&fm.data)?;
        Ok((cache.weights.clone(), FeatureMap::new(out)?))
    }

    pub fn forward(&self, fm: &FeatureMap<F>) -> Result<(FeatureMap<F>, DualAttentionCache<F>)> {
        let (mid, channel) = self.channel.forward(&fm.data)?;
        let (out, spatial) = self.spatial.forward(&mid)?;
        Ok((
            FeatureMap::new(out)?,
            DualAttentionCache { channel, spatial },
        ))
    }

    pub fn backward(
        &self,
        cache: &DualAttentionCache<F>,
        upstream: &FeatureMap<F>,
        grads: &mut GradStore<F>,
    ) -> Result<FeatureMap<F>> {
        let g_mid = self.spatial.backward(&cache.spatial, &upstream.data, grads);
        let gx = self.channel.backward(&cache.channel, &g_mid, grads);
        FeatureMap::new(gx)
    }
}

impl<F: Scalar> ParamSet<F> for DualAttentionBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.channel.visit(f);
        self.spatial.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.channel.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}
