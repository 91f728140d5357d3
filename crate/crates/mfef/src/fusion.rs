//! Aggregates the students' attention-refined maps into one fused
//! representation and classifies it.
//!
//! Each map is first regressed onto a common shape: average-pooled down to
//! the smallest spatial size in the cohort and, when its channel count
//! differs from the target, passed through a learned 1x1 convolution. The
//! regressed maps are channel-concatenated and pushed through `transfer_depth`
//! pairs of depthwise and pointwise convolutions (each normalized and
//! rectified), then global-average-pooled into the fusion classifier.

use ndarray::{concatenate, Array2, Array4, Axis};

use crate::error::{MfefError, Result};
use crate::nn::conv::{Conv2d, DepthwiseConv2d};
use crate::nn::linear::Linear;
use crate::nn::norm::{BatchNorm2d, BnCache};
use crate::nn::pool::{avg_pool2d, avg_pool2d_backward, global_avg_pool, global_avg_pool_backward};
use crate::nn::{GradStore, Mode, ParamKind, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{FeatureMap, Logits, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionConfig {
    /// Common channel width the regressors map onto (the smallest student's).
    pub target_channels: usize,
    /// Number of depthwise+pointwise pairs in the transfer layers.
    pub transfer_depth: usize,
    pub num_classes: usize,
}

impl FusionConfig {
    pub fn new(target_channels: usize, transfer_depth: usize, num_classes: usize) -> Result<Self> {
        if target_channels == 0 || transfer_depth == 0 {
            return Err(MfefError::InvalidConfig(format!(
                "fusion needs target_channels >= 1 and transfer_depth >= 1, got {target_channels}, {transfer_depth}"
            )));
        }
        if num_classes < 2 {
            return Err(MfefError::InvalidConfig(format!(
                "fusion classifier needs >= 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            target_channels,
            transfer_depth,
            num_classes,
        })
    }
}

#[derive(Debug, Clone)]
struct TransferPair<F: Scalar> {
    dw: DepthwiseConv2d<F>,
    bn1: BatchNorm2d<F>,
    pw: Conv2d<F>,
    bn2: BatchNorm2d<F>,
}

#[derive(Debug)]
struct TransferCache<F: Scalar> {
    x: Array4<F>,
    bn1: BnCache<F>,
    y1: Array4<F>,
    bn2: BnCache<F>,
    y2: Array4<F>,
}

impl<F: Scalar> TransferPair<F> {
    fn new(path: &str, channels: usize, rng: &mut SeedRng) -> Self {
        Self {
            dw: DepthwiseConv2d::new(format!("{path}.dw"), channels, 3, false, rng),
            bn1: BatchNorm2d::new(format!("{path}.bn1"), channels),
            pw: Conv2d::new(format!("{path}.pw"), channels, channels, 1, 1, false, rng),
            bn2: BatchNorm2d::new(format!("{path}.bn2"), channels),
        }
    }

    fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, TransferCache<F>) {
        let z1 = self.dw.forward(x);
        let (n1, bn1) = self.bn1.forward(&z1, mode);
        let y1 = n1.mapv(|v| v.max(F::zero()));
        let z2 = self.pw.forward(&y1);
        let (n2, bn2) = self.bn2.forward(&z2, mode);
        let y2 = n2.mapv(|v| v.max(F::zero()));
        (
            y2.clone(),
            TransferCache {
                x: x.clone(),
                bn1,
                y1,
                bn2,
                y2,
            },
        )
    }

    fn absorb(&mut self, cache: &TransferCache<F>) {
        self.bn1.absorb(&cache.bn1);
        self.bn2.absorb(&cache.bn2);
    }

    fn backward(&self, cache: &TransferCache<F>, gy: &Array4<F>, grads: &mut GradStore<F>) -> Array4<F> {
        let mut g = gy.clone();
        ndarray::Zip::from(&mut g).and(&cache.y2).for_each(|gv, &yv| {
            if yv <= F::zero() {
                *gv = F::zero();
            }
        });
        let g = self.bn2.backward(&cache.bn2, &g, grads);
        let mut g = self.pw.backward(&cache.y1, &g, grads);
        ndarray::Zip::from(&mut g).and(&cache.y1).for_each(|gv, &yv| {
            if yv <= F::zero() {
                *gv = F::zero();
            }
        });
        let g = self.bn1.backward(&cache.bn1, &g, grads);
        self.dw.backward(&cache.x, &g, grads)
    }
}

impl<F: Scalar> ParamSet<F> for TransferPair<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.dw.visit(f);
        self.bn1.visit(f);
        self.pw.visit(f);
        self.bn2.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.dw.visit_mut(f);
        self.bn1.visit_mut(f);
        self.pw.visit_mut(f);
        self.bn2.visit_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.bn1.visit_state(f);
        self.bn2.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.bn1.visit_state_mut(f);
        self.bn2.visit_state_mut(f);
    }
}

#[derive(Debug, Clone)]
pub struct FusionModule<F: Scalar> {
    cfg: FusionConfig,
    student_channels: Vec<usize>,
    regressors: Vec<Option<Conv2d<F>>>,
    transfer: Vec<TransferPair<F>>,
    pub classifier: Linear<F>,
}

#[derive(Debug)]
struct RegressCache<F: Scalar> {
    pool_factors: Option<(usize, usize)>,
    conv_input: Option<Array4<F>>,
}

#[derive(Debug)]
pub struct FusionCache<F: Scalar> {
    regress: Vec<RegressCache<F>>,
    transfer: Vec<TransferCache<F>>,
    fused: Array4<F>,
    pooled: Array2<F>,
}

impl<F: Scalar> FusionModule<F> {
    /// Builds regressors for the given per-student channel widths. A student
    /// whose width already equals the target keeps an identity path.
    pub fn new(
        path: &str,
        student_channels: &[usize],
        cfg: FusionConfig,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if student_channels.len() < 2 {
            return Err(MfefError::InvalidConfig(format!(
                "fusion needs at least 2 students, got {}",
                student_channels.len()
            )));
        }
        let regressors = student_channels
            .iter()
            .enumerate()
            .map(|(j, &c)| {
                (c != cfg.target_channels).then(|| {
                    Conv2d::new(
                        format!("{path}.regressor{j}"),
                        c,
                        cfg.target_channels,
                        1,
                        1,
                        false,
                        rng,
                    )
                })
            })
            .collect();
        let width = cfg.target_channels * student_channels.len();
        let transfer = (0..cfg.transfer_depth)
            .map(|i| TransferPair::new(&format!("{path}.transfer{i}"), width, rng))
            .collect();
        Ok(Self {
            cfg,
            student_channels: student_channels.to_vec(),
            regressors,
            transfer,
            classifier: Linear::new(format!("{path}.classifier"), width, cfg.num_classes, rng),
        })
    }

    pub fn config(&self) -> FusionConfig {
        self.cfg
    }

    /// Channel width entering the transfer layers (`n * target_channels`).
    pub fn transfer_width(&self) -> usize {
        self.cfg.target_channels * self.student_channels.len()
    }

    fn regress(
        &self,
        fm_list: &[FeatureMap<F>],
    ) -> Result<(Vec<Array4<F>>, Vec<RegressCache<F>>)> {
        if fm_list.is_empty() {
            return Err(MfefError::InvalidShape(
                "fusion received an empty feature-map list".to_string(),
            ));
        }
        if fm_list.len() != self.student_channels.len() {
            return Err(MfefError::InvalidShape(format!(
                "fusion built for {} students, got {}",
                self.student_channels.len(),
                fm_list.len()
            )));
        }
        let batch = fm_list[0].dims().0;
        let mut h_min = usize::MAX;
        let mut w_min = usize::MAX;
        for fm in fm_list {
            let (b, _, h, w) = fm.dims();
            if b != batch {
                return Err(MfefError::InvalidShape(format!(
                    "fusion inputs disagree on batch size: {batch} vs {b}"
                )));
            }
            h_min = h_min.min(h);
            w_min = w_min.min(w);
        }

        let mut out = Vec::with_capacity(fm_list.len());
        let mut caches = Vec::with_capacity(fm_list.len());
        for (j, fm) in fm_list.iter().enumerate() {
            let (_, c, h, w) = fm.dims();
            if c != self.student_channels[j] {
                return Err(MfefError::InvalidShape(format!(
                    "student {j} has {c} channels, fusion was built for {}",
                    self.student_channels[j]
                )));
            }
            let (mut x, pool_factors) = if h == h_min && w == w_min {
                (fm.data.clone(), None)
            } else {
                if h % h_min != 0 || w % w_min != 0 {
                    return Err(MfefError::InvalidShape(format!(
                        "student {j} spatial ({h}, {w}) not an integer multiple of ({h_min}, {w_min})"
                    )));
                }
                let f = (h / h_min, w / w_min);
                (avg_pool2d(&fm.data, f.0, f.1)?, Some(f))
            };
            let conv_input = match &self.regressors[j] {
                Some(conv) => {
                    let pooled = x;
                    x = conv.forward(&pooled);
                    Some(pooled)
                }
                None => None,
            };
            out.push(x);
            caches.push(RegressCache {
                pool_factors,
                conv_input,
            });
        }
        Ok((out, caches))
    }

    /// Regression stage only: every output has the target channel width and
    /// the minimum spatial size present in the list.
    pub fn regress_to_common(&self, fm_list: &[FeatureMap<F>]) -> Result<Vec<FeatureMap<F>>> {
        let (outs, _) = self.regress(fm_list)?;
        outs.into_iter().map(FeatureMap::new).collect()
    }

    /// Full fusion pass: regress, concatenate, transfer, pool, classify.
    /// Returns the fused map and the fusion logits.
    pub fn forward(
        &self,
        fm_list: &[FeatureMap<F>],
        mode: Mode,
    ) -> Result<(FeatureMap<F>, Logits<F>, FusionCache<F>)> {
        let (regressed, regress_caches) = self.regress(fm_list)?;
        let views: Vec<_> = regressed.iter().map(|a| a.view()).collect();
        let mut x = concatenate(Axis(1), &views).expect("fusion concatenation");

        let mut transfer_caches = Vec::with_capacity(self.transfer.len());
        for pair in &self.transfer {
            let (y, cache) = pair.forward(&x, mode);
            transfer_caches.push(cache);
            x = y;
        }
        let fused = x;
        let pooled = global_avg_pool(&fused);
        let logits = self.classifier.forward(&pooled);
        Ok((
            FeatureMap::new(fused.clone())?,
            Logits::new(logits)?,
            FusionCache {
                regress: regress_caches,
                transfer: transfer_caches,
                fused,
                pooled,
            },
        ))
    }

    pub fn absorb(&mut self, cache: &FusionCache<F>) {
        for (pair, c) in self.transfer.iter_mut().zip(&cache.transfer) {
            pair.absorb(c);
        }
    }

    /// Backward from the logit gradient (and optionally a gradient on the
    /// fused map itself). Returns one input gradient per student.
    pub fn backward(
        &self,
        cache: &FusionCache<F>,
        g_logits: &Array2<F>,
        g_fused: Option<&Array4<F>>,
        grads: &mut GradStore<F>,
    ) -> Result<Vec<FeatureMap<F>>> {
        let g_pooled = self.classifier.backward(&cache.pooled, g_logits, grads);
        let (_, _, h, w) = crate::nn::conv::dims4(&cache.fused);
        let mut g = global_avg_pool_backward(&g_pooled, h, w);
        if let Some(extra) = g_fused {
            g += extra;
        }
        for (pair, c) in self.transfer.iter().zip(&cache.transfer).rev() {
            g = pair.backward(c, &g, grads);
        }

        let t = self.cfg.target_channels;
        let mut out = Vec::with_capacity(self.student_channels.len());
        for (j, rc) in cache.regress.iter().enumerate() {
            let mut gj = g
                .slice(ndarray::s![.., j * t..(j + 1) * t, .., ..])
                .to_owned();
            if let Some(conv) = &self.regressors[j] {
                let pooled_in = rc.conv_input.as_ref().expect("regressor cache");
                gj = conv.backward(pooled_in, &gj, grads);
            }
            if let Some((fy, fx)) = rc.pool_factors {
                gj = avg_pool2d_backward(&gj, fy, fx);
            }
            out.push(FeatureMap::new(gj)?);
        }
        Ok(out)
    }
}

impl<F: Scalar> ParamSet<F> for FusionModule<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        for r in self.regressors.iter().flatten() {
            r.visit(f);
        }
        for t in &self.transfer {
            t.visit(f);
        }
        self.classifier.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        for r in self.regressors.iter_mut().flatten() {
            r.visit_mut(f);
        }
        for t in &mut self.transfer {
            t.visit_mut(f);
        }
        self.classifier.visit_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        for t in &self.transfer {
            t.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        for t in &mut self.transfer {
            t.visit_state_mut(f);
        }
    }
}
