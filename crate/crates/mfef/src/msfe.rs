//! Multi-scale feature extraction: a channel-wise divide/concatenate cascade.
//!
//! The input's channels are split into `p` groups. Group 1 is exported
//! unchanged. Each later group is concatenated with the half forwarded from
//! the previous stage, convolved (conv → batch-norm → ReLU), and split in
//! two: one half is exported to the output, the other is forwarded to the
//! next stage. The last stage convolves to exactly the residual width, so
//! the block preserves the channel count while mixing receptive fields that
//! grow stage by stage.

use ndarray::{concatenate, Array4, Axis};

use crate::error::{MfefError, Result};
use crate::nn::block::{ConvBnRelu, ConvBnReluCache};
use crate::nn::{GradStore, Mode, ParamKind, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{FeatureMap, Scalar};

/// Structural hyperparameters of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsfeConfig {
    /// Number of channel groups `p`.
    pub groups: usize,
    /// Spatial size of each internal convolution.
    pub conv_kernel: usize,
}

impl MsfeConfig {
    pub fn new(groups: usize, conv_kernel: usize) -> Result<Self> {
        if groups < 2 {
            return Err(MfefError::InvalidConfig(format!(
                "msfe needs at least 2 groups, got {groups}"
            )));
        }
        if conv_kernel % 2 == 0 || conv_kernel == 0 {
            return Err(MfefError::InvalidConfig(format!(
                "msfe conv kernel must be odd and >= 1, got {conv_kernel}"
            )));
        }
        Ok(Self {
            groups,
            conv_kernel,
        })
    }
}

impl Default for MsfeConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            conv_kernel: 3,
        }
    }
}

/// Width accounting for one stage of the cascade.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageWidths {
    input: usize,
    output: usize,
    forwarded: usize,
    exported: usize,
}

#[derive(Debug, Clone)]
pub struct MsfeBlock<F: Scalar> {
    cfg: MsfeConfig,
    channels: usize,
    group_widths: Vec<usize>,
    stage_widths: Vec<StageWidths>,
    stages: Vec<ConvBnRelu<F>>,
}

#[derive(Debug)]
pub struct MsfeCache<F: Scalar> {
    stage_caches: Vec<ConvBnReluCache<F>>,
}

/// Splits `channels` into `p` groups: `floor(C/p)` each, remainder folded
/// into the last group.
fn group_widths(channels: usize, groups: usize) -> Vec<usize> {
    let w = channels / groups;
    let mut widths = vec![w; groups];
    widths[groups - 1] = channels - w * (groups - 1);
    widths
}

impl<F: Scalar> MsfeBlock<F> {
    pub fn new(path: &str, channels: usize, cfg: MsfeConfig, rng: &mut SeedRng) -> Result<Self> {
        if channels < 2 * cfg.groups {
            return Err(MfefError::InvalidConfig(format!(
                "msfe needs C >= 2p so every stage has nonzero width, got C={channels}, p={}",
                cfg.groups
            )));
        }
        let p = cfg.groups;
        let widths = group_widths(channels, p);
        let base = widths[0];

        let mut stage_widths = Vec::with_capacity(p - 1);
        let mut exported_total = base; // group 1 is exported as-is
        let mut forwarded = 0usize;
        for k in 2..=p {
            let input = widths[k - 1] + forwarded;
            let (output, fwd, exp) = if k < p {
                // Forwarded half takes the ceil, exported half the floor.
                let fwd = base.div_ceil(2);
                (base, fwd, base - fwd)
            } else {
                let out = channels - exported_total;
                (out, 0, out)
            };
            stage_widths.push(StageWidths {
                input,
                output,
                forwarded: fwd,
                exported: exp,
            });
            exported_total += exp;
            forwarded = fwd;
        }
        debug_assert_eq!(exported_total, channels, "channel accounting must close");

        let stages = stage_widths
            .iter()
            .enumerate()
            .map(|(i, sw)| {
                ConvBnRelu::new(
                    &format!("{path}.stage{}", i + 2),
                    sw.input,
                    sw.output,
                    cfg.conv_kernel,
                    1,
                    rng,
                )
            })
            .collect();

        Ok(Self {
            cfg,
            channels,
            group_widths: widths,
            stage_widths,
            stages,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn config(&self) -> MsfeConfig {
        self.cfg
    }

    /// Exported channel widths in output order: group 1, then each stage's
    /// exported half, then the final stage's full output.
    pub fn exported_widths(&self) -> Vec<usize> {
        let mut v = vec![self.group_widths[0]];
        v.extend(self.stage_widths.iter().map(|sw| sw.exported));
        v
    }

    pub fn forward(&self, fm: &FeatureMap<F>, mode: Mode) -> Result<(FeatureMap<F>, MsfeCache<F>)> {
        let (_, c, h, w) = fm.dims();
        if c != self.channels {
            return Err(MfefError::InvalidShape(format!(
                "msfe built for {} channels, got {c}",
                self.channels
            )));
        }
        if h < self.cfg.conv_kernel || w < self.cfg.conv_kernel {
            return Err(MfefError::InvalidConfig(format!(
                "msfe spatial dims ({h}, {w}) smaller than conv kernel {}",
                self.cfg.conv_kernel
            )));
        }
        let x = &fm.data;
        let p = self.cfg.groups;

        // Channel offsets of each input group.
        let mut offsets = vec![0usize];
        for wdt in &self.group_widths {
            offsets.push(offsets.last().unwrap() + wdt);
        }

        let mut parts: Vec<Array4<F>> =
            vec![x.slice(ndarray::s![.., 0..self.group_widths[0], .., ..]).to_owned()];
        let mut carry: Option<Array4<F>> = None;
        let mut stage_caches = Vec::with_capacity(p - 1);

        for (i, stage) in self.stages.iter().enumerate() {
            let k = i + 2;
            let group = x.slice(ndarray::s![.., offsets[k - 1]..offsets[k], .., ..]);
            let input = match &carry {
                Some(fwd) => concatenate(Axis(1), &[group.view(), fwd.view()])
                    .expect("stage concatenation"),
                None => group.to_owned(),
            };
            let (y, cache) = stage.forward(&input, mode);
            stage_caches.push(cache);
            let sw = self.stage_widths[i];
            if k < p {
                carry = Some(y.slice(ndarray::s![.., 0..sw.forwarded, .., ..]).to_owned());
                parts.push(y.slice(ndarray::s![.., sw.forwarded.., .., ..]).to_owned());
            } else {
                parts.push(y);
            }
        }

        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        let out = concatenate(Axis(1), &views).expect("output concatenation");
        debug_assert_eq!(out.shape(), fm.data.shape());
        Ok((FeatureMap::new(out)?, MsfeCache { stage_caches }))
    }

    pub fn absorb(&mut self, cache: &MsfeCache<F>) {
        for (stage, c) in self.stages.iter_mut().zip(&cache.stage_caches) {
            stage.absorb(c);
        }
    }

    pub fn backward(
        &self,
        cache: &MsfeCache<F>,
        upstream: &FeatureMap<F>,
        grads: &mut GradStore<F>,
    ) -> Result<FeatureMap<F>> {
        let gy = &upstream.data;
        let (b, c, h, w) = (gy.shape()[0], gy.shape()[1], gy.shape()[2], gy.shape()[3]);
        if c != self.channels {
            return Err(MfefError::InvalidShape(format!(
                "msfe backward: upstream has {c} channels, block has {}",
                self.channels
            )));
        }
        let p = self.cfg.groups;

        // Slice the upstream gradient along the exported layout.
        let exported = self.exported_widths();
        let mut export_grads = Vec::with_capacity(exported.len());
        let mut off = 0usize;
        for wdt in &exported {
            export_grads.push(gy.slice(ndarray::s![.., off..off + wdt, .., ..]).to_owned());
            off += wdt;
        }

        let mut gx = Array4::<F>::zeros((b, c, h, w));
        // Group 1 passes straight through.
        gx.slice_mut(ndarray::s![.., 0..self.group_widths[0], .., ..])
            .assign(&export_grads[0]);

        let mut offsets = vec![0usize];
        for wdt in &self.group_widths {
            offsets.push(offsets.last().unwrap() + wdt);
        }

        // Walk stages in reverse, threading the forwarded-half gradient.
        let mut carry_grad: Option<Array4<F>> = None;
        for i in (0..self.stages.len()).rev() {
            let k = i + 2;
            let sw = self.stage_widths[i];
            let g_out = if k < p {
                let g_fwd = carry_grad
                    .take()
                    .expect("every non-final stage forwards to a consumer");
                concatenate(Axis(1), &[g_fwd.view(), export_grads[i + 1].view()])
                    .expect("stage gradient concatenation")
            } else {
                export_grads[i + 1].clone()
            };
            let g_in = self.stages[i].backward(&cache.stage_caches[i], &g_out, grads);
            let group_w = self.group_widths[k - 1];
            gx.slice_mut(ndarray::s![.., offsets[k - 1]..offsets[k], .., ..])
                .zip_mut_with(&g_in.slice(ndarray::s![.., 0..group_w, .., ..]), |a, &b| {
                    *a = *a + b
                });
            if sw.input > group_w {
                carry_grad = Some(g_in.slice(ndarray::s![.., group_w.., .., ..]).to_owned());
            }
        }
        debug_assert!(carry_grad.is_none());
        FeatureMap::new(gx)
    }
}

impl<F: Scalar> ParamSet<F> for MsfeBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        for s in &self.stages {
            s.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        for s in &self.stages {
            s.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        for s in &mut self.stages {
            s.visit_state_mut(f);
        }
    }
}

/// Theoretical receptive field (pixels) of stage `k`'s output: 1 for the
/// pass-through group, then one kernel composition per additional stage.
pub fn receptive_field_of_stage(cfg: &MsfeConfig, stage: usize) -> Result<usize> {
    if stage < 1 || stage > cfg.groups {
        return Err(MfefError::InvalidConfig(format!(
            "stage {stage} out of range [1, {}]",
            cfg.groups
        )));
    }
    if stage == 1 {
        Ok(1)
    } else {
        Ok(1 + (stage - 1) * (cfg.conv_kernel - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    fn random_fm(shape: (usize, usize, usize, usize), seed: u64) -> FeatureMap<f64> {
        let mut rng = SeedRng::for_params(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        FeatureMap::new(Array4::from_shape_vec(shape, v).unwrap()).unwrap()
    }

    #[test]
    fn channel_accounting_c64_p4() {
        let mut rng = SeedRng::for_params(0);
        let cfg = MsfeConfig::new(4, 3).unwrap();
        let block = MsfeBlock::<f64>::new("msfe", 64, cfg, &mut rng).unwrap();
        assert_eq!(block.exported_widths(), vec![16, 8, 8, 32]);
        assert_eq!(block.stage_widths[0], StageWidths { input: 16, output: 16, forwarded: 8, exported: 8 });
        assert_eq!(block.stage_widths[1], StageWidths { input: 24, output: 16, forwarded: 8, exported: 8 });
        assert_eq!(block.stage_widths[2], StageWidths { input: 24, output: 32, forwarded: 0, exported: 32 });
    }

    #[test]
    fn channel_preservation_across_configs() {
        for &c in &[16usize, 32, 64] {
            for &p in &[2usize, 3, 4] {
                let mut rng = SeedRng::for_params(1);
                let cfg = MsfeConfig::new(p, 3).unwrap();
                let block = MsfeBlock::<f64>::new("msfe", c, cfg, &mut rng).unwrap();
                let fm = random_fm((2, c, 4, 4), 7);
                let (out, _) = block.forward(&fm, Mode::Train).unwrap();
                assert_eq!(out.dims(), (2, c, 4, 4), "C={c}, p={p}");
            }
        }
    }

    #[test]
    fn minimal_width_c_equals_2p() {
        for &p in &[2usize, 3, 4] {
            let c = 2 * p;
            let mut rng = SeedRng::for_params(2);
            let cfg = MsfeConfig::new(p, 3).unwrap();
            let block = MsfeBlock::<f64>::new("msfe", c, cfg, &mut rng).unwrap();
            let fm = random_fm((1, c, 3, 3), 8);
            let (out, _) = block.forward(&fm, Mode::Train).unwrap();
            assert_eq!(out.dims().1, c);
        }
    }

    #[test]
    fn too_few_channels_is_a_config_error() {
        let mut rng = SeedRng::for_params(3);
        let cfg = MsfeConfig::new(4, 3).unwrap();
        assert!(matches!(
            MsfeBlock::<f64>::new("msfe", 7, cfg, &mut rng),
            Err(MfefError::InvalidConfig(_))
        ));
    }

    #[test]
    fn spatial_smaller_than_kernel_is_a_config_error() {
        let mut rng = SeedRng::for_params(3);
        let cfg = MsfeConfig::new(2, 3).unwrap();
        let block = MsfeBlock::<f64>::new("msfe", 8, cfg, &mut rng).unwrap();
        let fm = random_fm((1, 8, 2, 2), 9);
        assert!(matches!(
            block.forward(&fm, Mode::Train),
            Err(MfefError::InvalidConfig(_))
        ));
    }

    #[test]
    fn first_group_passes_through_unchanged() {
        let mut rng = SeedRng::for_params(4);
        let cfg = MsfeConfig::new(2, 3).unwrap();
        let block = MsfeBlock::<f64>::new("msfe", 8, cfg, &mut rng).unwrap();
        let fm = random_fm((2, 8, 4, 4), 10);
        let (out, _) = block.forward(&fm, Mode::Train).unwrap();
        let w = 4; // groups of 4
        assert_eq!(
            fm.data.slice(ndarray::s![.., 0..w, .., ..]),
            out.data.slice(ndarray::s![.., 0..w, .., ..])
        );
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = SeedRng::for_params(5);
        let cfg = MsfeConfig::default();
        let block = MsfeBlock::<f64>::new("msfe", 16, cfg, &mut rng).unwrap();
        let fm = random_fm((2, 16, 4, 4), 11);
        let (out, cache) = block.forward(&fm, Mode::Train).unwrap();
        let zero = FeatureMap::new(Array4::zeros(out.data.raw_dim())).unwrap();
        let mut grads = GradStore::new();
        let gx = block.backward(&cache, &zero, &mut grads).unwrap();
        assert!(gx.data.iter().all(|&v| v == 0.0));
        for (_, g) in grads.iter() {
            assert!(g.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn pass_through_channel_gradient_equals_upstream() {
        let mut rng = SeedRng::for_params(6);
        let cfg = MsfeConfig::new(2, 3).unwrap();
        let block = MsfeBlock::<f64>::new("msfe", 8, cfg, &mut rng).unwrap();
        let fm = random_fm((1, 8, 4, 4), 12);
        let (_, cache) = block.forward(&fm, Mode::Train).unwrap();
        let up = random_fm((1, 8, 4, 4), 13);
        let mut grads = GradStore::new();
        let gx = block.backward(&cache, &up, &mut grads).unwrap();
        assert_eq!(
            gx.data.slice(ndarray::s![.., 0..4, .., ..]),
            up.data.slice(ndarray::s![.., 0..4, .., ..])
        );
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = SeedRng::for_params(7);
        let cfg = MsfeConfig::new(2, 3).unwrap();
        let mut block = MsfeBlock::<f64>::new("msfe", 8, cfg, &mut rng).unwrap();
        let fm = random_fm((2, 8, 4, 4), 14);
        let proj = gradcheck::random_projection(&[2, 8, 4, 4], 15)
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();

        let (_, cache) = block.forward(&fm, Mode::Train).unwrap();
        let mut grads = GradStore::new();
        let up = FeatureMap::new(proj.clone()).unwrap();
        let gx = block.backward(&cache, &up, &mut grads).unwrap();

        let mut loss_x = |probe: &Array4<f64>| {
            let p = FeatureMap::new(probe.clone()).unwrap();
            let (y, _) = block.forward(&p, Mode::Train).unwrap();
            (&y.data * &proj).sum()
        };
        let err =
            gradcheck::check_input_grad(&mut loss_x, &fm.data, &gx.data, gradcheck::DEFAULT_STEP);
        assert!(err < gradcheck::DEFAULT_TOL, "input grad rel err {err}");

        let fm2 = fm.clone();
        let mut loss_p = |m: &MsfeBlock<f64>| {
            let (y, _) = m.forward(&fm2, Mode::Train).unwrap();
            (&y.data * &proj).sum()
        };
        let err =
            gradcheck::check_param_grads(&mut block, &mut loss_p, &grads, gradcheck::DEFAULT_STEP);
        assert!(err < gradcheck::DEFAULT_TOL, "param grad rel err {err}");
    }

    #[test]
    fn receptive_field_growth() {
        let cfg = MsfeConfig::new(4, 3).unwrap();
        assert_eq!(receptive_field_of_stage(&cfg, 1).unwrap(), 1);
        assert_eq!(receptive_field_of_stage(&cfg, 2).unwrap(), 3);
        assert_eq!(receptive_field_of_stage(&cfg, 3).unwrap(), 5);
        assert_eq!(receptive_field_of_stage(&cfg, 4).unwrap(), 7);
        assert!(receptive_field_of_stage(&cfg, 0).is_err());
        assert!(receptive_field_of_stage(&cfg, 5).is_err());

        // Strictly increasing for kernel >= 3.
        for kernel in [3usize, 5, 7] {
            let cfg = MsfeConfig::new(6, kernel).unwrap();
            let mut prev = 0;
            for k in 1..=6 {
                let rf = receptive_field_of_stage(&cfg, k).unwrap();
                assert!(rf > prev, "k={k}, kernel={kernel}");
                prev = rf;
            }
        }
    }

    #[test]
    fn odd_channel_count_folds_remainder_into_last_group() {
        let mut rng = SeedRng::for_params(8);
        let cfg = MsfeConfig::new(3, 3).unwrap();
        let block = MsfeBlock::<f64>::new("msfe", 22, cfg, &mut rng).unwrap();
        assert_eq!(block.group_widths, vec![7, 7, 8]);
        let fm = random_fm((1, 22, 3, 3), 16);
        let (out, _) = block.forward(&fm, Mode::Train).unwrap();
        assert_eq!(out.dims().1, 22);
    }
}
