//! Student backbones: residual CNNs split into a shared low-level trunk
//! (stem plus first residual stage) and per-student branches.
//!
//! Two scales are provided: `tiny-res-8` for fast synthetic experiments and
//! the classic CIFAR residual family (`res-20`, `res-32`, `res-56`).

use ndarray::{Array2, Array4};

use crate::error::{MfefError, Result};
use crate::nn::block::{ConvBnRelu, ConvBnReluCache};
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::norm::{BatchNorm2d, BnCache};
use crate::nn::pool::{global_avg_pool, global_avg_pool_backward};
use crate::nn::{GradStore, Mode, ParamKind, ParamSet};
use crate::rng::SeedRng;
use crate::tensor::{FeatureMap, Logits, Scalar};

/// Deterministic construction recipe for one student.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stage_widths: Vec<usize>,
    pub stage_blocks: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn by_name(name: &str, in_channels: usize, num_classes: usize) -> Result<Self> {
        let (stem, widths, blocks, strides) = match name {
            "tiny-res-8" => (8, vec![8, 16, 32], vec![1, 1, 1], vec![1, 2, 2]),
            "res-20" => (16, vec![16, 32, 64], vec![3, 3, 3], vec![1, 2, 2]),
            "res-32" => (16, vec![16, 32, 64], vec![5, 5, 5], vec![1, 2, 2]),
            "res-56" => (16, vec![16, 32, 64], vec![9, 9, 9], vec![1, 2, 2]),
            other => {
                return Err(MfefError::InvalidConfig(format!(
                    "unknown architecture '{other}' (expected tiny-res-8, res-20, res-32, res-56)"
                )))
            }
        };
        Ok(Self {
            name: name.to_string(),
            in_channels,
            stem_channels: stem,
            stage_widths: widths,
            stage_blocks: blocks,
            stage_strides: strides,
            num_classes,
        })
    }

    /// Channel width of the final feature map.
    pub fn last_stage_channels(&self) -> usize {
        *self.stage_widths.last().expect("at least one stage")
    }

    /// Everything that must agree for two students to share a trunk.
    fn first_stage_signature(&self) -> (usize, usize, usize, usize, usize) {
        (
            self.in_channels,
            self.stem_channels,
            self.stage_widths[0],
            self.stage_blocks[0],
            self.stage_strides[0],
        )
    }

    /// Total learnable parameters of a full single student.
    pub fn param_count(&self) -> usize {
        let mut rng = SeedRng::for_params(0);
        let model = SingleModel::<f32>::new(self, &mut rng);
        crate::nn::param_count(&model)
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock<F: Scalar> {
    conv1: Conv2d<F>,
    bn1: BatchNorm2d<F>,
    conv2: Conv2d<F>,
    bn2: BatchNorm2d<F>,
    shortcut: Option<(Conv2d<F>, BatchNorm2d<F>)>,
}

#[derive(Debug)]
pub struct ResidualBlockCache<F: Scalar> {
    x: Array4<F>,
    bn1: BnCache<F>,
    y1: Array4<F>,
    bn2: BnCache<F>,
    shortcut_bn: Option<BnCache<F>>,
    y_out: Array4<F>,
}

impl<F: Scalar> ResidualBlock<F> {
    fn new(path: &str, in_channels: usize, width: usize, stride: usize, rng: &mut SeedRng) -> Self {
        let conv1 = Conv2d::new(format!("{path}.conv1"), in_channels, width, 3, stride, false, rng);
        let bn1 = BatchNorm2d::new(format!("{path}.bn1"), width);
        let conv2 = Conv2d::new(format!("{path}.conv2"), width, width, 3, 1, false, rng);
        let bn2 = BatchNorm2d::new(format!("{path}.bn2"), width);
        let shortcut = (stride != 1 || in_channels != width).then(|| {
            (
                Conv2d::new(format!("{path}.down.conv"), in_channels, width, 1, stride, false, rng),
                BatchNorm2d::new(format!("{path}.down.bn"), width),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, ResidualBlockCache<F>) {
        let z1 = self.conv1.forward(x);
        let (n1, bn1) = self.bn1.forward(&z1, mode);
        let y1 = n1.mapv(|v| v.max(F::zero()));
        let z2 = self.conv2.forward(&y1);
        let (n2, bn2) = self.bn2.forward(&z2, mode);
        let (skip, shortcut_bn) = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(x);
                let (s, c) = bn.forward(&s, mode);
                (s, Some(c))
            }
            None => (x.clone(), None),
        };
        let y_out = (&n2 + &skip).mapv(|v| v.max(F::zero()));
        (
            y_out.clone(),
            ResidualBlockCache {
                x: x.clone(),
                bn1,
                y1,
                bn2,
                shortcut_bn,
                y_out,
            },
        )
    }

    fn absorb(&mut self, cache: &ResidualBlockCache<F>) {
        self.bn1.absorb(&cache.bn1);
        self.bn2.absorb(&cache.bn2);
        if let (Some((_, bn)), Some(c)) = (&mut self.shortcut, &cache.shortcut_bn) {
            bn.absorb(c);
        }
    }

    fn backward(
        &self,
        cache: &ResidualBlockCache<F>,
        gy: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let mut g = gy.clone();
        ndarray::Zip::from(&mut g).and(&cache.y_out).for_each(|gv, &yv| {
            if yv <= F::zero() {
                *gv = F::zero();
            }
        });

        // Main path.
        let g_main = self.bn2.backward(&cache.bn2, &g, grads);
        let mut g_main = self.conv2.backward(&cache.y1, &g_main, grads);
        ndarray::Zip::from(&mut g_main).and(&cache.y1).for_each(|gv, &yv| {
            if yv <= F::zero() {
                *gv = F::zero();
            }
        });
        let g_main = self.bn1.backward(&cache.bn1, &g_main, grads);
        let g_main = self.conv1.backward(&cache.x, &g_main, grads);

        // Shortcut path.
        let g_skip = match (&self.shortcut, &cache.shortcut_bn) {
            (Some((conv, bn)), Some(c)) => {
                let gs = bn.backward(c, &g, grads);
                conv.backward(&cache.x, &gs, grads)
            }
            _ => g,
        };
        g_main + g_skip
    }
}

impl<F: Scalar> ParamSet<F> for ResidualBlock<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(f);
            bn.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(f);
            bn.visit_mut(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.bn1.visit_state(f);
        self.bn2.visit_state(f);
        if let Some((_, bn)) = &self.shortcut {
            bn.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.bn1.visit_state_mut(f);
        self.bn2.visit_state_mut(f);
        if let Some((_, bn)) = &mut self.shortcut {
            bn.visit_state_mut(f);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage<F: Scalar> {
    blocks: Vec<ResidualBlock<F>>,
}

#[derive(Debug)]
pub struct StageCache<F: Scalar> {
    blocks: Vec<ResidualBlockCache<F>>,
}

impl<F: Scalar> Stage<F> {
    fn new(
        path: &str,
        in_channels: usize,
        width: usize,
        blocks: usize,
        stride: usize,
        rng: &mut SeedRng,
    ) -> Self {
        let blocks = (0..blocks)
            .map(|i| {
                let (cin, s) = if i == 0 { (in_channels, stride) } else { (width, 1) };
                ResidualBlock::new(&format!("{path}.block{i}"), cin, width, s, rng)
            })
            .collect();
        Self { blocks }
    }

    fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, StageCache<F>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut y = x.clone();
        for b in &self.blocks {
            let (out, c) = b.forward(&y, mode);
            caches.push(c);
            y = out;
        }
        (y, StageCache { blocks: caches })
    }

    fn absorb(&mut self, cache: &StageCache<F>) {
        for (b, c) in self.blocks.iter_mut().zip(&cache.blocks) {
            b.absorb(c);
        }
    }

    fn backward(&self, cache: &StageCache<F>, gy: &Array4<F>, grads: &mut GradStore<F>) -> Array4<F> {
        let mut g = gy.clone();
        for (b, c) in self.blocks.iter().zip(&cache.blocks).rev() {
            g = b.backward(c, &g, grads);
        }
        g
    }
}

impl<F: Scalar> ParamSet<F> for Stage<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        for b in &self.blocks {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        for b in &mut self.blocks {
            b.visit_mut(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        for b in &self.blocks {
            b.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        for b in &mut self.blocks {
            b.visit_state_mut(f);
        }
    }
}

/// Stem convolution plus the first residual stage (the "low-level layers").
#[derive(Debug, Clone)]
pub struct SharedTrunk<F: Scalar> {
    stem: ConvBnRelu<F>,
    stage1: Stage<F>,
}

#[derive(Debug)]
pub struct TrunkCache<F: Scalar> {
    stem: ConvBnReluCache<F>,
    stage1: StageCache<F>,
}

impl<F: Scalar> SharedTrunk<F> {
    fn new(path: &str, spec: &ArchSpec, rng: &mut SeedRng) -> Self {
        let stem = ConvBnRelu::new(
            &format!("{path}.stem"),
            spec.in_channels,
            spec.stem_channels,
            3,
            1,
            rng,
        );
        let stage1 = Stage::new(
            &format!("{path}.stage1"),
            spec.stem_channels,
            spec.stage_widths[0],
            spec.stage_blocks[0],
            spec.stage_strides[0],
            rng,
        );
        Self { stem, stage1 }
    }

    pub fn forward(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, TrunkCache<F>) {
        let (y, stem) = self.stem.forward(x, mode);
        let (y, stage1) = self.stage1.forward(&y, mode);
        (y, TrunkCache { stem, stage1 })
    }

    pub fn absorb(&mut self, cache: &TrunkCache<F>) {
        self.stem.absorb(&cache.stem);
        self.stage1.absorb(&cache.stage1);
    }

    pub fn backward(&self, cache: &TrunkCache<F>, gy: &Array4<F>, grads: &mut GradStore<F>) {
        let g = self.stage1.backward(&cache.stage1, gy, grads);
        self.stem.backward(&cache.stem, &g, grads);
    }
}

impl<F: Scalar> ParamSet<F> for SharedTrunk<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.stem.visit(f);
        self.stage1.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.stem.visit_mut(f);
        self.stage1.visit_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.stem.visit_state(f);
        self.stage1.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.stem.visit_state_mut(f);
        self.stage1.visit_state_mut(f);
    }
}

/// Residual stages after the trunk, plus the classifier head.
#[derive(Debug, Clone)]
pub struct StudentBranch<F: Scalar> {
    stages: Vec<Stage<F>>,
    head: Linear<F>,
    last_channels: usize,
}

#[derive(Debug)]
pub struct BranchCache<F: Scalar> {
    stages: Vec<StageCache<F>>,
}

#[derive(Debug)]
pub struct HeadCache<F: Scalar> {
    pooled: Array2<F>,
    spatial: (usize, usize),
}

impl<F: Scalar> StudentBranch<F> {
    fn new(path: &str, spec: &ArchSpec, rng: &mut SeedRng) -> Self {
        let mut stages = Vec::new();
        let mut cin = spec.stage_widths[0];
        for k in 1..spec.stage_widths.len() {
            stages.push(Stage::new(
                &format!("{path}.stage{}", k + 1),
                cin,
                spec.stage_widths[k],
                spec.stage_blocks[k],
                spec.stage_strides[k],
                rng,
            ));
            cin = spec.stage_widths[k];
        }
        let last_channels = spec.last_stage_channels();
        Self {
            stages,
            head: Linear::new(format!("{path}.head"), last_channels, spec.num_classes, rng),
            last_channels,
        }
    }

    pub fn last_channels(&self) -> usize {
        self.last_channels
    }

    pub fn forward_stages(&self, x: &Array4<F>, mode: Mode) -> (Array4<F>, BranchCache<F>) {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut y = x.clone();
        for s in &self.stages {
            let (out, c) = s.forward(&y, mode);
            caches.push(c);
            y = out;
        }
        (y, BranchCache { stages: caches })
    }

    /// Global average pool plus the affine classifier.
    pub fn head_forward(&self, features: &Array4<F>) -> (Array2<F>, HeadCache<F>) {
        let pooled = global_avg_pool(features);
        let logits = self.head.forward(&pooled);
        let s = features.shape();
        (
            logits,
            HeadCache {
                pooled,
                spatial: (s[2], s[3]),
            },
        )
    }

    pub fn head_backward(
        &self,
        cache: &HeadCache<F>,
        g_logits: &Array2<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let g_pooled = self.head.backward(&cache.pooled, g_logits, grads);
        global_avg_pool_backward(&g_pooled, cache.spatial.0, cache.spatial.1)
    }

    pub fn backward_stages(
        &self,
        cache: &BranchCache<F>,
        g_features: &Array4<F>,
        grads: &mut GradStore<F>,
    ) -> Array4<F> {
        let mut g = g_features.clone();
        for (s, c) in self.stages.iter().zip(&cache.stages).rev() {
            g = s.backward(c, &g, grads);
        }
        g
    }

    pub fn absorb(&mut self, cache: &BranchCache<F>) {
        for (s, c) in self.stages.iter_mut().zip(&cache.stages) {
            s.absorb(c);
        }
    }
}

impl<F: Scalar> ParamSet<F> for StudentBranch<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        for s in &self.stages {
            s.visit(f);
        }
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        for s in &mut self.stages {
            s.visit_mut(f);
        }
        self.head.visit_mut(f);
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

/// Trunk ownership: one shared set of low-level layers when all students
/// agree on the first-stage shape, otherwise one private trunk each.
#[derive(Debug, Clone)]
pub enum Trunks<F: Scalar> {
    Shared(SharedTrunk<F>),
    PerStudent(Vec<SharedTrunk<F>>),
}

impl<F: Scalar> Trunks<F> {
    pub fn is_shared(&self) -> bool {
        matches!(self, Trunks::Shared(_))
    }
}

#[derive(Debug)]
pub enum TrunksCache<F: Scalar> {
    Shared(TrunkCache<F>),
    PerStudent(Vec<TrunkCache<F>>),
}

#[derive(Debug, Clone)]
pub struct CohortModel<F: Scalar> {
    pub trunks: Trunks<F>,
    pub branches: Vec<StudentBranch<F>>,
    pub specs: Vec<ArchSpec>,
}

#[derive(Debug)]
pub struct FeaturesCache<F: Scalar> {
    trunk: TrunksCache<F>,
    branches: Vec<BranchCache<F>>,
}

/// Builds the student cohort. The trunk is shared only when every spec has
/// an identical first stage.
pub fn build_cohort<F: Scalar>(specs: &[ArchSpec], rng: &mut SeedRng) -> Result<CohortModel<F>> {
    if specs.len() < 2 {
        return Err(MfefError::InvalidConfig(format!(
            "a cohort requires at least 2 students for mutual learning, got {}",
            specs.len()
        )));
    }
    let sig = specs[0].first_stage_signature();
    let share = specs.iter().all(|s| s.first_stage_signature() == sig);
    let trunks = if share {
        Trunks::Shared(SharedTrunk::new("trunk", &specs[0], rng))
    } else {
        Trunks::PerStudent(
            specs
                .iter()
                .enumerate()
                .map(|(j, s)| SharedTrunk::new(&format!("student{j}.trunk"), s, rng))
                .collect(),
        )
    };
    let branches = specs
        .iter()
        .enumerate()
        .map(|(j, s)| StudentBranch::new(&format!("student{j}"), s, rng))
        .collect();
    Ok(CohortModel {
        trunks,
        branches,
        specs: specs.to_vec(),
    })
}

impl<F: Scalar> CohortModel<F> {
    pub fn n(&self) -> usize {
        self.branches.len()
    }

    /// Runs every student up to its last feature map. The shared trunk is
    /// evaluated once.
    pub fn forward_features(
        &self,
        images: &Array4<F>,
        mode: Mode,
    ) -> (Vec<Array4<F>>, FeaturesCache<F>) {
        match &self.trunks {
            Trunks::Shared(trunk) => {
                let (t, tc) = trunk.forward(images, mode);
                let mut features = Vec::with_capacity(self.n());
                let mut caches = Vec::with_capacity(self.n());
                for b in &self.branches {
                    let (f, c) = b.forward_stages(&t, mode);
                    features.push(f);
                    caches.push(c);
                }
                (
                    features,
                    FeaturesCache {
                        trunk: TrunksCache::Shared(tc),
                        branches: caches,
                    },
                )
            }
            Trunks::PerStudent(trunks) => {
                let mut features = Vec::with_capacity(self.n());
                let mut tcs = Vec::with_capacity(self.n());
                let mut caches = Vec::with_capacity(self.n());
                for (trunk, b) in trunks.iter().zip(&self.branches) {
                    let (t, tc) = trunk.forward(images, mode);
                    let (f, c) = b.forward_stages(&t, mode);
                    tcs.push(tc);
                    features.push(f);
                    caches.push(c);
                }
                (
                    features,
                    FeaturesCache {
                        trunk: TrunksCache::PerStudent(tcs),
                        branches: caches,
                    },
                )
            }
        }
    }

    /// Backward from per-student feature-map gradients. A shared trunk
    /// accumulates every student's contribution before its own backward.
    pub fn backward_features(
        &self,
        cache: &FeaturesCache<F>,
        g_features: &[Array4<F>],
        grads: &mut GradStore<F>,
    ) {
        assert_eq!(g_features.len(), self.n());
        match (&self.trunks, &cache.trunk) {
            (Trunks::Shared(trunk), TrunksCache::Shared(tc)) => {
                let mut g_trunk: Option<Array4<F>> = None;
                for ((b, bc), gf) in self.branches.iter().zip(&cache.branches).zip(g_features) {
                    let g = b.backward_stages(bc, gf, grads);
                    g_trunk = Some(match g_trunk {
                        Some(acc) => acc + &g,
                        None => g,
                    });
                }
                trunk.backward(tc, &g_trunk.expect("n >= 2"), grads);
            }
            (Trunks::PerStudent(trunks), TrunksCache::PerStudent(tcs)) => {
                for (((trunk, tc), (b, bc)), gf) in trunks
                    .iter()
                    .zip(tcs)
                    .zip(self.branches.iter().zip(&cache.branches))
                    .zip(g_features)
                {
                    let g = b.backward_stages(bc, gf, grads);
                    trunk.backward(tc, &g, grads);
                }
            }
            _ => unreachable!("cache kind always matches trunk kind"),
        }
    }

    pub fn absorb(&mut self, cache: &FeaturesCache<F>) {
        match (&mut self.trunks, &cache.trunk) {
            (Trunks::Shared(trunk), TrunksCache::Shared(tc)) => trunk.absorb(tc),
            (Trunks::PerStudent(trunks), TrunksCache::PerStudent(tcs)) => {
                for (t, c) in trunks.iter_mut().zip(tcs) {
                    t.absorb(c);
                }
            }
            _ => unreachable!(),
        }
        for (b, c) in self.branches.iter_mut().zip(&cache.branches) {
            b.absorb(c);
        }
    }
}

impl<F: Scalar> ParamSet<F> for CohortModel<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        match &self.trunks {
            Trunks::Shared(t) => t.visit(f),
            Trunks::PerStudent(ts) => ts.iter().for_each(|t| t.visit(f)),
        }
        for b in &self.branches {
            b.visit(f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        match &mut self.trunks {
            Trunks::Shared(t) => t.visit_mut(f),
            Trunks::PerStudent(ts) => ts.iter_mut().for_each(|t| t.visit_mut(f)),
        }
        for b in &mut self.branches {
            b.visit_mut(f);
        }
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        match &self.trunks {
            Trunks::Shared(t) => t.visit_state(f),
            Trunks::PerStudent(ts) => ts.iter().for_each(|t| t.visit_state(f)),
        }
        for b in &self.branches {
            b.visit_state(f);
        }
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        match &mut self.trunks {
            Trunks::Shared(t) => t.visit_state_mut(f),
            Trunks::PerStudent(ts) => ts.iter_mut().for_each(|t| t.visit_state_mut(f)),
        }
        for b in &mut self.branches {
            b.visit_state_mut(f);
        }
    }
}

/// One plain student: trunk + branch, used for independent baselines.
#[derive(Debug, Clone)]
pub struct SingleModel<F: Scalar> {
    pub trunk: SharedTrunk<F>,
    pub branch: StudentBranch<F>,
}

impl<F: Scalar> SingleModel<F> {
    pub fn new(spec: &ArchSpec, rng: &mut SeedRng) -> Self {
        Self {
            trunk: SharedTrunk::new("student0.trunk", spec, rng),
            branch: StudentBranch::new("student0", spec, rng),
        }
    }
}

impl<F: Scalar> ParamSet<F> for SingleModel<F> {
    fn visit(&self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewD<'_, F>)) {
        self.trunk.visit(f);
        self.branch.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, ParamKind, ndarray::ArrayViewMutD<'_, F>)) {
        self.trunk.visit_mut(f);
        self.branch.visit_mut(f);
    }

    fn visit_state(&self, f: &mut dyn FnMut(&str, ndarray::ArrayViewD<'_, F>)) {
        self.trunk.visit_state(f);
        self.branch.visit_state(f);
    }

    fn visit_state_mut(&mut self, f: &mut dyn FnMut(&str, ndarray::ArrayViewMutD<'_, F>)) {
        self.trunk.visit_state_mut(f);
        self.branch.visit_state_mut(f);
    }
}

/// Plain inference pass through one student: returns the final-stage feature
/// map and the logits.
pub fn student_forward<F: Scalar>(
    trunk: &SharedTrunk<F>,
    branch: &StudentBranch<F>,
    images: &FeatureMap<F>,
    mode: Mode,
) -> Result<(FeatureMap<F>, Logits<F>)> {
    let (t, _) = trunk.forward(&images.data, mode);
    let (f, _) = branch.forward_stages(&t, mode);
    let (z, _) = branch.head_forward(&f);
    Ok((FeatureMap::new(f)?, Logits::new(z)?))
}
