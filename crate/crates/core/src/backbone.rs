//! 3D DenseNet-style voxel encoder ending in global average pooling.

use rand_chacha::ChaCha8Rng;

use crate::activation::leaky_relu;
use crate::conv::{avg_pool3d, conv3d, global_avg_pool};
use crate::error::{Error, Result};
use crate::module::{join, Module, Slot};
use crate::norm::{BatchNorm, Mode};
use crate::preprocess::Volume;
use crate::rng::normal_param;
use crate::tensor::Tensor;
use crate::ops::concat_axis1;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Channels added by each dense layer (k).
    pub growth: usize,
    /// Dense layers per resolution stage.
    pub repeats: Vec<usize>,
    /// Transition channel divisor (θ ≥ 1).
    pub compression: f64,
    /// Width multiplier of the 1³ bottleneck convolution (B).
    pub bottleneck: usize,
    /// Leaky ReLU negative slope.
    pub alpha: f64,
    pub stem: usize,
    /// Voxels per side of the input patch.
    pub edge: usize,
}

impl BackboneConfig {
    /// Stem of `2k` channels, θ = 2, B = 4, α = 0.1.
    pub fn dense_bc(growth: usize, repeats: Vec<usize>, edge: usize) -> Self {
        BackboneConfig {
            growth,
            repeats,
            compression: 2.0,
            bottleneck: 4,
            alpha: 0.1,
            stem: 2 * growth,
            edge,
        }
    }

    /// False-positive reduction encoder: k = 16, [4, 4, 4, 4], 48³.
    pub fn fpr() -> Self {
        Self::dense_bc(16, vec![4, 4, 4, 4], 48)
    }

    /// Malignancy encoder: k = 32, [3, 8, 4], 32³.
    pub fn malignancy() -> Self {
        Self::dense_bc(32, vec![3, 8, 4], 32)
    }

    /// Desk-scale encoder used by tests: k = 2, [1, 1], 8³.
    pub fn tiny() -> Self {
        Self::dense_bc(2, vec![1, 1], 8)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fpr" => Ok(Self::fpr()),
            "malignancy" => Ok(Self::malignancy()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::config(format!("unknown backbone preset {other:?}"))),
        }
    }

    pub fn transitions(&self) -> usize {
        self.repeats.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.growth == 0 || self.bottleneck == 0 || self.stem == 0 {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.repeats.is_empty() || self.repeats.contains(&0) {
            return Err(Error::config(format!("invalid block repeats {:?}", self.repeats)));
        }
        if !(self.compression.is_finite() && self.compression >= 1.0) {
            return Err(Error::config(format!("compression must be ≥ 1, got {}", self.compression)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::config("leaky ReLU slope must be finite"));
        }
        let stride = 1usize << self.transitions();
        if self.edge == 0 || !self.edge.is_multiple_of(stride) {
            return Err(Error::config(format!(
                "input edge {} not divisible by 2^{}",
                self.edge,
                self.transitions()
            )));
        }
        Ok(())
    }

    pub fn compress(&self, c: usize) -> usize {
        (c as f64 / self.compression).floor() as usize
    }

    /// Channel count after the stem, after each dense block and after each
    /// transition, in order.
    pub fn channel_plan(&self) -> Vec<usize> {
        let mut plan = vec![self.stem];
        let mut c = self.stem;
        for (i, &r) in self.repeats.iter().enumerate() {
            c += r * self.growth;
            plan.push(c);
            if i + 1 < self.repeats.len() {
                c = self.compress(c);
                plan.push(c);
            }
        }
        plan
    }

    pub fn feature_width(&self) -> usize {
        *self.channel_plan().last().expect("plan starts with the stem")
    }
}

fn he_conv(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize) -> Tensor {
    let fan_in = inp * k * k * k;
    normal_param(rng, &[out, inp, k, k, k], (2.0 / fan_in as f64).sqrt())
}

/// Batch norm that either trains normally or runs with fixed statistics and
/// affine parameters.
fn norm(bn: &mut BatchNorm, x: &Tensor, mode: Mode, freeze: bool) -> Result<Tensor> {
    if freeze {
        bn.frozen().forward(x, Mode::Eval)
    } else {
        bn.forward(x, mode)
    }
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub bn1: BatchNorm,
    pub conv1: Tensor,
    pub bn2: BatchNorm,
    pub conv2: Tensor,
    alpha: f64,
}

impl DenseLayer {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, growth: usize, bottleneck: usize, alpha: f64) -> Self {
        let mid = bottleneck * growth;
        DenseLayer {
            bn1: BatchNorm::new(channels),
            conv1: he_conv(rng, mid, channels, 1),
            bn2: BatchNorm::new(mid),
            conv2: he_conv(rng, growth, mid, 3),
            alpha,
        }
    }

    pub fn bottleneck_width(&self) -> usize {
        self.conv1.shape()[0]
    }

    /// `[n, c, d, d, d] → [n, c + k, d, d, d]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, freeze_bn: bool) -> Result<Tensor> {
        let h = leaky_relu(&norm(&mut self.bn1, x, mode, freeze_bn)?, self.alpha);
        let h = conv3d(&h, &self.conv1, 1, 0)?;
        let h = leaky_relu(&norm(&mut self.bn2, &h, mode, freeze_bn)?, self.alpha);
        let h = conv3d(&h, &self.conv2, 1, 1)?;
        concat_axis1(&[x.clone(), h])
    }
}

impl Module for DenseLayer {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        f(join(prefix, "bn1"), Slot::Norm(&mut self.bn1));
        f(join(prefix, "conv1.W"), Slot::Param(&mut self.conv1));
        f(join(prefix, "bn2"), Slot::Norm(&mut self.bn2));
        f(join(prefix, "conv2.W"), Slot::Param(&mut self.conv2));
    }
}

#[derive(Debug, Clone)]
pub struct Transition {
    pub bn: BatchNorm,
    pub conv: Tensor,
    alpha: f64,
}

impl Transition {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, out: usize, alpha: f64) -> Result<Self> {
        if out == 0 {
            return Err(Error::config(format!("transition compresses {channels} channels to zero")));
        }
        Ok(Transition {
            bn: BatchNorm::new(channels),
            conv: he_conv(rng, out, channels, 1),
            alpha,
        })
    }

    /// `[n, c, d, d, d] → [n, ⌊c/θ⌋, d/2, d/2, d/2]`; odd `d` is a
    /// configuration error.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, freeze_bn: bool) -> Result<Tensor> {
        let h = leaky_relu(&norm(&mut self.bn, x, mode, freeze_bn)?, self.alpha);
        let h = conv3d(&h, &self.conv, 1, 0)?;
        avg_pool3d(&h, 2)
    }
}

impl Module for Transition {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        f(join(prefix, "bn"), Slot::Norm(&mut self.bn));
        f(join(prefix, "conv.W"), Slot::Param(&mut self.conv));
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stem: Tensor,
    pub blocks: Vec<Vec<DenseLayer>>,
    pub transitions: Vec<Transition>,
    pub final_bn: BatchNorm,
}

impl Backbone {
    pub fn new(rng: &mut ChaCha8Rng, config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let stem = he_conv(rng, config.stem, 1, 3);
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut c = config.stem;
        for (i, &r) in config.repeats.iter().enumerate() {
            let mut block = Vec::with_capacity(r);
            for _ in 0..r {
                block.push(DenseLayer::new(rng, c, config.growth, config.bottleneck, config.alpha));
                c += config.growth;
            }
            blocks.push(block);
            if i + 1 < config.repeats.len() {
                let out = config.compress(c);
                transitions.push(Transition::new(rng, c, out, config.alpha)?);
                c = out;
            }
        }
        Ok(Backbone {
            stem,
            blocks,
            transitions,
            final_bn: BatchNorm::new(c),
            config,
        })
    }

    pub fn feature_width(&self) -> usize {
        self.final_bn.channels()
    }

    /// `[n, 1, d, d, d] → [n, F]`.
    pub fn forward(&mut self, x: &Tensor, mode: Mode, freeze_bn: bool) -> Result<Tensor> {
        let e = self.config.edge;
        match x.shape() {
            [_, 1, a, b, c] if [*a, *b, *c] == [e, e, e] => {}
            other => {
                return Err(Error::config(format!(
                    "backbone expects [n, 1, {e}, {e}, {e}] patches, got {other:?}"
                )))
            }
        }
        let mut h = conv3d(x, &self.stem, 1, 1)?;
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for layer in block {
                h = layer.forward(&h, mode, freeze_bn)?;
            }
            if let Some(t) = self.transitions.get_mut(i) {
                h = t.forward(&h, mode, freeze_bn)?;
            }
        }
        let h = leaky_relu(&norm(&mut self.final_bn, &h, mode, freeze_bn)?, self.config.alpha);
        global_avg_pool(&h)
    }

    /// Encodes a list of patches as one batch.
    pub fn encode(&mut self, patches: &[&Volume], mode: Mode, freeze_bn: bool) -> Result<Tensor> {
        self.forward(&stack_patches(patches)?, mode, freeze_bn)
    }
}

impl Module for Backbone {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        f(join(prefix, "stem.W"), Slot::Param(&mut self.stem));
        let mut transitions = self.transitions.iter_mut();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (j, layer) in block.iter_mut().enumerate() {
                layer.visit_mut(&join(prefix, &format!("block{i}.layer{j}")), f);
            }
            if let Some(t) = transitions.next() {
                t.visit_mut(&join(prefix, &format!("trans{i}")), f);
            }
        }
        f(join(prefix, "final_bn"), Slot::Norm(&mut self.final_bn));
    }
}

/// Stacks equally sized patches into `[n, 1, z, y, x]`.
pub fn stack_patches(patches: &[&Volume]) -> Result<Tensor> {
    let first = patches.first().ok_or(Error::EmptySet)?;
    let [nx, ny, nz] = first.dims();
    let mut data = Vec::with_capacity(patches.len() * first.voxels().len());
    for p in patches {
        if p.dims() != first.dims() {
            return Err(Error::config(format!(
                "patches of different sizes in one batch: {:?} vs {:?}",
                first.dims(),
                p.dims()
            )));
        }
        data.extend_from_slice(p.voxels());
    }
    Tensor::new(data, &[patches.len(), 1, nz, ny, nx])
}

/// Encodes one patch to its feature vector.
pub fn backbone_forward(v: &Volume, backbone: &mut Backbone, mode: Mode) -> Result<Vec<f64>> {
    Ok(backbone.encode(&[v], mode, false)?.data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::module::{named_params, param_count};
    use crate::ops::{mul, sum};
    use rand::{Rng, SeedableRng};

    /// Closed-form recurrence `c ← ⌊(c + r·k)/θ⌋` between stages.
    fn recurrence(stem: usize, k: usize, repeats: &[usize], theta: usize) -> usize {
        let last = repeats.len() - 1;
        repeats.iter().enumerate().fold(stem, |c, (i, r)| {
            let grown = c + r * k;
            if i < last {
                grown / theta
            } else {
                grown
            }
        })
    }

    fn random_patch(rng: &mut ChaCha8Rng, edge: usize) -> Volume {
        Volume::new([edge; 3], [1.0; 3], (0..edge.pow(3)).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn paper_channel_plans() {
        assert_eq!(BackboneConfig::fpr().channel_plan(), vec![32, 96, 48, 112, 56, 120, 60, 124]);
        assert_eq!(BackboneConfig::malignancy().channel_plan(), vec![64, 160, 80, 336, 168, 296]);
        assert_eq!(BackboneConfig::fpr().feature_width(), recurrence(32, 16, &[4, 4, 4, 4], 2));
        assert_eq!(BackboneConfig::malignancy().feature_width(), recurrence(64, 32, &[3, 8, 4], 2));
        assert_eq!(BackboneConfig::tiny().feature_width(), 5);
    }

    #[test]
    fn instantiated_widths_follow_the_plan() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new(&mut rng, BackboneConfig::fpr()).unwrap();
        assert_eq!(b.feature_width(), 124);
        assert_eq!(b.blocks[0][0].bottleneck_width(), 64);
        assert_eq!(b.transitions[0].conv.shape()[0], 48);
    }

    #[test]
    fn dense_layer_and_transition_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = normal_param(&mut rng, &[1, 32, 4, 4, 4], 1.0).detach();
        let mut layer = DenseLayer::new(&mut rng, 32, 16, 4, 0.1);
        assert_eq!(layer.forward(&x, Mode::Train, false).unwrap().shape(), &[1, 48, 4, 4, 4]);

        let x = normal_param(&mut rng, &[1, 96, 4, 4, 4], 1.0).detach();
        let mut t = Transition::new(&mut rng, 96, 48, 0.1).unwrap();
        assert_eq!(t.forward(&x, Mode::Train, false).unwrap().shape(), &[1, 48, 2, 2, 2]);

        let odd = normal_param(&mut rng, &[1, 96, 3, 3, 3], 1.0).detach();
        assert!(matches!(t.forward(&odd, Mode::Train, false), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_invalid_configs_and_patches() {
        let mut cfg = BackboneConfig::tiny();
        cfg.edge = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = BackboneConfig::tiny();
        cfg.compression = 0.5;
        assert!(cfg.validate().is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut b = Backbone::new(&mut rng, BackboneConfig::tiny()).unwrap();
        let wrong = random_patch(&mut rng, 6);
        assert!(matches!(backbone_forward(&wrong, &mut b, Mode::Train), Err(Error::Config(_))));
    }

    #[test]
    fn output_width_is_fixed_by_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut b = Backbone::new(&mut rng, BackboneConfig::tiny()).unwrap();
        let patches: Vec<Volume> = (0..3).map(|_| random_patch(&mut rng, 8)).collect();
        let refs: Vec<&Volume> = patches.iter().collect();
        let out = b.encode(&refs, Mode::Train, false).unwrap();
        assert_eq!(out.shape(), &[3, 5]);
        assert_eq!(backbone_forward(&patches[0], &mut b, Mode::Eval).unwrap().len(), 5);
    }

    #[test]
    fn parameter_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut b = Backbone::new(&mut rng, BackboneConfig::tiny()).unwrap();
        let names: Vec<String> = named_params(&mut b, "backbone").into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "backbone.stem.W");
        for expected in [
            "backbone.block0.layer0.conv1.W",
            "backbone.block0.layer0.bn2.gamma",
            "backbone.trans0.conv.W",
            "backbone.block1.layer0.conv2.W",
            "backbone.final_bn.beta",
        ] {
            assert!(names.iter().any(|n| n == expected), "missing {expected}");
        }
        assert!(!names.iter().any(|n| n.starts_with("backbone.trans1")));
        assert!(param_count(&mut b) > 0);
    }

    #[test]
    fn tiny_backbone_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base = Backbone::new(&mut rng, BackboneConfig::tiny()).unwrap();
        let x = normal_param(&mut rng, &[2, 1, 8, 8, 8], 0.5).detach();
        let w = normal_param(&mut rng, &[2, 5], 1.0).detach();
        let mut probe = base.clone();
        let params: Vec<Tensor> = named_params(&mut probe, "").into_iter().map(|(_, t)| t.clone()).collect();
        let mut inputs = vec![x];
        inputs.extend(params);
        let report = grad_check_many(
            |t| {
                let mut b = base.clone();
                for ((_, slot), v) in named_params(&mut b, "").into_iter().zip(&t[1..]) {
                    *slot = v.clone();
                }
                Ok(sum(&mul(&b.forward(&t[0], Mode::Train, false)?, &w)?))
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
