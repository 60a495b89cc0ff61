//! Bags of instances, the full model (optional voxel encoder, SAT, per-instance
//! head) and the masked binary cross-entropy objective.

use rand_chacha::ChaCha8Rng;

use crate::activation::sigmoid_scalar;
use crate::attention::{Sat, SatConfig, SetLayout};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::module::{named_params, zero_grads, Module, Slot};
use crate::norm::Mode;
use crate::ops::{concat_rows, scatter_rows};
use crate::optim::Adam;
use crate::preprocess::Volume;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_BAG: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Features(Vec<f64>),
    Voxels(Volume),
}

impl Payload {
    pub fn is_voxels(&self) -> bool {
        matches!(self, Payload::Voxels(_))
    }
}

/// One patient: an ordered list of instances with per-instance labels and a
/// supervision mask (`false` = ambiguous, label never read).
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceBag {
    pub id: String,
    pub instances: Vec<Payload>,
    pub labels: Vec<u8>,
    pub mask: Vec<bool>,
}

impl InstanceBag {
    pub fn new(id: impl Into<String>, instances: Vec<Payload>, labels: Vec<u8>, mask: Vec<bool>) -> Result<Self> {
        let n = instances.len();
        if n == 0 {
            return Err(Error::EmptySet);
        }
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape("InstanceBag", &[n], &[labels.len(), mask.len()]));
        }
        if let Some(i) = (0..n).find(|&i| mask[i] && labels[i] > 1) {
            return Err(Error::Contract(format!("label {} of instance {i} is not binary", labels[i])));
        }
        Ok(InstanceBag {
            id: id.into(),
            instances,
            labels,
            mask,
        })
    }

    /// A bag where every instance is supervised.
    pub fn labeled(id: impl Into<String>, instances: Vec<Payload>, labels: Vec<u8>) -> Result<Self> {
        let n = instances.len();
        Self::new(id, instances, labels, vec![true; n])
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn supervised(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// The bag with masked instances physically removed, or `None` if none remain.
    pub fn without_masked(&self) -> Option<InstanceBag> {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.mask[i]).collect();
        (!keep.is_empty()).then(|| self.select(&keep))
    }

    /// Instances reordered so that position `i` holds instance `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<InstanceBag> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::Contract(format!("{perm:?} is not a permutation of 0..{}", self.len())));
        }
        Ok(self.select(perm))
    }

    fn select(&self, idx: &[usize]) -> InstanceBag {
        InstanceBag {
            id: self.id.clone(),
            instances: idx.iter().map(|&i| self.instances[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            mask: idx.iter().map(|&i| self.mask[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BagPrediction {
    pub id: String,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl BagPrediction {
    pub fn from_logits(id: impl Into<String>, logits: Vec<f64>) -> Self {
        BagPrediction {
            id: id.into(),
            probabilities: logits.iter().map(|&z| sigmoid_scalar(z)).collect(),
            logits,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    EndToEnd,
    /// Encoder runs on fixed statistics and passes no gradient back.
    FrozenBackbone,
    /// Encoder batch norms keep fixed statistics and affine parameters.
    FrozenBn,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "end-to-end" => Ok(TrainMode::EndToEnd),
            "frozen-backbone" => Ok(TrainMode::FrozenBackbone),
            "frozen-bn" => Ok(TrainMode::FrozenBn),
            other => Err(Error::config(format!("unknown training mode {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::EndToEnd => "end-to-end",
            TrainMode::FrozenBackbone => "frozen-backbone",
            TrainMode::FrozenBn => "frozen-bn",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub sat: SatConfig,
    pub backbone: Option<BackboneConfig>,
    /// Width of precomputed feature payloads; ignored with a backbone.
    pub input_width: usize,
    pub max_bag: usize,
}

impl ModelConfig {
    pub fn features(input_width: usize, sat: SatConfig) -> Self {
        ModelConfig {
            sat,
            backbone: None,
            input_width,
            max_bag: DEFAULT_MAX_BAG,
        }
    }

    pub fn voxels(backbone: BackboneConfig, sat: SatConfig) -> Self {
        ModelConfig {
            input_width: backbone.feature_width(),
            sat,
            backbone: Some(backbone),
            max_bag: DEFAULT_MAX_BAG,
        }
    }

    /// Width of the per-instance vectors entering the SAT projection.
    pub fn feature_width(&self) -> usize {
        self.backbone.as_ref().map_or(self.input_width, BackboneConfig::feature_width)
    }
}

/// Voxel encoder (optional) → bias-free projection to the SAT width (only
/// when widths differ) → SAT → shared linear head giving one logit per
/// instance.
#[derive(Debug, Clone)]
pub struct NoduleSat {
    pub config: ModelConfig,
    pub backbone: Option<Backbone>,
    pub proj: Option<Linear>,
    pub sat: Sat,
    pub head: Linear,
}

impl NoduleSat {
    pub fn new(rng: &mut ChaCha8Rng, config: ModelConfig) -> Result<Self> {
        if config.max_bag == 0 {
            return Err(Error::config("max bag size must be positive"));
        }
        let backbone = config.backbone.clone().map(|b| Backbone::new(rng, b)).transpose()?;
        let f = config.feature_width();
        if f == 0 {
            return Err(Error::config("input feature width must be positive"));
        }
        let h = config.sat.hidden;
        let proj = (f != h).then(|| Linear::new(rng, f, h, false));
        let sat = Sat::new(rng, config.sat.clone())?;
        let head = Linear::new(rng, h, 1, true);
        Ok(NoduleSat {
            config,
            backbone,
            proj,
            sat,
            head,
        })
    }

    fn check_bags(&self, bags: &[&InstanceBag]) -> Result<bool> {
        if bags.is_empty() {
            return Err(Error::EmptySet);
        }
        let voxels = bags[0].instances.first().ok_or(Error::EmptySet)?.is_voxels();
        for bag in bags {
            if bag.is_empty() {
                return Err(Error::EmptySet);
            }
            if bag.len() > self.config.max_bag {
                return Err(Error::config(format!(
                    "bag {:?} has {} instances, above the limit of {}",
                    bag.id,
                    bag.len(),
                    self.config.max_bag
                )));
            }
            if bag.instances.iter().any(|p| p.is_voxels() != voxels) {
                return Err(Error::Contract(format!("bag {:?} mixes payload kinds", bag.id)));
            }
        }
        if voxels && self.backbone.is_none() {
            return Err(Error::Contract("voxel payloads need a backbone".into()));
        }
        Ok(voxels)
    }

    /// Stacked per-instance features `[M × F]` of all bags, in order.
    fn encode(&mut self, bags: &[&InstanceBag], mode: Mode, train: TrainMode) -> Result<Tensor> {
        if self.check_bags(bags)? {
            let patches: Vec<&Volume> = bags
                .iter()
                .flat_map(|b| &b.instances)
                .map(|p| match p {
                    Payload::Voxels(v) => v,
                    Payload::Features(_) => unreachable!("checked"),
                })
                .collect();
            let backbone = self.backbone.as_mut().expect("checked");
            return match (mode, train) {
                (Mode::Train, TrainMode::FrozenBackbone) => Ok(backbone.encode(&patches, Mode::Eval, false)?.detach()),
                (_, TrainMode::FrozenBn) => backbone.encode(&patches, mode, true),
                _ => backbone.encode(&patches, mode, false),
            };
        }
        let f = self.config.input_width;
        let mut data = Vec::new();
        for bag in bags {
            for p in &bag.instances {
                let Payload::Features(v) = p else { unreachable!("checked") };
                if v.len() != f {
                    return Err(Error::shape("feature payload", &[f], &[v.len()]));
                }
                data.extend_from_slice(v);
            }
        }
        let m = data.len() / f;
        Tensor::new(data, &[m, f])
    }

    /// Logits `[rows × 1]` over the padded layout of `bags`.
    pub fn forward(&mut self, bags: &[&InstanceBag], mode: Mode, train: TrainMode) -> Result<(Tensor, SetLayout)> {
        let features = self.encode(bags, mode, train)?;
        let lengths: Vec<usize> = bags.iter().map(|b| b.len()).collect();
        let (x, layout) = pad_rows(&features, &lengths)?;
        let x = match &self.proj {
            Some(p) => p.forward(&x)?,
            None => x,
        };
        let h = self.sat.forward(&x, &layout, mode)?;
        Ok((self.head.forward(&h)?, layout))
    }

    /// Evaluation-mode predictions for a batch of bags.
    pub fn predict_batch(&mut self, bags: &[&InstanceBag]) -> Result<Vec<BagPrediction>> {
        let (logits, layout) = self.forward(bags, Mode::Eval, TrainMode::EndToEnd)?;
        let z = logits.data();
        Ok(bags
            .iter()
            .enumerate()
            .map(|(b, bag)| {
                BagPrediction::from_logits(bag.id.clone(), (0..bag.len()).map(|i| z[layout.row(b, i)]).collect())
            })
            .collect())
    }

    pub fn predict(&mut self, bag: &InstanceBag) -> Result<BagPrediction> {
        Ok(self.predict_batch(&[bag])?.remove(0))
    }
}

impl Module for NoduleSat {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        let p = |name: &str| crate::module::join(prefix, name);
        if let Some(b) = self.backbone.as_mut() {
            b.visit_mut(&p("backbone"), f);
        }
        if let Some(l) = self.proj.as_mut() {
            l.visit_mut(&p("proj"), f);
        }
        self.sat.visit_mut(&p("sat"), f);
        self.head.visit_mut(&p("head"), f);
    }
}

/// Evaluation-mode forward pass over one bag.
pub fn nodulesat_forward(bag: &InstanceBag, model: &mut NoduleSat) -> Result<BagPrediction> {
    model.predict(bag)
}

/// Scatters consecutive row blocks of `rows` (one block per bag) into a
/// matrix padded to the largest bag. Padded rows are zero and get no gradient.
pub fn pad_rows(rows: &Tensor, lengths: &[usize]) -> Result<(Tensor, SetLayout)> {
    let layout = SetLayout::padded(lengths)?;
    let (m, _) = rows.dims2()?;
    if m != lengths.iter().sum::<usize>() {
        return Err(Error::shape("pad_rows", rows.shape(), lengths));
    }
    if !layout.is_padded() {
        return Ok((rows.clone(), layout));
    }
    let dest: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(b, &n)| (0..n).map(move |i| (b, i)))
        .map(|(b, i)| layout.row(b, i))
        .collect();
    Ok((scatter_rows(rows, &dest, layout.rows())?, layout))
}

/// Pads per-bag feature matrices to a common size; returns the padded matrix,
/// its layout and the row validity mask.
pub fn batch_sets(sets: &[Tensor]) -> Result<(Tensor, SetLayout, Vec<bool>)> {
    let lengths = sets.iter().map(|s| s.dims2().map(|d| d.0)).collect::<Result<Vec<_>>>()?;
    let (x, layout) = pad_rows(&concat_rows(sets)?, &lengths)?;
    let valid = layout.valid();
    Ok((x, layout, valid))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy over supervised entries, in logit form. With no
/// supervised entries the loss is exactly zero with zero gradient.
pub fn masked_bce(logits: &Tensor, labels: &[u8], mask: &[bool]) -> Result<Tensor> {
    let n = logits.numel();
    if labels.len() != n || mask.len() != n {
        return Err(Error::shape("masked_bce", &[n], &[labels.len(), mask.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    let z = logits.data();
    let mut loss = 0.0;
    let mut grad = vec![0.0; n];
    if count > 0 {
        let w = 1.0 / count as f64;
        for i in (0..n).filter(|&i| mask[i]) {
            let y = match labels[i] {
                0 => 0.0,
                1 => 1.0,
                other => return Err(Error::Contract(format!("label {other} at {i} is not binary"))),
            };
            loss += y * softplus(-z[i]) + (1.0 - y) * softplus(z[i]);
            grad[i] = (sigmoid_scalar(z[i]) - y) * w;
        }
        loss *= w;
    }
    Ok(Tensor::from_op(
        vec![loss],
        Vec::new(),
        vec![logits.clone()],
        Box::new(move |g| vec![Some(grad.iter().map(|v| v * g[0]).collect())]),
    ))
}

/// Labels and supervision mask laid out on the padded rows of `layout`.
pub fn padded_targets(bags: &[&InstanceBag], layout: &SetLayout) -> (Vec<u8>, Vec<bool>) {
    let mut labels = vec![0u8; layout.rows()];
    let mut mask = vec![false; layout.rows()];
    for (b, bag) in bags.iter().enumerate() {
        for i in 0..bag.len() {
            let r = layout.row(b, i);
            mask[r] = bag.mask[i];
            if bag.mask[i] {
                labels[r] = bag.labels[i];
            }
        }
    }
    (labels, mask)
}

/// Training-mode loss of a batch (mean over its supervised instances).
pub fn batch_loss(model: &mut NoduleSat, bags: &[&InstanceBag], train: TrainMode) -> Result<Tensor> {
    let (logits, layout) = model.forward(bags, Mode::Train, train)?;
    let (labels, mask) = padded_targets(bags, &layout);
    masked_bce(&logits, &labels, &mask)
}

/// One optimizer step on a batch of bags; returns the batch loss. A batch with
/// no supervised instance changes nothing and reports loss 0.
pub fn train_bag_batch(
    bags: &[&InstanceBag],
    model: &mut NoduleSat,
    adam: &mut Adam,
    lr: f64,
    train: TrainMode,
) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::EmptySet);
    }
    if bags.iter().any(|b| b.is_empty()) {
        return Err(Error::EmptySet);
    }
    if bags.iter().all(|b| b.supervised() == 0) {
        return Ok(0.0);
    }
    zero_grads(model);
    let loss = batch_loss(model, bags, train)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::NumericDomain(format!("non-finite loss {value}")));
    }
    loss.backward()?;
    adam.step(named_params(model, ""), lr)?;
    Ok(value)
}

/// Largest change of any supervised instance's logit when the payload of
/// instance `probe` is shifted by `delta` in every coordinate (features) or
/// voxel (patches).
pub fn context_sensitivity(model: &mut NoduleSat, bag: &InstanceBag, probe: usize, delta: f64) -> Result<f64> {
    if probe >= bag.len() {
        return Err(Error::Contract(format!("probe {probe} outside bag of {}", bag.len())));
    }
    let base = model.predict(bag)?;
    let mut moved = bag.clone();
    moved.instances[probe] = match &bag.instances[probe] {
        Payload::Features(v) => Payload::Features(v.iter().map(|x| x + delta).collect()),
        Payload::Voxels(v) => Payload::Voxels(Volume::new(
            v.dims(),
            v.spacing(),
            v.voxels().iter().map(|x| x + delta).collect(),
        )?),
    };
    let after = model.predict(&moved)?;
    Ok((0..bag.len())
        .filter(|&i| i != probe && bag.mask[i])
        .map(|i| (after.logits[i] - base.logits[i]).abs())
        .fold(0.0, f64::max))
}
