//! Epoch loop, batched inference and the synthetic relational experiments.

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::attention::SatConfig;
use crate::error::{Error, Result};
use crate::eval::auc;
use crate::mil::{train_bag_batch, BagPrediction, InstanceBag, ModelConfig, NoduleSat, Payload, TrainMode};
use crate::module::{load_state_dict, state_dict, NamedArray};
use crate::optim::{Adam, AdamState, LrSchedule};
use crate::preprocess::{augment, AugmentSpec};
use crate::rng::{item_stream, substream};
use crate::synth::{generate_bags, SynthSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_bags: usize,
    pub schedule: LrSchedule,
    pub mode: TrainMode,
    pub seed: u64,
    /// Random rotation/flip/shift of voxel payloads, redrawn every epoch.
    pub augment: bool,
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.batch_bags == 0 {
            return Err(Error::config("batch size must be at least one bag"));
        }
        self.schedule.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean loss over the epoch's supervised instances.
    pub loss: f64,
}

impl EpochLog {
    /// `epoch,lr,loss`
    pub fn line(&self) -> String {
        format!("{},{:e},{}", self.epoch, self.lr, self.loss)
    }
}

/// A model with its optimizer state and position in the schedule.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: NoduleSat,
    pub adam: Adam,
    /// Epochs completed so far.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub steps: usize,
}

impl Trainer {
    pub fn new(model: NoduleSat) -> Self {
        Trainer {
            model,
            adam: Adam::new(),
            epoch: 0,
            steps: 0,
        }
    }

    fn augmented(bags: &[&InstanceBag], seed: u64, epoch: usize) -> Result<Vec<InstanceBag>> {
        let mut rng = item_stream(seed, "augment", epoch as u64);
        bags.iter()
            .map(|b| {
                let mut out = (*b).clone();
                for p in out.instances.iter_mut() {
                    if let Payload::Voxels(v) = p {
                        *v = augment(v, &AugmentSpec::sample(&mut rng))?;
                    }
                }
                Ok(out)
            })
            .collect()
    }

    /// One pass over `bags` in a seed-determined order.
    pub fn run_epoch(&mut self, bags: &[InstanceBag], opts: &TrainOptions) -> Result<EpochLog> {
        opts.validate()?;
        if bags.is_empty() {
            return Err(Error::EmptySet);
        }
        let epoch = self.epoch;
        let lr = opts.schedule.lr(epoch);
        let mut order: Vec<&InstanceBag> = bags.iter().collect();
        order.shuffle(&mut item_stream(opts.seed, "shuffle", epoch as u64));
        let augmented;
        let order: Vec<&InstanceBag> = if opts.augment {
            augmented = Self::augmented(&order, opts.seed, epoch)?;
            augmented.iter().collect()
        } else {
            order
        };
        let (mut total, mut weight) = (0.0, 0usize);
        for batch in order.chunks(opts.batch_bags) {
            let loss = train_bag_batch(batch, &mut self.model, &mut self.adam, lr, opts.mode).map_err(|e| match e {
                Error::NumericDomain(msg) => Error::NumericDomain(format!("step {}: {msg}", self.steps)),
                other => other,
            })?;
            self.steps += 1;
            let n: usize = batch.iter().map(|b| b.supervised()).sum();
            total += loss * n as f64;
            weight += n;
        }
        self.epoch += 1;
        Ok(EpochLog {
            epoch,
            lr,
            loss: if weight == 0 { 0.0 } else { total / weight as f64 },
        })
    }

    /// Model tensors plus optimizer moments (`adam.m.*`, `adam.v.*`,
    /// `adam.step.*`) and the `train.epoch` / `train.steps` counters.
    pub fn checkpoint(&mut self) -> Vec<NamedArray> {
        let mut out = state_dict(&mut self.model, "");
        for (name, st) in &self.adam.states {
            let n = st.m.len();
            out.push(NamedArray {
                name: format!("adam.m.{name}"),
                shape: vec![n],
                data: st.m.clone(),
            });
            out.push(NamedArray {
                name: format!("adam.v.{name}"),
                shape: vec![n],
                data: st.v.clone(),
            });
            out.push(NamedArray {
                name: format!("adam.step.{name}"),
                shape: vec![1],
                data: vec![st.step as f64],
            });
        }
        for (name, v) in [("train.epoch", self.epoch), ("train.steps", self.steps)] {
            out.push(NamedArray {
                name: name.into(),
                shape: vec![1],
                data: vec![v as f64],
            });
        }
        out
    }

    /// Restores a `checkpoint` into a model of matching architecture. A file
    /// holding only model tensors starts a fresh optimizer at epoch 0.
    pub fn restore(mut model: NoduleSat, entries: &[NamedArray]) -> Result<Self> {
        load_state_dict(&mut model, "", entries)?;
        let mut adam = Adam::new();
        let (mut epoch, mut steps) = (0, 0);
        let counter = |e: &NamedArray| -> Result<u64> {
            match e.data.as_slice() {
                [v] if *v >= 0.0 && v.fract() == 0.0 => Ok(*v as u64),
                _ => Err(Error::State(format!("malformed counter {}", e.name))),
            }
        };
        for e in entries {
            if let Some(name) = e.name.strip_prefix("adam.m.") {
                adam.states.entry(name.to_string()).or_insert_with(|| AdamState::new(0)).m = e.data.clone();
            } else if let Some(name) = e.name.strip_prefix("adam.v.") {
                adam.states.entry(name.to_string()).or_insert_with(|| AdamState::new(0)).v = e.data.clone();
            } else if let Some(name) = e.name.strip_prefix("adam.step.") {
                adam.states.entry(name.to_string()).or_insert_with(|| AdamState::new(0)).step = counter(e)?;
            } else if e.name == "train.epoch" {
                epoch = counter(e)? as usize;
            } else if e.name == "train.steps" {
                steps = counter(e)? as usize;
            }
        }
        let sizes: std::collections::HashMap<String, usize> = crate::module::named_params(&mut model, "")
            .into_iter()
            .map(|(n, t)| (n, t.numel()))
            .collect();
        for (name, st) in &adam.states {
            let expect = sizes
                .get(name)
                .ok_or_else(|| Error::State(format!("optimizer state for unknown parameter {name}")))?;
            if st.m.len() != *expect || st.v.len() != *expect {
                return Err(Error::State(format!("optimizer state for {name} has the wrong length")));
            }
        }
        Ok(Trainer {
            model,
            adam,
            epoch,
            steps,
        })
    }

    /// Trains until `opts.epochs` epochs have been completed in total,
    /// continuing from the current epoch counter.
    pub fn fit(
        &mut self,
        bags: &[InstanceBag],
        opts: &TrainOptions,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        let mut logs = Vec::new();
        while self.epoch < opts.epochs {
            let log = self.run_epoch(bags, opts)?;
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Evaluation-mode predictions, `batch` bags at a time.
pub fn predict_all(model: &mut NoduleSat, bags: &[InstanceBag], batch: usize) -> Result<Vec<BagPrediction>> {
    let refs: Vec<&InstanceBag> = bags.iter().collect();
    let mut out = Vec::with_capacity(bags.len());
    for chunk in refs.chunks(batch.max(1)) {
        out.extend(model.predict_batch(chunk)?);
    }
    Ok(out)
}

/// Instance-level AUC over the supervised instances of `bags`.
pub fn instance_auc(preds: &[BagPrediction], bags: &[InstanceBag]) -> Result<f64> {
    if preds.len() != bags.len() {
        return Err(Error::shape("instance_auc", &[bags.len()], &[preds.len()]));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (p, b) in preds.iter().zip(bags) {
        for i in (0..b.len()).filter(|&i| b.mask[i]) {
            scores.push(p.probabilities[i]);
            labels.push(b.labels[i] == 1);
        }
    }
    auc(&scores, &labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub test_auc: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub seconds: f64,
}

/// Trains a fresh model on `train` and scores it on `test`.
pub fn fit_and_score(
    config: ModelConfig,
    train: &[InstanceBag],
    test: &[InstanceBag],
    opts: &TrainOptions,
) -> Result<RunSummary> {
    let start = Instant::now();
    let model = NoduleSat::new(&mut substream(opts.seed, "init"), config)?;
    let mut trainer = Trainer::new(model);
    let logs = trainer.fit(train, opts, |_| {})?;
    let preds = predict_all(&mut trainer.model, test, 64)?;
    Ok(RunSummary {
        test_auc: instance_auc(&preds, test)?,
        final_loss: logs.last().map_or(f64::NAN, |l| l.loss),
        epochs: logs.len(),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Train/test bag sets drawn with a shared codebook and disjoint streams.
pub fn relational_split(spec: &SynthSpec, train_bags: usize, test_bags: usize) -> Result<(Vec<InstanceBag>, Vec<InstanceBag>)> {
    let train = SynthSpec {
        bags: train_bags,
        ..spec.clone()
    };
    let test = SynthSpec {
        bags: test_bags,
        seed: spec.seed ^ 0x7e57_7e57,
        ..spec.clone()
    };
    let unwrap = |v: Vec<crate::synth::SynthBag>| v.into_iter().map(|b| b.bag).collect();
    Ok((unwrap(generate_bags(&train)?), unwrap(generate_bags(&test)?)))
}

/// Relational model versus its `L = 0` (per-instance) ablation on the same data.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalGain {
    pub solitary: RunSummary,
    pub relational: RunSummary,
}

pub fn relational_gain(
    spec: &SynthSpec,
    train_bags: usize,
    test_bags: usize,
    sat: SatConfig,
    opts: &TrainOptions,
) -> Result<RelationalGain> {
    let (train, test) = relational_split(spec, train_bags, test_bags)?;
    let solitary = SatConfig {
        layers: 0,
        ..sat.clone()
    };
    Ok(RelationalGain {
        solitary: fit_and_score(ModelConfig::features(spec.width, solitary), &train, &test, opts)?,
        relational: fit_and_score(ModelConfig::features(spec.width, sat), &train, &test, opts)?,
    })
}

/// Masked instances kept as attention context versus physically removed.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedContext {
    pub with_context: RunSummary,
    pub removed: RunSummary,
}

/// Both variants are scored on the same supervised test instances; the
/// removed variant sees test bags without their masked instances too.
pub fn masked_context(
    spec: &SynthSpec,
    train_bags: usize,
    test_bags: usize,
    sat: SatConfig,
    opts: &TrainOptions,
) -> Result<MaskedContext> {
    let (train, test) = relational_split(spec, train_bags, test_bags)?;
    let strip = |bags: &[InstanceBag]| bags.iter().filter_map(InstanceBag::without_masked).collect::<Vec<_>>();
    let config = ModelConfig::features(spec.width, sat);
    Ok(MaskedContext {
        with_context: fit_and_score(config.clone(), &train, &test, opts)?,
        removed: fit_and_score(config, &strip(&train), &strip(&test), opts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::Activation;

    fn tiny_opts(epochs: usize) -> TrainOptions {
        TrainOptions {
            epochs,
            batch_bags: 8,
            schedule: LrSchedule::constant(3e-3),
            mode: TrainMode::EndToEnd,
            seed: 1,
            augment: false,
        }
    }

    fn tiny_sat() -> SatConfig {
        SatConfig {
            layers: 1,
            hidden: 8,
            groups: 2,
            sigma: Activation::Elu,
        }
    }

    fn tiny_data() -> SynthSpec {
        SynthSpec {
            n_min: 2,
            n_max: 6,
            keys: 4,
            width: 8,
            mask_fraction: 0.2,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn resumed_training_matches_uninterrupted_training() {
        let (train, _) = relational_split(&tiny_data(), 24, 1).unwrap();
        let model = NoduleSat::new(&mut substream(0, "init"), ModelConfig::features(8, tiny_sat())).unwrap();
        let mut straight = Trainer::new(model.clone());
        let full = straight.fit(&train, &tiny_opts(4), |_| {}).unwrap();

        let mut first = Trainer::new(model);
        first.fit(&train, &tiny_opts(2), |_| {}).unwrap();
        let mut resumed = first.clone();
        let rest = resumed.fit(&train, &tiny_opts(4), |_| {}).unwrap();
        assert_eq!(rest.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![2, 3]);
        assert_eq!(rest[1], full[3]);
    }

    #[test]
    fn checkpoint_resume_matches_uninterrupted_training() {
        let (train, _) = relational_split(&tiny_data(), 24, 1).unwrap();
        let config = ModelConfig::features(8, tiny_sat());
        let model = NoduleSat::new(&mut substream(0, "init"), config.clone()).unwrap();
        let mut straight = Trainer::new(model.clone());
        let full = straight.fit(&train, &tiny_opts(3), |_| {}).unwrap();

        let mut first = Trainer::new(model);
        first.fit(&train, &tiny_opts(1), |_| {}).unwrap();
        let bytes = crate::io::encode_checkpoint(&first.checkpoint());
        let entries = crate::io::decode_checkpoint(&bytes).unwrap();
        let fresh = NoduleSat::new(&mut substream(99, "init"), config).unwrap();
        let mut resumed = Trainer::restore(fresh, &entries).unwrap();
        assert_eq!((resumed.epoch, resumed.steps), (first.epoch, first.steps));
        let rest = resumed.fit(&train, &tiny_opts(3), |_| {}).unwrap();
        assert_eq!(rest.last(), full.last());
        assert_eq!(resumed.checkpoint(), straight.checkpoint());
    }

    #[test]
    fn restore_rejects_mismatched_architecture() {
        let mut a = Trainer::new(NoduleSat::new(&mut substream(0, "init"), ModelConfig::features(8, tiny_sat())).unwrap());
        let other = NoduleSat::new(&mut substream(0, "init"), ModelConfig::features(6, tiny_sat())).unwrap();
        assert!(Trainer::restore(other, &a.checkpoint()).is_err());
    }

    #[test]
    fn epoch_log_line_has_three_fields() {
        let line = EpochLog {
            epoch: 3,
            lr: 1e-3,
            loss: 0.5,
        }
        .line();
        assert_eq!(line.split(',').count(), 3);
        assert!(line.starts_with("3,"));
    }

    #[test]
    fn augmentation_is_deterministic() {
        let spec = SynthSpec {
            payload: crate::synth::PayloadMode::Voxel,
            ..tiny_data()
        };
        let (train, _) = relational_split(&spec, 3, 1).unwrap();
        let refs: Vec<&InstanceBag> = train.iter().collect();
        let a = Trainer::augmented(&refs, 5, 2).unwrap();
        assert_eq!(a, Trainer::augmented(&refs, 5, 2).unwrap());
        assert_ne!(a, Trainer::augmented(&refs, 5, 3).unwrap());
    }

    #[test]
    fn split_shares_the_codebook_but_not_the_bags() {
        let (train, test) = relational_split(&tiny_data(), 5, 5).unwrap();
        assert_ne!(train[0].instances, test[0].instances);
        let (again, _) = relational_split(&tiny_data(), 5, 5).unwrap();
        assert_eq!(train, again);
    }
}
