//! Run configuration: flat `key = value` lines with dotted section prefixes.
//!
//! ```text
//! task = synth-relational
//! seed = 7
//! data.train = train
//! model.sat.L = 3
//! model.sat.H = 64
//! optim.lr = 3e-3
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::activation::Activation;
use crate::attention::SatConfig;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::experiment::TrainOptions;
use crate::mil::{ModelConfig, TrainMode, DEFAULT_MAX_BAG};
use crate::optim::LrSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Candidate false-positive reduction: pretrained encoder held fixed.
    Fpr,
    /// Malignancy classification: end-to-end with encoder norms held fixed.
    Malignancy,
    SynthRelational,
}

impl Task {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fpr" => Ok(Task::Fpr),
            "malignancy" => Ok(Task::Malignancy),
            "synth-relational" => Ok(Task::SynthRelational),
            other => Err(Error::config(format!("unknown task {other:?}"))),
        }
    }

    fn defaults(self) -> (Option<&'static str>, TrainMode, usize) {
        match self {
            Task::Fpr => (Some("fpr"), TrainMode::FrozenBackbone, 64),
            Task::Malignancy => (Some("malignancy"), TrainMode::FrozenBn, 16),
            Task::SynthRelational => (None, TrainMode::EndToEnd, 32),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub sat: SatConfig,
    pub backbone: Option<BackboneConfig>,
    /// Width of feature payloads; taken from the data when absent.
    pub input_width: Option<usize>,
    pub max_bag: usize,
    pub schedule: LrSchedule,
    pub epochs: usize,
    pub batch_bags: usize,
    pub mode: TrainMode,
    pub augment: bool,
    pub train: PathBuf,
    pub test: Option<PathBuf>,
    /// Checkpoint to initialize from (and resume its epoch counter).
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn model(&self, data_width: usize) -> ModelConfig {
        let mut m = match &self.backbone {
            Some(b) => ModelConfig::voxels(b.clone(), self.sat.clone()),
            None => ModelConfig::features(self.input_width.unwrap_or(data_width), self.sat.clone()),
        };
        m.max_bag = self.max_bag;
        m
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            batch_bags: self.batch_bags,
            schedule: self.schedule.clone(),
            mode: self.mode,
            seed: self.seed,
            augment: self.augment,
        }
    }

    /// Referenced paths must exist before a run starts.
    pub fn check_paths(&self) -> Result<()> {
        for p in std::iter::once(&self.train).chain(&self.test).chain(&self.checkpoint) {
            if !p.exists() {
                return Err(Error::config(format!("path {} does not exist", p.display())));
            }
        }
        for p in std::iter::once(&self.train).chain(&self.test) {
            if !p.is_dir() {
                return Err(Error::config(format!("data path {} must be a dataset directory", p.display())));
            }
        }
        Ok(())
    }
}

/// Parses `key = value` lines; `#` starts a comment. Duplicate keys are errors.
pub fn parse_pairs(path: &Path, text: &str) -> Result<BTreeMap<String, (usize, String)>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Record {
            path: path.display().to_string(),
            line: i + 1,
            msg,
        };
        let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        if out.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(err(format!("duplicate key {k:?}")));
        }
    }
    Ok(out)
}

struct Pairs<'a> {
    path: &'a Path,
    map: BTreeMap<String, (usize, String)>,
}

impl Pairs<'_> {
    fn raw(&mut self, key: &str) -> Option<(usize, String)> {
        self.map.remove(key)
    }

    fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v.parse().map(Some).map_err(|_| Error::Record {
                path: self.path.display().to_string(),
                line,
                msg: format!("invalid value {v:?} for {key}"),
            }),
        }
    }

    fn list(&mut self, key: &str) -> Result<Option<Vec<usize>>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => v
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Some)
                .map_err(|_| Error::Record {
                    path: self.path.display().to_string(),
                    line,
                    msg: format!("invalid list {v:?} for {key}"),
                }),
        }
    }

    fn with<T>(&mut self, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => f(&v).map(Some).map_err(|e| Error::Record {
                path: self.path.display().to_string(),
                line,
                msg: e.to_string(),
            }),
        }
    }
}

/// Builds a run configuration. Relative paths resolve against `base`;
/// `seed_override` (a command-line seed) wins over the file.
pub fn parse_config(path: &Path, text: &str, base: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut p = Pairs {
        path,
        map: parse_pairs(path, text)?,
    };
    let task = p
        .with("task", Task::parse)?
        .ok_or_else(|| Error::config("config needs a task"))?;
    let file_seed: Option<u64> = p.get("seed")?;
    let seed = seed_override
        .or(file_seed)
        .ok_or_else(|| Error::config("a seed is mandatory (config key seed or --seed)"))?;
    let (preset, mode, batch) = task.defaults();

    let sat_default = SatConfig::default();
    let sat = SatConfig {
        layers: p.get("model.sat.L")?.unwrap_or(sat_default.layers),
        hidden: p.get("model.sat.H")?.unwrap_or(sat_default.hidden),
        groups: p.get("model.sat.g")?.unwrap_or(sat_default.groups),
        sigma: p.with("model.sat.sigma", Activation::parse)?.unwrap_or(sat_default.sigma),
    };
    sat.validate()?;

    let preset = p.raw("model.backbone").map(|(_, v)| v).or(preset.map(String::from));
    let mut backbone = match preset.as_deref() {
        None | Some("none") => None,
        Some(name) => Some(BackboneConfig::preset(name)?),
    };
    if let Some(b) = backbone.as_mut() {
        b.growth = p.get("model.backbone.k")?.unwrap_or(b.growth);
        b.repeats = p.list("model.backbone.repeats")?.unwrap_or(b.repeats.clone());
        b.compression = p.get("model.backbone.theta")?.unwrap_or(b.compression);
        b.bottleneck = p.get("model.backbone.B")?.unwrap_or(b.bottleneck);
        b.alpha = p.get("model.backbone.alpha")?.unwrap_or(b.alpha);
        b.stem = p.get("model.backbone.stem")?.unwrap_or(b.stem);
        b.edge = p.get("model.backbone.edge")?.unwrap_or(b.edge);
        b.validate()?;
    }

    let lr: f64 = p.get("optim.lr")?.unwrap_or(1e-3);
    let kind = p.raw("optim.schedule").map(|(_, v)| v).unwrap_or_else(|| "constant".into());
    let schedule = match kind.as_str() {
        "constant" => LrSchedule::constant(lr),
        "exponential" => LrSchedule::Exponential {
            initial: lr,
            ratio: p.get("optim.ratio")?.unwrap_or(0.0),
        },
        "step" => LrSchedule::StepMultiply {
            initial: lr,
            factor: p.get("optim.factor")?.unwrap_or(0.1),
            milestones: p.list("optim.milestones")?.unwrap_or_default(),
        },
        "halve" => LrSchedule::HalveEvery {
            initial: lr,
            period: p.get("optim.period")?.unwrap_or(10),
        },
        other => return Err(Error::config(format!("unknown schedule {other:?}"))),
    };
    schedule.validate()?;

    let resolve = |v: String| -> PathBuf {
        let p = PathBuf::from(v);
        if p.is_absolute() {
            p
        } else {
            base.join(p)
        }
    };
    let train = p
        .raw("data.train")
        .map(|(_, v)| resolve(v))
        .ok_or_else(|| Error::config("config needs data.train"))?;
    let test = p.raw("data.test").map(|(_, v)| resolve(v));
    let checkpoint = p.raw("init.checkpoint").map(|(_, v)| resolve(v));

    let cfg = RunConfig {
        task,
        seed,
        sat,
        backbone,
        input_width: p.get("model.input_width")?,
        max_bag: p.get("model.max_bag")?.unwrap_or(DEFAULT_MAX_BAG),
        schedule,
        epochs: p.get("train.epochs")?.unwrap_or(10),
        batch_bags: p.get("train.batch_bags")?.unwrap_or(batch),
        mode: p.with("train.mode", TrainMode::parse)?.unwrap_or(mode),
        augment: p.get("train.augment")?.unwrap_or(false),
        train,
        test,
        checkpoint,
    };
    if let Some((key, (line, _))) = p.map.into_iter().next() {
        return Err(Error::Record {
            path: path.display().to_string(),
            line,
            msg: format!("unknown key {key:?}"),
        });
    }
    if cfg.batch_bags == 0 || cfg.max_bag == 0 {
        return Err(Error::config("batch size and max bag size must be positive"));
    }
    Ok(cfg)
}

pub fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_config(path, &text, base, seed_override)
}
