//! Synthetic relational bags.
//!
//! Every instance carries a latent key drawn uniformly from `K` symbols and is
//! positive exactly when another instance of its bag shares that key. Keys
//! are i.i.d., so an instance's payload says nothing about its own label; only
//! the rest of the bag does.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mil::{InstanceBag, Payload};
use crate::preprocess::Volume;
use crate::rng::{item_stream, substream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadMode {
    Feature,
    Voxel,
}

impl PayloadMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(PayloadMode::Feature),
            "voxel" => Ok(PayloadMode::Voxel),
            other => Err(Error::config(format!("unknown payload mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub bags: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub keys: usize,
    /// Feature payload width.
    pub width: usize,
    pub noise: f64,
    pub mask_fraction: f64,
    pub payload: PayloadMode,
    /// Drives bag sizes, keys, noise and masks.
    pub seed: u64,
    /// Drives the key → payload map. Datasets meant to be used together
    /// (train/test) must share it.
    pub codebook_seed: u64,
    /// Voxels per side of voxel payloads.
    pub patch_edge: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            bags: 100,
            n_min: 1,
            n_max: 23,
            keys: 8,
            width: 64,
            noise: 0.1,
            mask_fraction: 0.46,
            payload: PayloadMode::Feature,
            seed: 0,
            codebook_seed: 0,
            patch_edge: 8,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_min < 1 || self.n_max < self.n_min {
            return Err(Error::config(format!(
                "bag size range [{}, {}] needs 1 ≤ n_min ≤ n_max",
                self.n_min, self.n_max
            )));
        }
        if self.keys < 2 {
            return Err(Error::config(format!("key alphabet needs at least 2 symbols, got {}", self.keys)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config(format!("mask fraction {} outside [0, 1)", self.mask_fraction)));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config(format!("noise must be non-negative, got {}", self.noise)));
        }
        if self.width == 0 || self.patch_edge == 0 {
            return Err(Error::config("payload size must be positive"));
        }
        Ok(())
    }
}

/// Fixed key → payload prototypes.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub embeddings: Vec<Vec<f64>>,
    pub textures: Vec<Vec<f64>>,
}

impl Codebook {
    /// Embeddings are rows of a random orthogonal matrix scaled by `√width`
    /// (entries of order 1) when `keys ≤ width`, plain Gaussian rows otherwise.
    /// Textures are Gaussian patterns clipped to `[−1, 1]`.
    pub fn new(spec: &SynthSpec) -> Self {
        let mut rng = substream(spec.codebook_seed, "codebook");
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut embeddings: Vec<Vec<f64>> = (0..spec.keys)
            .map(|_| (0..spec.width).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        if spec.keys <= spec.width {
            let scale = (spec.width as f64).sqrt();
            for i in 0..embeddings.len() {
                let (done, rest) = embeddings.split_at_mut(i);
                let row = &mut rest[0];
                for q in done.iter() {
                    let dot: f64 = row.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / spec.width as f64;
                    row.iter_mut().zip(q).for_each(|(a, b)| *a -= dot * b);
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                row.iter_mut().for_each(|v| *v *= scale / norm);
            }
        }
        let texture = Normal::<f64>::new(0.0, 0.5).expect("finite std");
        let cells = spec.patch_edge.pow(3);
        let textures = (0..spec.keys)
            .map(|_| (0..cells).map(|_| texture.sample(&mut rng).clamp(-1.0, 1.0)).collect())
            .collect();
        Codebook { embeddings, textures }
    }
}

/// A generated bag together with the latent keys of its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthBag {
    pub bag: InstanceBag,
    pub keys: Vec<usize>,
}

/// Label 1 exactly for instances whose key occurs at least twice in the bag.
pub fn relational_labels(keys: &[usize]) -> Vec<u8> {
    let mut counts = std::collections::HashMap::new();
    for &k in keys {
        *counts.entry(k).or_insert(0usize) += 1;
    }
    keys.iter().map(|k| u8::from(counts[k] >= 2)).collect()
}

fn payload(spec: &SynthSpec, book: &Codebook, key: usize, rng: &mut ChaCha8Rng) -> Result<Payload> {
    let noise = Normal::new(0.0, spec.noise).expect("validated noise");
    Ok(match spec.payload {
        PayloadMode::Feature => {
            Payload::Features(book.embeddings[key].iter().map(|v| v + noise.sample(rng)).collect())
        }
        PayloadMode::Voxel => Payload::Voxels(Volume::new(
            [spec.patch_edge; 3],
            [1.0; 3],
            book.textures[key]
                .iter()
                // f32 precision, so that volume files round-trip exactly
                .map(|v| (v + noise.sample(rng)).clamp(-1.0, 1.0) as f32 as f64)
                .collect(),
        )?),
    })
}

/// Deterministic given the spec; bag `b` uses its own random stream.
pub fn generate_bags(spec: &SynthSpec) -> Result<Vec<SynthBag>> {
    spec.validate()?;
    let book = Codebook::new(spec);
    (0..spec.bags)
        .map(|b| {
            let mut rng = item_stream(spec.seed, "data", b as u64);
            let n = rng.random_range(spec.n_min..=spec.n_max);
            let keys: Vec<usize> = (0..n).map(|_| rng.random_range(0..spec.keys)).collect();
            let labels = relational_labels(&keys);
            let instances = keys
                .iter()
                .map(|&k| payload(spec, &book, k, &mut rng))
                .collect::<Result<_>>()?;
            let mask = (0..n).map(|_| !rng.random_bool(spec.mask_fraction)).collect();
            Ok(SynthBag {
                bag: InstanceBag::new(format!("bag{b:05}"), instances, labels, mask)?,
                keys,
            })
        })
        .collect()
}

/// Expected fraction of positive instances when bag sizes are uniform on
/// `[n_min, n_max]`: `Σ N·(1 − ((K−1)/K)^(N−1)) / Σ N`.
pub fn analytic_positive_rate(n_min: usize, n_max: usize, keys: usize) -> f64 {
    let miss = (keys as f64 - 1.0) / keys as f64;
    let (num, den) = (n_min..=n_max).fold((0.0, 0.0), |(num, den), n| {
        let n = n as f64;
        (num + n * (1.0 - miss.powf(n - 1.0)), den + n)
    });
    num / den
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NoduleAnnotation {
    pub id: String,
    /// Radiologist malignancy ratings, each in `1..=5`.
    pub scores: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Malignancy {
    Malignant,
    Benign,
    Ambiguous,
}

impl Malignancy {
    /// `(label, mask)` of the corresponding instance.
    pub fn target(self) -> (u8, bool) {
        match self {
            Malignancy::Malignant => (1, true),
            Malignancy::Benign => (0, true),
            Malignancy::Ambiguous => (0, false),
        }
    }
}

impl NoduleAnnotation {
    pub fn mean_score(&self) -> f64 {
        self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len() as f64
    }
}

/// Mean rating above 3 is malignant, below 3 benign, exactly 3 ambiguous.
pub fn label_from_scores(ann: &NoduleAnnotation) -> Result<Malignancy> {
    if ann.scores.len() < 3 {
        return Err(Error::InclusionCriteria(format!(
            "nodule {:?} has {} ratings, at least 3 required",
            ann.id,
            ann.scores.len()
        )));
    }
    if let Some(bad) = ann.scores.iter().find(|s| !(1..=5).contains(*s)) {
        return Err(Error::Contract(format!("rating {bad} of nodule {:?} outside 1..=5", ann.id)));
    }
    // compare the integer sum against 3·count to avoid rounding at the boundary
    let sum: usize = ann.scores.iter().map(|&s| s as usize).sum();
    let pivot = 3 * ann.scores.len();
    Ok(match sum.cmp(&pivot) {
        std::cmp::Ordering::Greater => Malignancy::Malignant,
        std::cmp::Ordering::Less => Malignancy::Benign,
        std::cmp::Ordering::Equal => Malignancy::Ambiguous,
    })
}
