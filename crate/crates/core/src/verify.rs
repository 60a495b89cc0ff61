//! Self-check suite run by the `verify` and `gradcheck` commands.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::activation::{elu, leaky_relu, sigmoid, softmax_rows, Activation};
use crate::attention::{param_count_ratio, set_attention, GsaLayer, Sat, SatConfig, SetLayout};
use crate::backbone::BackboneConfig;
use crate::conv::conv3d;
use crate::error::Result;
use crate::eval::{auc, froc, Candidate, FROC_TARGETS};
use crate::gradcheck::{grad_check_kink_aware, grad_check_many};
use crate::mil::{batch_loss, masked_bce, train_bag_batch, InstanceBag, ModelConfig, NoduleSat, Payload, TrainMode};
use crate::module::{named_params, state_dict};
use crate::norm::{BatchNorm, Mode};
use crate::ops::{gather_rows, matmul, mul, square, sum};
use crate::optim::Adam;
use crate::preprocess::{hu_normalize, resample_trilinear, Volume};
use crate::rng::substream;
use crate::tensor::Tensor;

/// Tolerance on relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Finite-difference step for every gradient check.
pub const GRAD_STEP: f64 = 1e-5;
/// Step ladder for models with piecewise-linear activations.
pub const KINK_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 1e-8];
/// Relative agreement between successive estimates, and the assumed
/// roundoff of a loss evaluation.
pub const KINK_AGREEMENT: (f64, f64) = (1e-6, 1e-14);
pub const EQUIVARIANCE_TOLERANCE: f64 = 1e-6;
pub const PADDING_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Check {
            name: name.into(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!("{} {} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    All,
    /// Gradient checks only.
    Gradients,
}

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub suite: Suite,
    /// Corrupts the channel shuffle of the SAT under test.
    pub shuffle_fault: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], r: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.random_range(-r..r)).collect(), shape).expect("shape matches data")
}

fn errored(name: &str, r: Result<Check>) -> Check {
    r.unwrap_or_else(|e| Check::new(name, false, format!("error: {e}")))
}

/// Runs the selected checks in a fixed order.
pub fn run_suite(opts: VerifyOptions) -> Vec<Check> {
    let s = opts.seed;
    let mut out = Vec::new();
    if opts.suite == Suite::All {
        out.push(errored("softmax", check_softmax(s)));
    }
    out.extend(op_gradients(s));
    out.push(errored("grad.nodulesat", check_model_gradient(s)));
    if opts.suite == Suite::Gradients {
        return out;
    }
    out.push(errored("equivariance", check_equivariance(s, 100, opts.shuffle_fault)));
    for (c, g) in [(64, 1), (128, 4), (256, 8)] {
        out.push(errored("param-ratio", check_param_ratio(c, g)));
    }
    out.push(errored("padding-neutrality", check_padding(s)));
    out.push(errored("masked-bce", check_masked_bce(s)));
    out.push(errored("froc-oracle", check_froc(s, 100)));
    out.push(errored("auc-oracle", check_auc(s, 100)));
    out.push(errored("preprocess", check_preprocess()));
    out
}

pub fn check_softmax(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, "verify.softmax");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, m) = (rng.random_range(1..8), rng.random_range(1..8));
        let x = uniform(&mut rng, &[n, m], 50.0);
        let shift = rng.random_range(-100.0..100.0);
        let shifted = Tensor::new(x.data().iter().map(|v| v + shift).collect(), x.shape())?;
        let (p, q) = (softmax_rows(&x)?, softmax_rows(&shifted)?);
        for r in 0..n {
            let row = &p.data()[r * m..(r + 1) * m];
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                worst = f64::INFINITY;
            }
        }
        for (a, b) in p.data().iter().zip(q.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(Check::new("softmax", worst < 1e-12, format!("max_dev={worst:.3e}")))
}

fn grad_case(name: &str, f: impl FnMut(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor]) -> Check {
    errored(
        name,
        grad_check_many(f, inputs, GRAD_STEP).map(|r| {
            Check::new(
                name,
                r.max_rel_error < GRAD_TOLERANCE,
                format!("max_rel_err={:.3e} coords={}", r.max_rel_error, r.coordinates),
            )
        }),
    )
}

/// Gradient checks of the individual differentiable operations on random inputs.
pub fn op_gradients(seed: u64) -> Vec<Check> {
    let mut rng = substream(seed, "verify.ops");
    let mut out = Vec::new();
    let (a, b) = (uniform(&mut rng, &[3, 4], 1.0), uniform(&mut rng, &[4, 2], 1.0));
    out.push(grad_case("grad.matmul", |t| Ok(sum(&square(&matmul(&t[0], &t[1])?))), &[a, b]));

    let x = uniform(&mut rng, &[3, 5], 2.0);
    let w = uniform(&mut rng, &[3, 5], 1.0);
    out.push(grad_case(
        "grad.softmax",
        |t| Ok(sum(&mul(&softmax_rows(&t[0])?, &w)?)),
        std::slice::from_ref(&x),
    ));
    out.push(grad_case(
        "grad.activations",
        |t| {
            let y = elu(&t[0]);
            let y = leaky_relu(&y, 0.1);
            Ok(sum(&mul(&sigmoid(&y), &w)?))
        },
        std::slice::from_ref(&x),
    ));

    let vol = uniform(&mut rng, &[2, 2, 4, 4, 4], 1.0);
    let kernel = uniform(&mut rng, &[3, 2, 3, 3, 3], 0.5);
    out.push(grad_case(
        "grad.conv3d",
        |t| Ok(sum(&square(&conv3d(&t[0], &t[1], 1, 1)?))),
        &[vol, kernel],
    ));

    let rows = uniform(&mut rng, &[6, 4], 1.0);
    let w6 = uniform(&mut rng, &[6, 4], 1.0);
    out.push(grad_case(
        "grad.batchnorm",
        |t| {
            let mut bn = BatchNorm::new(4);
            Ok(sum(&mul(&bn.forward(&t[0], Mode::Train)?, &w6)?))
        },
        std::slice::from_ref(&rows),
    ));

    let layout = SetLayout::padded(&[2, 4]).expect("nonempty");
    let z = uniform(&mut rng, &[8, 4], 1.0);
    let w8 = uniform(&mut rng, &[8, 4], 1.0);
    out.push(grad_case(
        "grad.set-attention",
        |t| Ok(sum(&mul(&set_attention(&t[0], 2, &layout, Activation::Elu)?, &w8)?)),
        std::slice::from_ref(&z),
    ));

    let layer = GsaLayer::new(&mut rng, 4, 2, Activation::Elu);
    let single = SetLayout::single(6).expect("nonempty");
    out.push(match layer {
        Ok(layer) => grad_case(
            "grad.gsa",
            |t| {
                let mut l = layer.clone();
                Ok(sum(&mul(&l.forward(&t[0], &single, Mode::Train)?, &w6)?))
            },
            std::slice::from_ref(&rows),
        ),
        Err(e) => Check::new("grad.gsa", false, format!("error: {e}")),
    });

    let logits = uniform(&mut rng, &[5], 3.0);
    out.push(grad_case(
        "grad.masked-bce",
        |t| masked_bce(&t[0], &[1, 0, 1, 0, 1], &[true, true, false, true, false]),
        std::slice::from_ref(&logits),
    ));
    out
}

fn voxel_bag(rng: &mut ChaCha8Rng, id: &str, n: usize, edge: usize) -> Result<InstanceBag> {
    let instances = (0..n)
        .map(|_| {
            let v = (0..edge * edge * edge).map(|_| rng.random_range(-1.0..1.0)).collect();
            Volume::new([edge; 3], [1.0; 3], v).map(Payload::Voxels)
        })
        .collect::<Result<_>>()?;
    let labels = (0..n).map(|i| (i % 2) as u8).collect();
    InstanceBag::labeled(id, instances, labels)
}

/// Full model: 8³ voxels through the tiny backbone into an `L = 2` SAT. The
/// backbone's leaky ReLUs put kinks within a 1e-5 stencil for some
/// coordinates, so the step is refined where estimates disagree.
pub fn check_model_gradient(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, "verify.model");
    let sat = SatConfig {
        layers: 2,
        hidden: 8,
        groups: 4,
        sigma: Activation::Elu,
    };
    let base = NoduleSat::new(&mut rng, ModelConfig::voxels(BackboneConfig::tiny(), sat))?;
    let bag = voxel_bag(&mut rng, "g", 3, BackboneConfig::tiny().edge)?;
    let mut probe = base.clone();
    let params: Vec<Tensor> = named_params(&mut probe, "").into_iter().map(|(_, t)| t.clone()).collect();
    let r = grad_check_kink_aware(
        |t| {
            let mut m = base.clone();
            for ((_, slot), v) in named_params(&mut m, "").into_iter().zip(t) {
                *slot = v.clone();
            }
            batch_loss(&mut m, &[&bag], TrainMode::EndToEnd)
        },
        &params,
        &KINK_STEPS,
        KINK_AGREEMENT.0,
        KINK_AGREEMENT.1,
    )?;
    Ok(Check::new(
        "grad.nodulesat",
        r.max_rel_error < GRAD_TOLERANCE,
        format!(
            "max_rel_err={:.3e} coords={} refined={}",
            r.max_rel_error, r.coordinates, r.refined
        ),
    ))
}

/// Largest deviation of `sat(P·x)` from `P·sat(x)` over random sets.
pub fn equivariance_deviation(sat: &mut Sat, rng: &mut ChaCha8Rng, bags: usize, n_max: usize) -> Result<f64> {
    let h = sat.config.hidden;
    let mut worst: f64 = 0.0;
    for _ in 0..bags {
        let n = rng.random_range(1..=n_max);
        let x = uniform(rng, &[n, h], 2.0);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let layout = SetLayout::single(n)?;
        let y = sat.forward(&x, &layout, Mode::Train)?;
        let y_perm = sat.forward(&gather_rows(&x, &perm)?, &layout, Mode::Train)?;
        let expected = gather_rows(&y, &perm)?;
        for (a, b) in y_perm.data().iter().zip(expected.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

pub fn check_equivariance(seed: u64, bags: usize, fault: bool) -> Result<Check> {
    let mut rng = substream(seed, "verify.equivariance");
    let mut sat = Sat::new(
        &mut rng,
        SatConfig {
            layers: 3,
            hidden: 16,
            groups: 4,
            sigma: Activation::Elu,
        },
    )?;
    sat.inject_shuffle_fault(fault);
    let worst = equivariance_deviation(&mut sat, &mut rng, bags, 32)?;
    Ok(Check::new(
        "equivariance",
        worst < EQUIVARIANCE_TOLERANCE,
        format!("bags={bags} max_dev={worst:.3e}"),
    ))
}

pub fn check_param_ratio(channels: usize, groups: usize) -> Result<Check> {
    let counts = param_count_ratio(channels, groups)?;
    let exact = counts.mha == 4 * groups * counts.gsa;
    Ok(Check::new(
        "param-ratio",
        exact,
        format!(
            "c={channels} g={groups} mha={} gsa={} ratio={} expected={}",
            counts.mha,
            counts.gsa,
            counts.ratio(),
            4 * groups
        ),
    ))
}

/// Batched and solo evaluation-mode predictions agree.
pub fn check_padding(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, "verify.padding");
    let sat = SatConfig {
        layers: 2,
        hidden: 16,
        groups: 4,
        sigma: Activation::Elu,
    };
    let mut model = NoduleSat::new(&mut rng, ModelConfig::features(6, sat))?;
    let mut bag = |id: &str, n: usize| {
        let instances = (0..n)
            .map(|_| Payload::Features((0..6).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        InstanceBag::labeled(id, instances, vec![0; n])
    };
    let warm = bag("warm", 12)?;
    model.forward(&[&warm], Mode::Train, TrainMode::EndToEnd)?;
    let bags: Vec<InstanceBag> = [1, 3, 7, 2].iter().enumerate().map(|(i, &n)| bag(&format!("b{i}"), n)).collect::<Result<_>>()?;
    let refs: Vec<&InstanceBag> = bags.iter().collect();
    let batched = model.predict_batch(&refs)?;
    let mut worst: f64 = 0.0;
    for (b, got) in bags.iter().zip(&batched) {
        let solo = model.predict(b)?;
        for (x, y) in solo.logits.iter().zip(&got.logits) {
            worst = worst.max((x - y).abs());
        }
    }
    Ok(Check::new(
        "padding-neutrality",
        worst < PADDING_TOLERANCE,
        format!("max_dev={worst:.3e}"),
    ))
}

/// Masked logits get exactly zero gradient and an all-masked batch changes nothing.
pub fn check_masked_bce(seed: u64) -> Result<Check> {
    let mut rng = substream(seed, "verify.masked");
    let z = Tensor::param((0..6).map(|_| rng.random_range(-4.0..4.0)).collect(), &[6])?;
    let mask = [true, false, true, false, false, true];
    let loss = masked_bce(&z, &[1, 1, 0, 0, 1, 0], &mask)?;
    loss.backward()?;
    let g = z.grad().unwrap_or_default();
    let zero_masked = mask.iter().zip(&g).all(|(&m, &v)| m || v == 0.0);

    let sat = SatConfig {
        layers: 1,
        hidden: 4,
        groups: 2,
        sigma: Activation::Elu,
    };
    let mut model = NoduleSat::new(&mut rng, ModelConfig::features(4, sat))?;
    let instances = (0..3).map(|i| Payload::Features(vec![i as f64; 4])).collect();
    let bag = InstanceBag::new("m", instances, vec![1, 0, 1], vec![false; 3])?;
    let before = state_dict(&mut model, "");
    let step_loss = train_bag_batch(&[&bag], &mut model, &mut Adam::new(), 1e-2, TrainMode::EndToEnd)?;
    let untouched = step_loss == 0.0 && state_dict(&mut model, "") == before;
    Ok(Check::new(
        "masked-bce",
        zero_masked && untouched,
        format!("masked_grad_zero={zero_masked} all_masked_noop={untouched}"),
    ))
}

/// Sensitivity at each target by trying every threshold.
pub fn froc_oracle(cands: &[Candidate], scans: usize) -> [f64; 7] {
    let total: HashSet<&str> = cands.iter().filter(|c| c.truth).filter_map(|c| c.nodule_id.as_deref()).collect();
    let mut out = [0.0; 7];
    for (slot, &t) in out.iter_mut().zip(FROC_TARGETS.iter()) {
        for c in cands {
            let kept = cands.iter().filter(|d| d.score >= c.score);
            let (mut fps, mut hits) = (0usize, HashSet::new());
            for d in kept {
                if d.truth {
                    hits.insert(d.nodule_id.as_deref().unwrap_or(""));
                } else {
                    fps += 1;
                }
            }
            if fps as f64 <= t * scans as f64 {
                *slot = f64::max(*slot, hits.len() as f64 / total.len() as f64);
            }
        }
    }
    out
}

pub fn random_candidates(rng: &mut ChaCha8Rng) -> (Vec<Candidate>, usize) {
    let scans = rng.random_range(1..5);
    let nodules = rng.random_range(1..6);
    let n = rng.random_range(1..40);
    let cands = (0..n)
        .map(|i| {
            let truth = i < nodules || rng.random_bool(0.2);
            Candidate {
                series_id: format!("s{}", rng.random_range(0..scans)),
                position: [0.0; 3],
                // coarse scores so that ties occur
                score: rng.random_range(0..12) as f64 / 11.0,
                truth,
                nodule_id: truth.then(|| format!("n{}", rng.random_range(0..nodules))),
            }
        })
        .collect();
    (cands, scans)
}

pub fn check_froc(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = substream(seed, "verify.froc");
    let mut mismatches = 0;
    for _ in 0..instances {
        let (cands, scans) = random_candidates(&mut rng);
        if froc(&cands, scans)?.sensitivities != froc_oracle(&cands, scans) {
            mismatches += 1;
        }
    }
    Ok(Check::new(
        "froc-oracle",
        mismatches == 0,
        format!("instances={instances} mismatches={mismatches}"),
    ))
}

pub fn pair_count_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (s, _) in scores.iter().zip(labels).filter(|p| *p.1) {
        for (t, _) in scores.iter().zip(labels).filter(|p| !*p.1) {
            den += 1.0;
            num += if s > t {
                1.0
            } else if s == t {
                0.5
            } else {
                0.0
            };
        }
    }
    num / den
}

pub fn check_auc(seed: u64, instances: usize) -> Result<Check> {
    let mut rng = substream(seed, "verify.auc");
    let mut mismatches = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64).collect();
        if auc(&scores, &labels)? != pair_count_auc(&scores, &labels) {
            mismatches += 1;
        }
    }
    Ok(Check::new(
        "auc-oracle",
        mismatches == 0,
        format!("instances={instances} mismatches={mismatches}"),
    ))
}

pub fn check_preprocess() -> Result<Check> {
    let hu = Volume::new([4, 1, 1], [1.0; 3], vec![-1024.0, -312.0, 400.0, 2000.0])?;
    let window_ok = hu_normalize(&hu).voxels() == [-1.0, 0.0, 1.0, 1.0];

    let linear = |x: f64, y: f64, z: f64| 0.5 * x - 1.25 * y + 2.0 * z + 3.0;
    let coarse = Volume::from_fn([4, 4, 4], [2.0; 3], linear)?;
    let fine = resample_trilinear(&coarse, [1.0; 3])?;
    let dims_ok = fine.dims() == [8, 8, 8];
    let fine_on_coarse = Volume::from_fn([8, 8, 8], [1.0; 3], linear)?;
    // interior voxels lie within the coarse sample hull, where trilinear is exact
    let mut worst: f64 = 0.0;
    for z in 1..7 {
        for y in 1..7 {
            for x in 1..7 {
                worst = worst.max((fine.get(x, y, z) - fine_on_coarse.get(x, y, z)).abs());
            }
        }
    }
    Ok(Check::new(
        "preprocess",
        window_ok && dims_ok && worst <= 1e-10,
        format!("window={window_ok} dims={:?} linear_max_dev={worst:.3e}", fine.dims()),
    ))
}
