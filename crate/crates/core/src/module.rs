//! Named parameter traversal shared by every model component.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::norm::BatchNorm;
use crate::tensor::Tensor;

pub enum Slot<'a> {
    Param(&'a mut Tensor),
    Norm(&'a mut BatchNorm),
}

pub trait Module {
    /// Calls `f` once for every parameter tensor and every batch-norm layer,
    /// passing the checkpoint name.
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// One tensor of a saved model: parameters, and running statistics as
/// `{bn}.mean` / `{bn}.var`.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Trainable tensors with their names; batch norms expand to `.gamma`/`.beta`.
pub fn named_params<'a, M: Module + ?Sized>(m: &'a mut M, prefix: &str) -> Vec<(String, &'a mut Tensor)> {
    let mut out = Vec::new();
    m.visit_mut(prefix, &mut |name, slot| match slot {
        Slot::Param(t) => out.push((name, t)),
        Slot::Norm(bn) => {
            let BatchNorm { gamma, beta, .. } = bn;
            out.push((join(&name, "gamma"), gamma));
            out.push((join(&name, "beta"), beta));
        }
    });
    out
}

pub fn param_count<M: Module + ?Sized>(m: &mut M) -> usize {
    named_params(m, "").iter().map(|(_, t)| t.numel()).sum()
}

pub fn zero_grads<M: Module + ?Sized>(m: &mut M) {
    for (_, t) in named_params(m, "") {
        t.zero_grad();
    }
}

/// Every parameter and populated running statistic.
pub fn state_dict<M: Module + ?Sized>(m: &mut M, prefix: &str) -> Vec<NamedArray> {
    let mut out = Vec::new();
    m.visit_mut(prefix, &mut |name, slot| match slot {
        Slot::Param(t) => out.push(NamedArray {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }),
        Slot::Norm(bn) => {
            let c = bn.channels();
            for (suffix, t) in [("gamma", &bn.gamma), ("beta", &bn.beta)] {
                out.push(NamedArray {
                    name: join(&name, suffix),
                    shape: vec![c],
                    data: t.data().to_vec(),
                });
            }
            if let Some(r) = &bn.running {
                for (suffix, v) in [("mean", &r.mean), ("var", &r.var)] {
                    out.push(NamedArray {
                        name: join(&name, suffix),
                        shape: vec![c],
                        data: v.clone(),
                    });
                }
            }
        }
    });
    out
}

/// Loads every parameter of `m` from `entries`. Missing parameters are an
/// error; missing running statistics leave the layer unpopulated. Entries not
/// belonging to `m` are ignored.
pub fn load_state_dict<M: Module + ?Sized>(m: &mut M, prefix: &str, entries: &[NamedArray]) -> Result<()> {
    let by_name: HashMap<&str, &NamedArray> = entries.iter().map(|e| (e.name.as_str(), e)).collect();
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f64>> {
        let e = by_name
            .get(name)
            .ok_or_else(|| Error::State(format!("checkpoint has no entry {name:?}")))?;
        if e.shape != shape {
            return Err(Error::shape("load_state_dict", shape, &e.shape));
        }
        Ok(e.data.clone())
    };
    let mut result = Ok(());
    m.visit_mut(prefix, &mut |name, slot| {
        if result.is_err() {
            return;
        }
        let r = (|| -> Result<()> {
            match slot {
                Slot::Param(t) => *t = Tensor::param(fetch(&name, t.shape())?, t.shape())?,
                Slot::Norm(bn) => {
                    let c = [bn.channels()];
                    bn.gamma = Tensor::param(fetch(&join(&name, "gamma"), &c)?, &c)?;
                    bn.beta = Tensor::param(fetch(&join(&name, "beta"), &c)?, &c)?;
                    let (mean, var) = (join(&name, "mean"), join(&name, "var"));
                    bn.running = None;
                    if by_name.contains_key(mean.as_str()) || by_name.contains_key(var.as_str()) {
                        bn.set_running(fetch(&mean, &c)?, fetch(&var, &c)?)?;
                    }
                }
            }
            Ok(())
        })();
        result = r;
    });
    result
}
