//! Batch normalization over every axis except channels (axis 1).

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics only.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: Option<RunningStats>,
    pub momentum: f64,
    pub eps: f64,
}

struct Layout {
    outer: usize,
    channels: usize,
    inner: usize,
}

fn layout(x: &Tensor, channels: usize) -> Result<Layout> {
    match x.shape() {
        [outer, c, rest @ ..] if *c == channels => Ok(Layout {
            outer: *outer,
            channels,
            inner: numel(rest),
        }),
        other => Err(Error::shape("batch_norm", other, &[channels])),
    }
}

impl BatchNorm {
    /// γ = 1, β = 0, no running statistics yet.
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::param(vec![1.0; channels], &[channels]).expect("nonzero channels"),
            beta: Tensor::param(vec![0.0; channels], &[channels]).expect("nonzero channels"),
            running: None,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn set_running(&mut self, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let c = self.channels();
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("set_running", &[c], &[mean.len(), var.len()]));
        }
        self.running = Some(RunningStats { mean, var });
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.forward_masked(x, mode, None)
    }

    /// Normalizes using only the outer-axis entries flagged valid; invalid
    /// entries produce zeros and receive no gradient.
    pub fn forward_masked(&mut self, x: &Tensor, mode: Mode, valid: Option<&[bool]>) -> Result<Tensor> {
        match mode {
            Mode::Train => self.forward_train(x, valid),
            Mode::Eval => self.forward_eval(x, valid),
        }
    }

    fn forward_train(&mut self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let l = layout(x, self.channels())?;
        let valid = resolve_valid(valid, l.outer)?;
        let m = valid.iter().filter(|&&v| v).count() * l.inner;
        if m == 0 {
            return Err(Error::EmptySet);
        }
        let xd = x.data();
        let mut mean = vec![0.0; l.channels];
        let mut var = vec![0.0; l.channels];
        for o in (0..l.outer).filter(|&o| valid[o]) {
            for (c, mc) in mean.iter_mut().enumerate() {
                let base = (o * l.channels + c) * l.inner;
                *mc += xd[base..base + l.inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        for o in (0..l.outer).filter(|&o| valid[o]) {
            for c in 0..l.channels {
                let base = (o * l.channels + c) * l.inner;
                var[c] += xd[base..base + l.inner].iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= m as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for o in (0..l.outer).filter(|&o| valid[o]) {
            for c in 0..l.channels {
                let base = (o * l.channels + c) * l.inner;
                for i in base..base + l.inner {
                    xhat[i] = (xd[i] - mean[c]) * inv_std[c];
                    out[i] = gamma[c] * xhat[i] + beta[c];
                }
            }
        }

        let momentum = self.momentum;
        let running = self.running.get_or_insert_with(|| RunningStats {
            mean: vec![0.0; l.channels],
            var: vec![1.0; l.channels],
        });
        for c in 0..l.channels {
            running.mean[c] = (1.0 - momentum) * running.mean[c] + momentum * mean[c];
            if m > 1 {
                let unbiased = var[c] * m as f64 / (m - 1) as f64;
                running.var[c] = (1.0 - momentum) * running.var[c] + momentum * unbiased;
            }
        }

        let gamma_c = self.gamma.clone();
        Ok(Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g| {
                let gamma = gamma_c.data();
                let mut dgamma = vec![0.0; l.channels];
                let mut dbeta = vec![0.0; l.channels];
                let mut sum_dxhat = vec![0.0; l.channels];
                let mut sum_dxhat_xhat = vec![0.0; l.channels];
                for o in (0..l.outer).filter(|&o| valid[o]) {
                    for c in 0..l.channels {
                        let base = (o * l.channels + c) * l.inner;
                        for i in base..base + l.inner {
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                            let dxh = g[i] * gamma[c];
                            sum_dxhat[c] += dxh;
                            sum_dxhat_xhat[c] += dxh * xhat[i];
                        }
                    }
                }
                let mut dx = vec![0.0; g.len()];
                let mf = m as f64;
                for o in (0..l.outer).filter(|&o| valid[o]) {
                    for c in 0..l.channels {
                        let base = (o * l.channels + c) * l.inner;
                        let k = inv_std[c] / mf;
                        for i in base..base + l.inner {
                            let dxh = g[i] * gamma[c];
                            dx[i] = k * (mf * dxh - sum_dxhat[c] - xhat[i] * sum_dxhat_xhat[c]);
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    fn forward_eval(&self, x: &Tensor, valid: Option<&[bool]>) -> Result<Tensor> {
        let l = layout(x, self.channels())?;
        let valid = resolve_valid(valid, l.outer)?;
        let running = self
            .running
            .as_ref()
            .ok_or_else(|| Error::State("batch norm evaluated before running statistics were populated".into()))?;
        let scale: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let xd = x.data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let (gamma, beta) = (self.gamma.data(), self.beta.data());
        for o in (0..l.outer).filter(|&o| valid[o]) {
            for c in 0..l.channels {
                let base = (o * l.channels + c) * l.inner;
                for i in base..base + l.inner {
                    xhat[i] = (xd[i] - running.mean[c]) * scale[c];
                    out[i] = gamma[c] * xhat[i] + beta[c];
                }
            }
        }
        let gamma_c = self.gamma.clone();
        Ok(Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone(), self.gamma.clone(), self.beta.clone()],
            Box::new(move |g| {
                let gamma = gamma_c.data();
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; l.channels];
                let mut dbeta = vec![0.0; l.channels];
                for o in (0..l.outer).filter(|&o| valid[o]) {
                    for c in 0..l.channels {
                        let base = (o * l.channels + c) * l.inner;
                        for i in base..base + l.inner {
                            dx[i] = g[i] * gamma[c] * scale[c];
                            dgamma[c] += g[i] * xhat[i];
                            dbeta[c] += g[i];
                        }
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// Detaches γ and β so the layer contributes no trainable parameters.
    pub fn frozen(&self) -> BatchNorm {
        BatchNorm {
            gamma: self.gamma.detach(),
            beta: self.beta.detach(),
            ..self.clone()
        }
    }
}

fn resolve_valid(valid: Option<&[bool]>, outer: usize) -> Result<Vec<bool>> {
    match valid {
        Some(v) if v.len() != outer => Err(Error::shape("batch_norm mask", &[outer], &[v.len()])),
        Some(v) => Ok(v.to_vec()),
        None => Ok(vec![true; outer]),
    }
}
