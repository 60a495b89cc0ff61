//! Shared-KQV scaled dot-product attention, Group Shuffle Attention (GSA)
//! and the Set Attention Transformer (an `L`-layer GSA stack).
//!
//! Sets are processed as row blocks of a matrix. A [`SetLayout`] describes how
//! the rows of a (possibly padded) batch matrix split into bags; attention never
//! crosses a bag boundary and padded rows neither attend nor are attended to.
//! Nothing here depends on row order inside a bag, so every layer is
//! permutation equivariant over the set axis.

use rand_chacha::ChaCha8Rng;

use crate::activation::{softmax_backward_row, softmax_in_place, softmax_rows, Activation};
use crate::error::{Error, Result};
use crate::module::{join, Module, Slot};
use crate::norm::{BatchNorm, Mode};
use crate::ops::{add, matmul, mul, permute_cols, scale, sub, transpose};
use crate::rng::normal_param;
use crate::tensor::Tensor;

/// Row layout of a batch of bags padded to a common size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SetLayout {
    n_max: usize,
    lengths: Vec<usize>,
}

impl SetLayout {
    pub fn single(n: usize) -> Result<Self> {
        Self::padded(&[n])
    }

    pub fn padded(lengths: &[usize]) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(Error::EmptySet);
        }
        Ok(SetLayout {
            n_max: *lengths.iter().max().expect("nonempty"),
            lengths: lengths.to_vec(),
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    pub fn bags(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.n_max * self.lengths.len()
    }

    /// Matrix row of instance `i` of bag `b`.
    pub fn row(&self, b: usize, i: usize) -> usize {
        b * self.n_max + i
    }

    pub fn valid(&self) -> Vec<bool> {
        self.lengths
            .iter()
            .flat_map(|&n| (0..self.n_max).map(move |i| i < n))
            .collect()
    }

    pub fn is_padded(&self) -> bool {
        self.lengths.iter().any(|&n| n < self.n_max)
    }
}

/// `softmax(x·xᵀ/√c)·σ(x)` for one set `x: [N × c]`, composed from
/// primitive differentiable operations.
pub fn scaled_dot_attn(x: &Tensor, sigma: Activation) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    let scores = scale(&matmul(x, &transpose(x)?)?, 1.0 / (c as f64).sqrt());
    matmul(&softmax_rows(&scores)?, &sigma.apply(x))
}

fn check_groups(c: usize, groups: usize) -> Result<usize> {
    if groups == 0 || !c.is_multiple_of(groups) {
        return Err(Error::config(format!("channel count {c} is not divisible by group count {groups}")));
    }
    Ok(c / groups)
}

/// In-group attention over every bag of `layout`: the columns of `z` split into
/// `groups` blocks of width `c_g`, and each block of each bag is attended
/// independently with scale `1/√c_g`. Padded rows produce zeros.
pub fn set_attention(z: &Tensor, groups: usize, layout: &SetLayout, sigma: Activation) -> Result<Tensor> {
    let (rows, c) = z.dims2()?;
    if rows != layout.rows() {
        return Err(Error::shape("set_attention", z.shape(), &[layout.rows(), c]));
    }
    let cg = check_groups(c, groups)?;
    let inv_sqrt = 1.0 / (cg as f64).sqrt();
    let zd = z.data();
    let mut out = vec![0.0; rows * c];
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(layout.bags() * groups);
    for (b, &n) in layout.lengths().iter().enumerate() {
        let r0 = layout.row(b, 0);
        for gi in 0..groups {
            let col0 = gi * cg;
            let at = |i: usize, a: usize| zd[(r0 + i) * c + col0 + a];
            let mut attn = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    attn[i * n + j] = (0..cg).map(|a| at(i, a) * at(j, a)).sum::<f64>() * inv_sqrt;
                }
                softmax_in_place(&mut attn[i * n..(i + 1) * n]);
            }
            for i in 0..n {
                for a in 0..cg {
                    out[(r0 + i) * c + col0 + a] = (0..n).map(|j| attn[i * n + j] * sigma.value(at(j, a))).sum();
                }
            }
            weights.push(attn);
        }
    }

    let zc = z.clone();
    let layout = layout.clone();
    Ok(Tensor::from_op(
        out,
        vec![rows, c],
        vec![z.clone()],
        Box::new(move |g| {
            let zd = zc.data();
            let mut dz = vec![0.0; rows * c];
            let mut blocks = weights.iter();
            for (b, &n) in layout.lengths().iter().enumerate() {
                let r0 = layout.row(b, 0);
                for gi in 0..groups {
                    let attn = blocks.next().expect("one block per bag and group");
                    let col0 = gi * cg;
                    let idx = |i: usize, a: usize| (r0 + i) * c + col0 + a;
                    let mut da = vec![0.0; n * n];
                    for i in 0..n {
                        for j in 0..n {
                            da[i * n + j] = (0..cg).map(|a| g[idx(i, a)] * sigma.value(zd[idx(j, a)])).sum();
                        }
                    }
                    let mut ds = vec![0.0; n * n];
                    for i in 0..n {
                        softmax_backward_row(
                            &attn[i * n..(i + 1) * n],
                            &da[i * n..(i + 1) * n],
                            &mut ds[i * n..(i + 1) * n],
                        );
                    }
                    for i in 0..n {
                        for a in 0..cg {
                            let via_scores: f64 = (0..n).map(|j| (ds[i * n + j] + ds[j * n + i]) * zd[idx(j, a)]).sum();
                            let dv: f64 = (0..n).map(|j| attn[j * n + i] * g[idx(j, a)]).sum();
                            dz[idx(i, a)] = via_scores * inv_sqrt + dv * sigma.derivative(zd[idx(i, a)]);
                        }
                    }
                }
            }
            vec![Some(dz)]
        }),
    ))
}

/// Column permutation of the channel shuffle: viewing a row's `c` channels as
/// a `g × (c/g)` grid, output channel `a·g + i` is input channel `i·(c/g) + a`.
pub fn shuffle_permutation(c: usize, groups: usize) -> Result<Vec<usize>> {
    let cg = check_groups(c, groups)?;
    let mut perm = vec![0; c];
    for i in 0..groups {
        for a in 0..cg {
            perm[a * groups + i] = i * cg + a;
        }
    }
    Ok(perm)
}

pub fn channel_shuffle(x: &Tensor, groups: usize) -> Result<Tensor> {
    let (_, c) = x.dims2()?;
    permute_cols(x, &shuffle_permutation(c, groups)?)
}

/// Block-diagonal product: group `i` of the columns is multiplied by
/// `weights[i]` (each `c_g × c_g`).
pub fn group_linear(x: &Tensor, weights: &[Tensor]) -> Result<Tensor> {
    let (rows, c) = x.dims2()?;
    let groups = weights.len();
    let cg = check_groups(c, groups)?;
    if let Some(w) = weights.iter().find(|w| w.shape() != [cg, cg]) {
        return Err(Error::shape("group_linear", x.shape(), w.shape()));
    }
    let xd = x.data();
    let mut out = vec![0.0; rows * c];
    for (gi, w) in weights.iter().enumerate() {
        let wd = w.data();
        let col0 = gi * cg;
        for r in 0..rows {
            let xr = &xd[r * c + col0..r * c + col0 + cg];
            let or = &mut out[r * c + col0..r * c + col0 + cg];
            for (a, &xv) in xr.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (o, wv) in or.iter_mut().zip(&wd[a * cg..(a + 1) * cg]) {
                    *o += xv * wv;
                }
            }
        }
    }
    let mut parents = vec![x.clone()];
    parents.extend(weights.iter().cloned());
    let xc = x.clone();
    let ws = weights.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![rows, c],
        parents,
        Box::new(move |g| {
            let xd = xc.data();
            let mut dx = xc.requires_grad().then(|| vec![0.0; rows * c]);
            let mut grads = Vec::with_capacity(groups + 1);
            let mut dws = Vec::with_capacity(groups);
            for (gi, w) in ws.iter().enumerate() {
                let wd = w.data();
                let col0 = gi * cg;
                let mut dw = w.requires_grad().then(|| vec![0.0; cg * cg]);
                for r in 0..rows {
                    let gr = &g[r * c + col0..r * c + col0 + cg];
                    if let Some(dx) = dx.as_mut() {
                        for a in 0..cg {
                            dx[r * c + col0 + a] += (0..cg).map(|b| gr[b] * wd[a * cg + b]).sum::<f64>();
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        for a in 0..cg {
                            let xv = xd[r * c + col0 + a];
                            for b in 0..cg {
                                dw[a * cg + b] += xv * gr[b];
                            }
                        }
                    }
                }
                dws.push(dw);
            }
            grads.push(dx);
            grads.extend(dws);
            grads
        }),
    ))
}

/// One Group Shuffle Attention layer:
/// `BN(ψ(concat_i Attn(X⁽ⁱ⁾Wᵢ)) + X)`.
#[derive(Debug, Clone)]
pub struct GsaLayer {
    pub weights: Vec<Tensor>,
    pub bn: BatchNorm,
    pub sigma: Activation,
    fault: bool,
}

impl GsaLayer {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, groups: usize, sigma: Activation) -> Result<Self> {
        let cg = check_groups(channels, groups)?;
        let std = (1.0 / cg as f64).sqrt();
        Ok(GsaLayer {
            weights: (0..groups).map(|_| normal_param(rng, &[cg, cg], std)).collect(),
            bn: BatchNorm::new(channels),
            sigma,
            fault: false,
        })
    }

    /// All group weights set to the identity.
    pub fn identity(channels: usize, groups: usize, sigma: Activation) -> Result<Self> {
        let cg = check_groups(channels, groups)?;
        let eye = Tensor::eye(cg);
        Ok(GsaLayer {
            weights: (0..groups)
                .map(|_| Tensor::param(eye.data().to_vec(), &[cg, cg]))
                .collect::<Result<_>>()?,
            bn: BatchNorm::new(channels),
            sigma,
            fault: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.bn.channels()
    }

    pub fn groups(&self) -> usize {
        self.weights.len()
    }

    /// Number of projection parameters (`c²/g`).
    pub fn projection_params(&self) -> usize {
        self.weights.iter().map(Tensor::numel).sum()
    }

    pub fn forward(&mut self, x: &Tensor, layout: &SetLayout, mode: Mode) -> Result<Tensor> {
        let (_, c) = x.dims2()?;
        if c != self.channels() {
            return Err(Error::config(format!("GSA layer of width {} got input width {c}", self.channels())));
        }
        let z = group_linear(x, &self.weights)?;
        let attended = set_attention(&z, self.groups(), layout, self.sigma)?;
        let mut shuffled = channel_shuffle(&attended, self.groups())?;
        if self.fault {
            shuffled = corrupt_first_row(&shuffled)?;
        }
        let residual = add(&shuffled, x)?;
        self.bn.forward_masked(&residual, mode, Some(&layout.valid()))
    }
}

/// Swaps the first two channels of matrix row 0 only. Row-position dependent,
/// so it breaks permutation equivariance; used as a negative control.
fn corrupt_first_row(x: &Tensor) -> Result<Tensor> {
    let (rows, c) = x.dims2()?;
    if c < 2 {
        return Ok(x.clone());
    }
    let mut swap: Vec<usize> = (0..c).collect();
    swap.swap(0, 1);
    let mut mask = vec![0.0; rows * c];
    mask[..c].iter_mut().for_each(|v| *v = 1.0);
    let mask = Tensor::new(mask, &[rows, c])?;
    add(x, &mul(&sub(&permute_cols(x, &swap)?, x)?, &mask)?)
}

impl Module for GsaLayer {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        for (j, w) in self.weights.iter_mut().enumerate() {
            f(join(prefix, &format!("group{j}.W")), Slot::Param(w));
        }
        f(join(prefix, "bn"), Slot::Norm(&mut self.bn));
    }
}

/// Single-set GSA forward.
pub fn gsa_forward(x: &Tensor, layer: &mut GsaLayer, mode: Mode) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    layer.forward(x, &SetLayout::single(n)?, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SatConfig {
    pub layers: usize,
    pub hidden: usize,
    pub groups: usize,
    pub sigma: Activation,
}

impl Default for SatConfig {
    fn default() -> Self {
        SatConfig {
            layers: 3,
            hidden: 256,
            groups: 8,
            sigma: Activation::Elu,
        }
    }
}

impl SatConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("SAT hidden width must be positive"));
        }
        check_groups(self.hidden, self.groups).map(|_| ())
    }
}

/// Set Attention Transformer: `L` stacked GSA layers of width `H`.
#[derive(Debug, Clone)]
pub struct Sat {
    pub config: SatConfig,
    pub layers: Vec<GsaLayer>,
}

impl Sat {
    pub fn new(rng: &mut ChaCha8Rng, config: SatConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|_| GsaLayer::new(rng, config.hidden, config.groups, config.sigma))
            .collect::<Result<_>>()?;
        Ok(Sat { config, layers })
    }

    pub fn forward(&mut self, x: &Tensor, layout: &SetLayout, mode: Mode) -> Result<Tensor> {
        let (_, c) = x.dims2()?;
        if c != self.config.hidden {
            return Err(Error::config(format!("SAT of width {} got input width {c}", self.config.hidden)));
        }
        self.layers.iter_mut().try_fold(x.clone(), |h, layer| layer.forward(&h, layout, mode))
    }

    /// Negative-control hook: corrupts the channel shuffle so that it depends
    /// on row position.
    #[doc(hidden)]
    pub fn inject_shuffle_fault(&mut self, on: bool) {
        self.layers.iter_mut().for_each(|l| l.fault = on);
    }
}

impl Module for Sat {
    fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, Slot<'a>)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("layer{i}")), f);
        }
    }
}

/// Single-set SAT forward; returns one refined row per instance.
pub fn sat_forward(x: &Tensor, sat: &mut Sat, mode: Mode) -> Result<Tensor> {
    let (n, _) = x.dims2()?;
    sat.forward(x, &SetLayout::single(n)?, mode)
}

/// Multi-head attention projections (query, key, value, output), kept only as
/// a parameter-count reference.
#[derive(Debug, Clone)]
pub struct MhaReference {
    pub projections: [Tensor; 4],
}

impl MhaReference {
    pub fn new(channels: usize) -> Self {
        let p = || Tensor::param(vec![0.0; channels * channels], &[channels, channels]).expect("nonzero width");
        MhaReference {
            projections: [p(), p(), p(), p()],
        }
    }

    pub fn projection_params(&self) -> usize {
        self.projections.iter().map(Tensor::numel).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub mha: usize,
    pub gsa: usize,
}

impl ParamCounts {
    pub fn ratio(&self) -> f64 {
        self.mha as f64 / self.gsa as f64
    }
}

/// Counts the instantiated projection buffers of an MHA reference and a GSA
/// layer of the same width.
pub fn param_count_ratio(channels: usize, groups: usize) -> Result<ParamCounts> {
    let gsa = GsaLayer::identity(channels, groups, Activation::Elu)?;
    Ok(ParamCounts {
        mha: MhaReference::new(channels).projection_params(),
        gsa: gsa.projection_params(),
    })
}
