//! Differentiable linear-algebra, arithmetic and shape operations.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// `a[m×k] · b[k×n]` into a preallocated `out[m×n]` (accumulating).
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ` accumulated into `out[m×n]`.
pub(crate) fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `a[k×m]ᵀ · b[k×n]` accumulated into `out[m×n]`.
pub(crate) fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], k: usize, m: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    let (k2, n) = b.dims2().map_err(|_| Error::shape("matmul", a.shape(), b.shape()))?;
    if k != k2 {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = vec![0.0; m * n];
    gemm_acc(a.data(), b.data(), &mut out, m, k, n);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        vec![m, n],
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![0.0; m * k];
                gemm_nt_acc(g, bc.data(), &mut ga, m, n, k);
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![0.0; k * n];
                gemm_tn_acc(ac.data(), g, &mut gb, m, k, n);
                gb
            });
            vec![ga, gb]
        }),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![c, r],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(ga)]
        }),
    ))
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("sub", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(|g| vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]),
    ))
}

/// Elementwise (Hadamard) product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    let out = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = g.iter().zip(bc.data()).map(|(g, y)| g * y).collect();
            let gb = g.iter().zip(ac.data()).map(|(g, x)| g * x).collect();
            vec![Some(ga), Some(gb)]
        }),
    ))
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    let out = a.data().iter().map(|x| x * s).collect();
    Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().map(|v| v * s).collect())]),
    )
}

pub fn square(a: &Tensor) -> Tensor {
    let out = a.data().iter().map(|x| x * x).collect();
    let ac = a.clone();
    Tensor::from_op(
        out,
        a.shape().to_vec(),
        vec![a.clone()],
        Box::new(move |g| vec![Some(g.iter().zip(ac.data()).map(|(g, x)| 2.0 * g * x).collect())]),
    )
}

/// Adds a length-`m` bias to every row of an `n×m` matrix.
pub fn add_row_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (n, m) = a.dims2()?;
    if bias.numel() != m {
        return Err(Error::shape("add_row_bias", a.shape(), bias.shape()));
    }
    let b = bias.data();
    let out = a.data().chunks(m).flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y)).collect();
    Ok(Tensor::from_op(
        out,
        vec![n, m],
        vec![a.clone(), bias.clone()],
        Box::new(move |g| {
            let mut gb = vec![0.0; m];
            for row in g.chunks(m) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
            vec![Some(g.to_vec()), Some(gb)]
        }),
    ))
}

pub fn sum(a: &Tensor) -> Tensor {
    let n = a.numel();
    Tensor::from_op(
        vec![a.data().iter().sum()],
        Vec::new(),
        vec![a.clone()],
        Box::new(move |g| vec![Some(vec![g[0]; n])]),
    )
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel() as f64;
    scale(&sum(a), 1.0 / n)
}

/// Row gather: `out[i] = a[index[i]]`. Indices may repeat.
pub fn gather_rows(a: &Tensor, index: &[usize]) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if index.is_empty() {
        return Err(Error::EmptySet);
    }
    if let Some(&bad) = index.iter().find(|&&i| i >= r) {
        return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
    }
    let src = a.data();
    let out = index.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
    let index = index.to_vec();
    let n = index.len();
    Ok(Tensor::from_op(
        out,
        vec![n, c],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; r * c];
            for (k, &i) in index.iter().enumerate() {
                ga[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]).for_each(|(a, b)| *a += b);
            }
            vec![Some(ga)]
        }),
    ))
}

/// Places row `i` of `a` at row `dest[i]` of a zero matrix with `rows` rows.
/// Destinations must be distinct.
pub fn scatter_rows(a: &Tensor, dest: &[usize], rows: usize) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if dest.len() != r {
        return Err(Error::shape("scatter_rows", a.shape(), &[dest.len()]));
    }
    let mut used = vec![false; rows];
    for &d in dest {
        if d >= rows || std::mem::replace(&mut used[d], true) {
            return Err(Error::Contract(format!("invalid scatter destination {d}")));
        }
    }
    let mut out = vec![0.0; rows * c];
    for (i, &d) in dest.iter().enumerate() {
        out[d * c..(d + 1) * c].copy_from_slice(&a.data()[i * c..(i + 1) * c]);
    }
    let dest = dest.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![rows, c],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; r * c];
            for (i, &d) in dest.iter().enumerate() {
                ga[i * c..(i + 1) * c].copy_from_slice(&g[d * c..(d + 1) * c]);
            }
            vec![Some(ga)]
        }),
    ))
}

pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptySet)?;
    let (_, c) = first.dims2()?;
    let mut rows = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, pc) = p.dims2()?;
        if pc != c {
            return Err(Error::shape("concat_rows", first.shape(), p.shape()));
        }
        rows.push(r);
    }
    let out: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    let total = rows.iter().sum();
    Ok(Tensor::from_op(
        out,
        vec![total, c],
        parts.to_vec(),
        Box::new(move |g| {
            let mut off = 0;
            rows.iter()
                .map(|&r| {
                    let s = g[off..off + r * c].to_vec();
                    off += r * c;
                    Some(s)
                })
                .collect()
        }),
    ))
}

fn axis1_layout(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [outer, mid, rest @ ..] => Ok((*outer, *mid, numel(rest))),
        other => Err(Error::Contract(format!("axis-1 operation on rank-{} tensor", other.len()))),
    }
}

/// Concatenates along axis 1 (matrix columns, or channels of `[n, c, ...]`).
pub fn concat_axis1(parts: &[Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptySet)?;
    let (outer, _, inner) = axis1_layout(first)?;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (o, m, i) = axis1_layout(p)?;
        if o != outer || i != inner || p.shape()[2..] != first.shape()[2..] {
            return Err(Error::shape("concat_axis1", first.shape(), p.shape()));
        }
        widths.push(m);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &m) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[o * m * inner..(o + 1) * m * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[1] = total;
    Ok(Tensor::from_op(
        out,
        shape,
        parts.to_vec(),
        Box::new(move |g| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|&m| Vec::with_capacity(outer * m * inner)).collect();
            for o in 0..outer {
                let mut off = o * total * inner;
                for (gp, &m) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + m * inner]);
                    off += m * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }),
    ))
}

/// Selects `len` entries of axis 1 starting at `start`.
pub fn slice_axis1(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (outer, m, inner) = axis1_layout(a)?;
    if len == 0 || start + len > m {
        return Err(Error::Contract(format!("slice {start}..{} out of range for axis of {m}", start + len)));
    }
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * m + start) * inner;
        out.extend_from_slice(&a.data()[base..base + len * inner]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = len;
    Ok(Tensor::from_op(
        out,
        shape,
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; outer * m * inner];
            for o in 0..outer {
                let base = (o * m + start) * inner;
                ga[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(ga)]
        }),
    ))
}

/// Column permutation: `out[:, j] = a[:, perm[j]]`. `perm` must be a bijection.
pub fn permute_cols(a: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (r, c) = a.dims2()?;
    if perm.len() != c {
        return Err(Error::shape("permute_cols", a.shape(), &[perm.len()]));
    }
    let mut hit = vec![false; c];
    for &p in perm {
        if p >= c || std::mem::replace(&mut hit[p], true) {
            return Err(Error::Contract(format!("column map {perm:?} is not a permutation")));
        }
    }
    let src = a.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for (j, &p) in perm.iter().enumerate() {
            out[i * c + j] = src[i * c + p];
        }
    }
    let perm = perm.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![r, c],
        vec![a.clone()],
        Box::new(move |g| {
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for (j, &p) in perm.iter().enumerate() {
                    ga[i * c + p] = g[i * c + j];
                }
            }
            vec![Some(ga)]
        }),
    ))
}
