//! 3D convolution and pooling over `[n, c, d, h, w]` tensors.

use crate::error::{Error, Result};
use crate::ops::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    n: usize,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    din: [usize; 3],
    dout: [usize; 3],
}

impl Geometry {
    fn in_vol(&self) -> usize {
        self.din.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.dout.iter().product()
    }

    fn patch(&self) -> usize {
        self.ci * self.k * self.k * self.k
    }

    /// Lowers one sample into a `[ci·k³ × out_vol]` column matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let [d, h, w] = self.din;
        let [od, oh, ow] = self.dout;
        let ov = self.out_vol();
        let k = self.k;
        for c in 0..self.ci {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let dst = &mut cols[row * ov..(row + 1) * ov];
                        for z in 0..od {
                            let iz = (z * self.stride + kz) as isize - self.pad as isize;
                            for y in 0..oh {
                                let iy = (y * self.stride + ky) as isize - self.pad as isize;
                                for xo in 0..ow {
                                    let ix = (xo * self.stride + kx) as isize - self.pad as isize;
                                    let inside = iz >= 0
                                        && iy >= 0
                                        && ix >= 0
                                        && (iz as usize) < d
                                        && (iy as usize) < h
                                        && (ix as usize) < w;
                                    dst[(z * oh + y) * ow + xo] = if inside {
                                        x[((c * d + iz as usize) * h + iy as usize) * w + ix as usize]
                                    } else {
                                        0.0
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Geometry::im2col`], accumulating into `dx`.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let [d, h, w] = self.din;
        let [od, oh, ow] = self.dout;
        let ov = self.out_vol();
        let k = self.k;
        for c in 0..self.ci {
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let row = ((c * k + kz) * k + ky) * k + kx;
                        let src = &cols[row * ov..(row + 1) * ov];
                        for z in 0..od {
                            let iz = (z * self.stride + kz) as isize - self.pad as isize;
                            if iz < 0 || iz as usize >= d {
                                continue;
                            }
                            for y in 0..oh {
                                let iy = (y * self.stride + ky) as isize - self.pad as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for xo in 0..ow {
                                    let ix = (xo * self.stride + kx) as isize - self.pad as isize;
                                    if ix < 0 || ix as usize >= w {
                                        continue;
                                    }
                                    dx[((c * d + iz as usize) * h + iy as usize) * w + ix as usize] +=
                                        src[(z * oh + y) * ow + xo];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x: [n, ci, d, h, w]` with cubic kernels
/// `weight: [co, ci, k, k, k]`, no bias.
pub fn conv3d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (&[n, ci, d, h, w], &[co, wci, k, k2, k3]) = (x.shape(), weight.shape()) else {
        return Err(Error::shape("conv3d", x.shape(), weight.shape()));
    };
    if wci != ci || k != k2 || k != k3 || stride == 0 {
        return Err(Error::shape("conv3d", x.shape(), weight.shape()));
    }
    let mut dout = [0; 3];
    for (o, &i) in dout.iter_mut().zip(&[d, h, w]) {
        if i + 2 * pad < k {
            return Err(Error::shape("conv3d: kernel larger than padded input", x.shape(), weight.shape()));
        }
        *o = (i + 2 * pad - k) / stride + 1;
    }
    let geo = Geometry {
        n,
        ci,
        co,
        k,
        stride,
        pad,
        din: [d, h, w],
        dout,
    };
    let (iv, ov, patch) = (geo.in_vol(), geo.out_vol(), geo.patch());
    let pointwise = k == 1 && stride == 1 && pad == 0;

    let mut out = vec![0.0; n * co * ov];
    let mut cols = if pointwise { Vec::new() } else { vec![0.0; patch * ov] };
    for s in 0..n {
        let xs = &x.data()[s * ci * iv..(s + 1) * ci * iv];
        let os = &mut out[s * co * ov..(s + 1) * co * ov];
        if pointwise {
            gemm_acc(weight.data(), xs, os, co, ci, ov);
        } else {
            geo.im2col(xs, &mut cols);
            gemm_acc(weight.data(), &cols, os, co, patch, ov);
        }
    }

    let (xc, wc) = (x.clone(), weight.clone());
    Ok(Tensor::from_op(
        out,
        vec![n, co, dout[0], dout[1], dout[2]],
        vec![x.clone(), weight.clone()],
        Box::new(move |g| {
            let mut dx = xc.requires_grad().then(|| vec![0.0; n * ci * iv]);
            let mut dw = wc.requires_grad().then(|| vec![0.0; co * patch]);
            let mut cols = vec![0.0; if pointwise { 0 } else { patch * ov }];
            let mut dcols = vec![0.0; if pointwise { 0 } else { patch * ov }];
            for s in 0..n {
                let gs = &g[s * co * ov..(s + 1) * co * ov];
                let xs = &xc.data()[s * ci * iv..(s + 1) * ci * iv];
                if pointwise {
                    if let Some(dw) = dw.as_mut() {
                        gemm_nt_acc(gs, xs, dw, co, ov, ci);
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm_tn_acc(wc.data(), gs, &mut dx[s * ci * iv..(s + 1) * ci * iv], co, ci, ov);
                    }
                } else {
                    if let Some(dw) = dw.as_mut() {
                        geo.im2col(xs, &mut cols);
                        gemm_nt_acc(gs, &cols, dw, co, ov, patch);
                    }
                    if let Some(dx) = dx.as_mut() {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn_acc(wc.data(), gs, &mut dcols, co, patch, ov);
                        geo.col2im(&dcols, &mut dx[s * ci * iv..(s + 1) * ci * iv]);
                    }
                }
            }
            vec![dx, dw]
        }),
    ))
}

/// Non-overlapping `f³` average pooling; every spatial extent must be a
/// multiple of `f`.
pub fn avg_pool3d(x: &Tensor, f: usize) -> Result<Tensor> {
    let &[n, c, d, h, w] = x.shape() else {
        return Err(Error::Contract(format!("avg_pool3d expects rank 5, got {:?}", x.shape())));
    };
    if f == 0 || d % f != 0 || h % f != 0 || w % f != 0 {
        return Err(Error::config(format!(
            "spatial extent {:?} not divisible by pooling factor {f}",
            &x.shape()[2..]
        )));
    }
    let (od, oh, ow) = (d / f, h / f, w / f);
    let norm = 1.0 / (f * f * f) as f64;
    let src = x.data();
    let mut out = vec![0.0; n * c * od * oh * ow];
    let index = move |plane: usize, z: usize, y: usize, xx: usize| ((plane * d + z) * h + y) * w + xx;
    for plane in 0..n * c {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    out[((plane * od + z / f) * oh + y / f) * ow + xx / f] += src[index(plane, z, y, xx)] * norm;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![n, c, od, oh, ow],
        vec![x.clone()],
        Box::new(move |g| {
            let mut dx = vec![0.0; n * c * d * h * w];
            for plane in 0..n * c {
                for z in 0..d {
                    for y in 0..h {
                        for xx in 0..w {
                            dx[index(plane, z, y, xx)] = g[((plane * od + z / f) * oh + y / f) * ow + xx / f] * norm;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Mean over all trailing axes: `[n, c, ...] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (n, c) = match x.shape() {
        [n, c, _, ..] => (*n, *c),
        other => return Err(Error::Contract(format!("global_avg_pool expects rank ≥ 3, got {other:?}"))),
    };
    let inner = x.numel() / (n * c);
    let out = x.data().chunks(inner).map(|p| p.iter().sum::<f64>() / inner as f64).collect();
    Ok(Tensor::from_op(
        out,
        vec![n, c],
        vec![x.clone()],
        Box::new(move |g| {
            let dx = g.iter().flat_map(|&v| std::iter::repeat_n(v / inner as f64, inner)).collect();
            vec![Some(dx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check_many;
    use crate::ops::{mul, sum};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape).unwrap()
    }

    /// Direct loop-nest reference (batch × out-channel × 3 output axes, then
    /// in-channel × 3 kernel axes).
    fn naive_conv3d(x: &Tensor, wt: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
        let &[n, ci, d, h, w] = x.shape() else { unreachable!() };
        let &[co, _, k, _, _] = wt.shape() else { unreachable!() };
        let od = (d + 2 * pad - k) / stride + 1;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * co * od * oh * ow];
        for s in 0..n {
            for o in 0..co {
                for z in 0..od {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for c in 0..ci {
                                for kz in 0..k {
                                    for ky in 0..k {
                                        for kx in 0..k {
                                            let iz = (z * stride + kz) as isize - pad as isize;
                                            let iy = (y * stride + ky) as isize - pad as isize;
                                            let ix = (xx * stride + kx) as isize - pad as isize;
                                            if iz < 0 || iy < 0 || ix < 0 {
                                                continue;
                                            }
                                            let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                            if iz >= d || iy >= h || ix >= w {
                                                continue;
                                            }
                                            acc += x.data()[(((s * ci + c) * d + iz) * h + iy) * w + ix]
                                                * wt.data()[(((o * ci + c) * k + kz) * k + ky) * k + kx];
                                        }
                                    }
                                }
                            }
                            out[(((s * co + o) * od + z) * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_sums_neighbourhood() {
        let x = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        let y = conv3d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data(), &[27.0]);
    }

    #[test]
    fn pointwise_kernel_only_mixes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, &[2, 2, 3, 3, 3]);
        // swap the two channels
        let w = Tensor::new(vec![0.0, 1.0, 1.0, 0.0], &[2, 2, 1, 1, 1]).unwrap();
        let y = conv3d(&x, &w, 1, 0).unwrap();
        for s in 0..2 {
            let xs = &x.data()[s * 54..(s + 1) * 54];
            let ys = &y.data()[s * 54..(s + 1) * 54];
            assert_eq!(&ys[..27], &xs[27..]);
            assert_eq!(&ys[27..], &xs[..27]);
        }
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let x = Tensor::zeros(&[1, 1, 2, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 3, 3, 3]);
        assert!(matches!(conv3d(&x, &w, 1, 0), Err(Error::Shape { .. })));
        assert!(conv3d(&x, &w, 1, 1).is_ok());
    }

    #[test]
    fn matches_naive_reference_on_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let n = rng.random_range(1..3);
            let ci = rng.random_range(1..4);
            let co = rng.random_range(1..4);
            let k = [1, 2, 3][rng.random_range(0..3)];
            let stride = rng.random_range(1..3);
            let pad = rng.random_range(0..2);
            let d = rng.random_range(k.max(2)..6);
            let x = random(&mut rng, &[n, ci, d, d + 1, d]);
            let w = random(&mut rng, &[co, ci, k, k, k]);
            let fast = conv3d(&x, &w, stride, pad).unwrap();
            let slow = naive_conv3d(&x, &w, stride, pad);
            for (a, b) in fast.data().iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn conv_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (2, 2, 0)] {
            let x = random(&mut rng, &[2, 2, 4, 4, 4]);
            let w = random(&mut rng, &[3, 2, k, k, k]);
            let probe_shape = conv3d(&x, &w, stride, pad).unwrap().shape().to_vec();
            let probe = random(&mut rng, &probe_shape);
            let r = grad_check_many(|ts| Ok(sum(&mul(&conv3d(&ts[0], &ts[1], stride, pad)?, &probe)?)), &[x, w], 1e-5)
                .unwrap();
            assert!(r.max_rel_error < 1e-7, "k={k}: {r:?}");
        }
        let x = random(&mut rng, &[1, 2, 4, 4, 2]);
        let probe = random(&mut rng, &[1, 2, 2, 2, 1]);
        let r = grad_check_many(|ts| Ok(sum(&mul(&avg_pool3d(&ts[0], 2)?, &probe)?)), std::slice::from_ref(&x), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7);
        let probe = random(&mut rng, &[1, 2]);
        let r = grad_check_many(|ts| Ok(sum(&mul(&global_avg_pool(&ts[0])?, &probe)?)), &[x], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-7);
    }

    #[test]
    fn pooling_keeps_constants() {
        let x = Tensor::full(&[1, 3, 4, 4, 4], 0.75);
        let p = avg_pool3d(&x, 2).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2, 2, 2]);
        assert!(p.data().iter().all(|v| (*v - 0.75).abs() < 1e-15));
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.shape(), &[1, 3]);
        assert!(g.data().iter().all(|v| (*v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn odd_extent_cannot_pool() {
        let x = Tensor::zeros(&[1, 1, 3, 4, 4]);
        assert!(matches!(avg_pool3d(&x, 2), Err(Error::Config(_))));
    }
}
