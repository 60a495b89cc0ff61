//! Elementwise non-linearities and the row softmax.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Non-linearity selectable wherever a layer needs one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Elu,
    LeakyRelu(f64),
    Identity,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            // slope-1 branch at exactly zero
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    x
                } else {
                    alpha * x
                }
            }
            Activation::Identity => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Activation::LeakyRelu(alpha) => {
                if x >= 0.0 {
                    1.0
                } else {
                    alpha
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply(self, x: &Tensor) -> Tensor {
        let out = x.data().iter().map(|&v| self.value(v)).collect();
        let xc = x.clone();
        Tensor::from_op(
            out,
            x.shape().to_vec(),
            vec![x.clone()],
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(xc.data()).map(|(g, &v)| g * self.derivative(v)).collect(),
                )]
            }),
        )
    }

    pub fn name(self) -> String {
        match self {
            Activation::Elu => "elu".into(),
            Activation::LeakyRelu(a) => format!("leaky_relu:{a}"),
            Activation::Identity => "identity".into(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "identity" => Ok(Activation::Identity),
            "leaky_relu" => Ok(Activation::LeakyRelu(0.1)),
            other => match other.strip_prefix("leaky_relu:") {
                Some(a) => a
                    .parse()
                    .map(Activation::LeakyRelu)
                    .map_err(|_| Error::config(format!("bad leaky_relu slope in {other:?}"))),
                None => Err(Error::config(format!("unknown activation {other:?}"))),
            },
        }
    }
}

pub fn leaky_relu(x: &Tensor, alpha: f64) -> Tensor {
    Activation::LeakyRelu(alpha).apply(x)
}

pub fn elu(x: &Tensor) -> Tensor {
    Activation::Elu.apply(x)
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| sigmoid_value(v)).collect();
    let y = out.clone();
    Tensor::from_op(
        out,
        x.shape().to_vec(),
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.iter().zip(&y).map(|(g, s)| g * s * (1.0 - s)).collect())]),
    )
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid_value(x)
}

/// Softmax of one row in place, with max subtraction.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Backward of a row softmax: `dS = A ⊙ (dA − Σ dA⊙A)` per row.
pub(crate) fn softmax_backward_row(a: &[f64], da: &[f64], ds: &mut [f64]) {
    let dot: f64 = a.iter().zip(da).map(|(a, d)| a * d).sum();
    for ((s, &a), &d) in ds.iter_mut().zip(a).zip(da) {
        *s += a * (d - dot);
    }
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    if let Some(i) = x.data().iter().position(|v| v.is_nan()) {
        return Err(Error::NumericDomain(format!("softmax input has NaN at row {}, column {}", i / m, i % m)));
    }
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(m) {
        softmax_in_place(row);
    }
    let y = out.clone();
    Ok(Tensor::from_op(
        out,
        vec![n, m],
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; n * m];
            for ((a, da), ds) in y.chunks(m).zip(g.chunks(m)).zip(gx.chunks_mut(m)) {
                softmax_backward_row(a, da, ds);
            }
            vec![Some(gx)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::ops::{mul, sum};
    use proptest::prelude::*;

    #[test]
    fn leaky_relu_negative_side() {
        let x = Tensor::new(vec![-2.0], &[1]).unwrap();
        assert!((leaky_relu(&x, 0.1).data()[0] + 0.2).abs() < 1e-15);
    }

    #[test]
    fn fixed_points() {
        let z = Tensor::new(vec![0.0], &[1]).unwrap();
        assert_eq!(elu(&z).data(), &[0.0]);
        assert_eq!(sigmoid(&z).data(), &[0.5]);
    }

    #[test]
    fn elu_at_minus_one() {
        let x = Tensor::new(vec![-1.0], &[1]).unwrap();
        let expected = (-1.0f64).exp() - 1.0;
        assert!((elu(&x).data()[0] - expected).abs() < 1e-15);
        assert!((elu(&x).data()[0] + 0.6321).abs() < 1e-4);
    }

    #[test]
    fn leaky_relu_takes_unit_slope_at_zero() {
        assert_eq!(Activation::LeakyRelu(0.1).derivative(0.0), 1.0);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);

        let s = softmax_rows(&Tensor::from_rows(&[vec![1000.0; 3]]).unwrap()).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap()).unwrap();
        // e/(e + 1/e) evaluated independently
        let e = std::f64::consts::E;
        let p = e / (e + 1.0 / e);
        assert!((s.data()[0] - p).abs() < 1e-15);
        assert!((s.data()[0] - 0.8808).abs() < 1e-4);
        assert!((s.data()[1] - 0.1192).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::from_rows(&[vec![0.0, f64::NAN]]).unwrap();
        assert!(matches!(softmax_rows(&x), Err(Error::NumericDomain(_))));
    }

    #[test]
    fn activation_round_trips_through_names() {
        for a in [Activation::Elu, Activation::LeakyRelu(0.1), Activation::Identity] {
            assert_eq!(Activation::parse(&a.name()).unwrap(), a);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 5), 1..6)) {
            let s = softmax_rows(&Tensor::from_rows(&rows).unwrap()).unwrap();
            for row in s.data().chunks(5) {
                prop_assert!(row.iter().all(|&v| v >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn activations_pass_grad_check(vals in proptest::collection::vec(-3.0f64..3.0, 6), w in proptest::collection::vec(-1.0f64..1.0, 6)) {
            // keep leaky relu inputs away from the kink
            let vals: Vec<f64> = vals.iter().map(|v| if v.abs() < 1e-3 { v + 0.01 } else { *v }).collect();
            let x = Tensor::new(vals, &[2, 3]).unwrap();
            let wt = Tensor::new(w, &[2, 3]).unwrap();
            let fs: [&dyn Fn(&Tensor) -> Tensor; 4] = [
                &|t| leaky_relu(t, 0.1),
                &elu,
                &sigmoid,
                &|t| softmax_rows(t).unwrap(),
            ];
            for f in fs {
                let err = grad_check(|t| Ok(sum(&mul(&f(t), &wt)?)), &x, 1e-5).unwrap();
                prop_assert!(err < 1e-4, "{}", err);
            }
        }
    }
}
