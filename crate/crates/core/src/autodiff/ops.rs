use crate::error::{Error, Result};
use crate::scalar::{count, Real};

use super::backward::split_axis;
use super::tensor::{Op, Tensor};

impl<T: Real> Tensor<T> {
    fn check_same_shape(&self, other: &Tensor<T>, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "div")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a / b)
            .collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Div(self.clone(), other.clone()),
        ))
    }

    pub fn neg(&self) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| -v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Neg(self.clone()))
    }

    pub fn exp(&self) -> Tensor<T> {
        let y: Vec<T> = self.data().iter().map(|v| v.exp()).collect();
        let shape = self.shape().to_vec();
        if self.tracked() {
            let op = Op::Exp {
                x: self.clone(),
                y: y.clone(),
            };
            Tensor::from_op(shape, y, op)
        } else {
            Tensor::leaf(shape, y)
        }
    }

    /// Natural log; every element must be strictly positive.
    pub fn ln(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain {
                op: "ln",
                msg: "log of a non-positive element".into(),
            });
        }
        let data: Vec<T> = self.data().iter().map(|v| v.ln()).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Ln(self.clone()),
        ))
    }

    /// Elementwise power with a fixed exponent. Negative bases are only
    /// allowed for integer exponents; a zero base with a negative exponent
    /// is rejected.
    pub fn powf(&self, exponent: T) -> Result<Tensor<T>> {
        let integral = exponent.fract() == T::zero();
        for &v in self.data().iter() {
            if v < T::zero() && !integral {
                return Err(Error::Domain {
                    op: "powf",
                    msg: format!("negative base {v} with non-integer exponent {exponent}"),
                });
            }
            if v == T::zero() && exponent < T::zero() {
                return Err(Error::Domain {
                    op: "powf",
                    msg: format!("zero base with negative exponent {exponent}"),
                });
            }
        }
        let data: Vec<T> = self.data().iter().map(|v| v.powf(exponent)).collect();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::Powf {
                x: self.clone(),
                exponent,
            },
        ))
    }

    pub fn clamp_min(&self, min: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v.max(min)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::ClampMin {
                x: self.clone(),
                min,
            },
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::Relu(self.clone()))
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v + s).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::AddScalar(self.clone()))
    }

    pub fn mul_scalar(&self, factor: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| v * factor).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            Op::MulScalar {
                x: self.clone(),
                factor,
            },
        )
    }

    /// `s - self`, elementwise. `rsub_scalar(1)` is the fuzzy negation.
    pub fn rsub_scalar(&self, s: T) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&v| s - v).collect();
        Tensor::from_op(self.shape().to_vec(), data, Op::RsubScalar(self.clone()))
    }

    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        Tensor::from_op(Vec::new(), vec![acc], Op::SumAll(self.clone()))
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc = acc + v;
        }
        let mean = acc / count::<T>(self.len());
        Tensor::from_op(Vec::new(), vec![mean], Op::MeanAll(self.clone()))
    }

    fn check_axis(&self, axis: usize, op: &'static str) -> Result<()> {
        if axis >= self.shape().len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        Ok(())
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let xd = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + xd[base + i];
                }
            }
        }
        drop(xd);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::SumAxis {
                x: self.clone(),
                axis,
            },
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis, "mean_axis")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let scale = T::one() / count::<T>(len);
        let xd = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + xd[base + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v * scale;
        }
        drop(xd);
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        Ok(Tensor::from_op(
            shape,
            out,
            Op::MeanAxis {
                x: self.clone(),
                axis,
            },
        ))
    }

    /// Softmax along `axis`, stabilised by max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        self.check_axis(axis, "softmax")?;
        let (outer, len, inner) = split_axis(self.shape(), axis);
        let xd = self.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let mut m = T::neg_infinity();
                for a in 0..len {
                    let v = xd[(o * len + a) * inner + i];
                    if v > m {
                        m = v;
                    }
                }
                let mut denom = T::zero();
                for a in 0..len {
                    let idx = (o * len + a) * inner + i;
                    let e = (xd[idx] - m).exp();
                    y[idx] = e;
                    denom = denom + e;
                }
                for a in 0..len {
                    let idx = (o * len + a) * inner + i;
                    y[idx] = y[idx] / denom;
                }
            }
        }
        drop(xd);
        let shape = self.shape().to_vec();
        if self.tracked() {
            let op = Op::Softmax {
                x: self.clone(),
                axis,
                y: y.clone(),
            };
            Ok(Tensor::from_op(shape, y, op))
        } else {
            Ok(Tensor::leaf(shape, y))
        }
    }

    /// Stacks scalar tensors into a rank-1 tensor of length `parts.len()`.
    pub fn stack_scalars(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(parts.len());
        for p in parts {
            if p.len() != 1 {
                return Err(Error::Contract(format!(
                    "stack_scalars: part with shape {:?} is not scalar",
                    p.shape()
                )));
            }
            data.push(p.value());
        }
        Ok(Tensor::from_op(
            vec![parts.len()],
            data,
            Op::StackScalars(parts.to_vec()),
        ))
    }

    /// Concatenates along axis 0; trailing dimensions must agree.
    pub fn concat_channels(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().is_empty()
            || other.shape().is_empty()
            || self.shape().len() != other.shape().len()
            || self.shape()[1..] != other.shape()[1..]
        {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data());
        data.extend_from_slice(&other.data());
        let mut shape = self.shape().to_vec();
        shape[0] += other.shape()[0];
        Ok(Tensor::from_op(
            shape,
            data,
            Op::ConcatChannels(self.clone(), other.clone()),
        ))
    }

    /// Extracts slice `index` along axis 0, dropping that axis.
    pub fn select_channel(&self, index: usize) -> Result<Tensor<T>> {
        if self.shape().is_empty() || index >= self.shape()[0] {
            return Err(Error::Contract(format!(
                "select_channel: index {index} out of range for shape {:?}",
                self.shape()
            )));
        }
        let plane: usize = self.shape()[1..].iter().product();
        let data = self.data()[index * plane..(index + 1) * plane].to_vec();
        Ok(Tensor::from_op(
            self.shape()[1..].to_vec(),
            data,
            Op::SelectChannel {
                x: self.clone(),
                index,
            },
        ))
    }

    /// Gathers flat indices into a rank-1 tensor. Duplicate indices are
    /// allowed; their gradients accumulate.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let n = self.len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!(
                "gather: index {bad} out of range for {n} elements"
            )));
        }
        let xd = self.data();
        let data: Vec<T> = indices.iter().map(|&i| xd[i]).collect();
        drop(xd);
        Ok(Tensor::from_op(
            vec![indices.len()],
            data,
            Op::Gather {
                x: self.clone(),
                indices: indices.to_vec(),
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn add_shape_mismatch() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::from_vec(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        assert!(matches!(
            a.add(&b),
            Err(Error::ShapeMismatch { op: "add", .. })
        ));
    }

    #[test]
    fn div_grad() {
        // d(a/b)/da = 1/b, d(a/b)/db = -a/b^2
        let a = Tensor::scalar_param(3.0f64);
        let b = Tensor::scalar_param(2.0f64);
        let y = a.div(&b).unwrap();
        y.backward().unwrap();
        assert_close(a.grad().unwrap()[0], 0.5, 1e-15);
        assert_close(b.grad().unwrap()[0], -0.75, 1e-15);
    }

    #[test]
    fn ln_rejects_non_positive() {
        let x = Tensor::from_vec(&[2], vec![1.0f64, 0.0]).unwrap();
        assert!(matches!(x.ln(), Err(Error::Domain { op: "ln", .. })));
    }

    #[test]
    fn powf_zero_base_fractional_exponent_subgradient() {
        let x = Tensor::param(&[2], vec![0.0f64, 4.0]).unwrap();
        let y = x.powf(0.5).unwrap().sum_all();
        y.backward().unwrap();
        let g = x.grad().unwrap();
        assert_eq!(g[0], 0.0, "kink at zero takes the zero subgradient");
        assert_close(g[1], 0.25, 1e-15);
    }

    #[test]
    fn clamp_min_boundary_subgradient_is_zero() {
        let x = Tensor::param(&[3], vec![-1.0f64, 0.0, 1.0]).unwrap();
        let y = x.clamp_min(0.0).sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_known_values() {
        // softmax([0, ln 3]) = [0.25, 0.75]
        let x = Tensor::from_vec(&[2], vec![0.0f64, 3.0f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap();
        let v = y.to_vec();
        assert_close(v[0], 0.25, 1e-12);
        assert_close(v[1], 0.75, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64) * 0.37 - 2.0).collect())
            .unwrap();
        let y = x.softmax(0).unwrap();
        let v = y.to_vec();
        for i in 0..4 {
            let s = v[i] + v[4 + i] + v[8 + i];
            assert_close(s, 1.0, 1e-12);
        }
    }

    #[test]
    fn softmax_grad_sums_to_zero() {
        // Softmax output sums to 1, so gradients along the axis sum to 0.
        let x = Tensor::param(&[3], vec![0.1f64, -0.4, 1.3]).unwrap();
        let y = x.softmax(0).unwrap();
        let picked = y.gather(&[2]).unwrap().sum_all();
        picked.backward().unwrap();
        let g = x.grad().unwrap();
        assert_close(g.iter().sum::<f64>(), 0.0, 1e-14);
    }

    #[test]
    fn sum_axis_and_mean_axis() {
        let x = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(x.sum_axis(0).unwrap().to_vec(), vec![5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1).unwrap().to_vec(), vec![6.0, 15.0]);
        assert_eq!(x.mean_axis(1).unwrap().to_vec(), vec![2.0, 5.0]);
    }

    #[test]
    fn stack_and_gather_roundtrip() {
        let a = Tensor::scalar_param(0.3f64);
        let b = Tensor::scalar_param(0.9f64);
        let s = Tensor::stack_scalars(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.to_vec(), vec![0.3, 0.9]);
        let g = s.gather(&[1, 1, 0]).unwrap();
        assert_eq!(g.to_vec(), vec![0.9, 0.9, 0.3]);
        g.sum_all().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn concat_select_inverse() {
        let a = Tensor::param(&[1, 2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::param(&[2, 2, 2], (5..13).map(f64::from).collect()).unwrap();
        let c = a.concat_channels(&b).unwrap();
        assert_eq!(c.shape(), &[3, 2, 2]);
        assert_eq!(c.select_channel(0).unwrap().to_vec(), a.to_vec());
        assert_eq!(
            c.select_channel(2).unwrap().to_vec(),
            b.select_channel(1).unwrap().to_vec()
        );
        c.select_channel(2).unwrap().sum_all().backward().unwrap();
        assert_eq!(b.grad().unwrap(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }
}
