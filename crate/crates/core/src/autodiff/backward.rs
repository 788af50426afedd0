use crate::error::Result;
use crate::scalar::{count, Real};

use super::conv;
use super::tensor::{Op, Tensor};

/// Routes the output gradient of one node to its parents.
///
/// Kink policy: `relu`, `clamp_min` and `powf` at a non-differentiable
/// point propagate the zero subgradient.
pub(crate) fn apply<T: Real>(op: &Op<T>, grad: &[T], out: &Tensor<T>) -> Result<()> {
    match op {
        Op::Add(a, b) => {
            a.accumulate_grad(grad);
            b.accumulate_grad(grad);
        }
        Op::Sub(a, b) => {
            a.accumulate_grad(grad);
            if b.requires_grad() {
                let contrib: Vec<T> = grad.iter().map(|&g| -g).collect();
                b.accumulate_grad(&contrib);
            }
        }
        Op::Mul(a, b) => {
            if a.requires_grad() {
                let bd = b.data();
                let contrib: Vec<T> = grad.iter().zip(bd.iter()).map(|(&g, &bv)| g * bv).collect();
                a.accumulate_grad(&contrib);
            }
            if b.requires_grad() {
                let ad = a.data();
                let contrib: Vec<T> = grad.iter().zip(ad.iter()).map(|(&g, &av)| g * av).collect();
                b.accumulate_grad(&contrib);
            }
        }
        Op::Div(a, b) => {
            let bd = b.data();
            if a.requires_grad() {
                let contrib: Vec<T> = grad.iter().zip(bd.iter()).map(|(&g, &bv)| g / bv).collect();
                a.accumulate_grad(&contrib);
            }
            if b.requires_grad() {
                let ad = a.data();
                let contrib: Vec<T> = grad
                    .iter()
                    .zip(ad.iter().zip(bd.iter()))
                    .map(|(&g, (&av, &bv))| -g * av / (bv * bv))
                    .collect();
                b.accumulate_grad(&contrib);
            }
        }
        Op::Neg(x) => {
            if x.requires_grad() {
                let contrib: Vec<T> = grad.iter().map(|&g| -g).collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::Exp { x, y } => {
            if x.requires_grad() {
                let contrib: Vec<T> = grad.iter().zip(y.iter()).map(|(&g, &yv)| g * yv).collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::Ln(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let contrib: Vec<T> = grad.iter().zip(xd.iter()).map(|(&g, &xv)| g / xv).collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::Powf { x, exponent } => {
            if x.requires_grad() {
                let e = *exponent;
                let xd = x.data();
                let contrib: Vec<T> = grad
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &xv)| {
                        if xv == T::zero() && e < T::one() {
                            T::zero()
                        } else {
                            g * e * xv.powf(e - T::one())
                        }
                    })
                    .collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::ClampMin { x, min } => {
            if x.requires_grad() {
                let m = *min;
                let xd = x.data();
                let contrib: Vec<T> = grad
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &xv)| if xv > m { g } else { T::zero() })
                    .collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::Relu(x) => {
            if x.requires_grad() {
                let xd = x.data();
                let contrib: Vec<T> = grad
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &xv)| if xv > T::zero() { g } else { T::zero() })
                    .collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::AddScalar(x) => {
            x.accumulate_grad(grad);
        }
        Op::MulScalar { x, factor } => {
            if x.requires_grad() {
                let f = *factor;
                let contrib: Vec<T> = grad.iter().map(|&g| g * f).collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::RsubScalar(x) => {
            if x.requires_grad() {
                let contrib: Vec<T> = grad.iter().map(|&g| -g).collect();
                x.accumulate_grad(&contrib);
            }
        }
        Op::SumAll(x) => {
            if x.requires_grad() {
                let contrib = vec![grad[0]; x.len()];
                x.accumulate_grad(&contrib);
            }
        }
        Op::MeanAll(x) => {
            if x.requires_grad() {
                let g = grad[0] / count::<T>(x.len());
                let contrib = vec![g; x.len()];
                x.accumulate_grad(&contrib);
            }
        }
        Op::SumAxis { x, axis } => {
            if x.requires_grad() {
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut contrib = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            contrib[base + i] = grad[gbase + i];
                        }
                    }
                }
                x.accumulate_grad(&contrib);
            }
        }
        Op::MeanAxis { x, axis } => {
            if x.requires_grad() {
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let scale = T::one() / count::<T>(len);
                let mut contrib = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        let gbase = o * inner;
                        for i in 0..inner {
                            contrib[base + i] = grad[gbase + i] * scale;
                        }
                    }
                }
                x.accumulate_grad(&contrib);
            }
        }
        Op::Softmax { x, axis, y } => {
            if x.requires_grad() {
                let (outer, len, inner) = split_axis(x.shape(), *axis);
                let mut contrib = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = T::zero();
                        for a in 0..len {
                            let idx = (o * len + a) * inner + i;
                            dot = dot + grad[idx] * y[idx];
                        }
                        for a in 0..len {
                            let idx = (o * len + a) * inner + i;
                            contrib[idx] = y[idx] * (grad[idx] - dot);
                        }
                    }
                }
                x.accumulate_grad(&contrib);
            }
        }
        Op::StackScalars(parts) => {
            for (k, p) in parts.iter().enumerate() {
                if p.requires_grad() {
                    p.accumulate_grad(&[grad[k]]);
                }
            }
        }
        Op::ConcatChannels(a, b) => {
            let na = a.len();
            if a.requires_grad() {
                a.accumulate_grad(&grad[..na]);
            }
            if b.requires_grad() {
                b.accumulate_grad(&grad[na..]);
            }
        }
        Op::SelectChannel { x, index } => {
            if x.requires_grad() {
                let plane = out.len();
                let mut contrib = vec![T::zero(); x.len()];
                contrib[index * plane..(index + 1) * plane].copy_from_slice(grad);
                x.accumulate_grad(&contrib);
            }
        }
        Op::Gather { x, indices } => {
            if x.requires_grad() {
                let mut contrib = vec![T::zero(); x.len()];
                for (k, &src) in indices.iter().enumerate() {
                    contrib[src] = contrib[src] + grad[k];
                }
                x.accumulate_grad(&contrib);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            conv::conv2d_backward(input, weight, bias, *stride, *pad, grad)?;
        }
        Op::ConvTranspose2d {
            input,
            weight,
            bias,
            stride,
        } => {
            conv::conv_transpose2d_backward(input, weight, bias, *stride, grad)?;
        }
    }
    Ok(())
}

/// Decomposes `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
