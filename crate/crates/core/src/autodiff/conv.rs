use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::{Op, Tensor};

struct ConvDims {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
}

fn conv2d_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    let is = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if is.len() != 3 || ws.len() != 4 || bs.len() != 1 {
        return Err(Error::Contract(format!(
            "conv2d expects input [C,H,W], weight [Co,Ci,Kh,Kw], bias [Co]; \
             got {is:?}, {ws:?}, {bs:?}"
        )));
    }
    let (ci, h, w) = (is[0], is[1], is[2]);
    let (co, wci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wci != ci || bs[0] != co {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Parameter("conv2d stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::Contract(format!(
            "conv2d: kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(ConvDims {
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    })
}

impl<T: Real> Tensor<T> {
    /// 2D convolution over `[C,H,W]` input with zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<T>> {
        let d = conv2d_dims(self, weight, bias, stride, pad)?;
        let xd = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![T::zero(); d.co * d.ho * d.wo];
        for co in 0..d.co {
            let plane = &mut out[co * d.ho * d.wo..(co + 1) * d.ho * d.wo];
            plane.fill(bd[co]);
        }
        if stride == 1 {
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ci in 0..d.ci {
                    let iplane = ci * d.h * d.w;
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            let wv = wd[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            // xo + kx - pad must land in [0, w)
                            let xo_lo = pad.saturating_sub(kx);
                            let xo_hi = (d.w + pad - kx).min(d.wo);
                            if xo_lo >= xo_hi {
                                continue;
                            }
                            for yo in 0..d.ho {
                                let yi = yo + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                let src0 = iplane + (yi - pad) * d.w + (xo_lo + kx - pad);
                                let dst0 = oplane + yo * d.wo + xo_lo;
                                let n = xo_hi - xo_lo;
                                let src = &xd[src0..src0 + n];
                                let dst = &mut out[dst0..dst0 + n];
                                for (dv, sv) in dst.iter_mut().zip(src) {
                                    *dv = *dv + wv * *sv;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..d.co {
                for yo in 0..d.ho {
                    for xo in 0..d.wo {
                        let mut acc = out[(co * d.ho + yo) * d.wo + xo];
                        for ci in 0..d.ci {
                            for ky in 0..d.kh {
                                let yi = yo * stride + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let xi = xo * stride + kx;
                                    if xi < pad || xi - pad >= d.w {
                                        continue;
                                    }
                                    let iv = xd[(ci * d.h + yi - pad) * d.w + (xi - pad)];
                                    let wv = wd[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                                    acc = acc + iv * wv;
                                }
                            }
                        }
                        out[(co * d.ho + yo) * d.wo + xo] = acc;
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Ok(Tensor::from_op(
            vec![d.co, d.ho, d.wo],
            out,
            Op::Conv2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
                pad,
            },
        ))
    }

    /// Transposed 2D convolution (no padding); weight layout `[Ci,Co,Kh,Kw]`.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
    ) -> Result<Tensor<T>> {
        let d = transpose_dims(self, weight, bias, stride)?;
        let xd = self.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut out = vec![T::zero(); d.co * d.ho * d.wo];
        for co in 0..d.co {
            out[co * d.ho * d.wo..(co + 1) * d.ho * d.wo].fill(bd[co]);
        }
        for ci in 0..d.ci {
            let iplane = ci * d.h * d.w;
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wd[((ci * d.co + co) * d.kh + ky) * d.kw + kx];
                        for y in 0..d.h {
                            let orow = oplane + (y * stride + ky) * d.wo + kx;
                            let irow = iplane + y * d.w;
                            for x in 0..d.w {
                                out[orow + x * stride] =
                                    out[orow + x * stride] + wv * xd[irow + x];
                            }
                        }
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        drop(bd);
        Ok(Tensor::from_op(
            vec![d.co, d.ho, d.wo],
            out,
            Op::ConvTranspose2d {
                input: self.clone(),
                weight: weight.clone(),
                bias: bias.clone(),
                stride,
            },
        ))
    }
}

fn transpose_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<ConvDims> {
    let is = input.shape();
    let ws = weight.shape();
    let bs = bias.shape();
    if is.len() != 3 || ws.len() != 4 || bs.len() != 1 {
        return Err(Error::Contract(format!(
            "conv_transpose2d expects input [C,H,W], weight [Ci,Co,Kh,Kw], bias [Co]; \
             got {is:?}, {ws:?}, {bs:?}"
        )));
    }
    let (ci, h, w) = (is[0], is[1], is[2]);
    let (wci, co, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if wci != ci || bs[0] != co {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: is.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    if stride == 0 {
        return Err(Error::Parameter("conv_transpose2d stride must be >= 1".into()));
    }
    Ok(ConvDims {
        ci,
        h,
        w,
        co,
        kh,
        kw,
        ho: (h - 1) * stride + kh,
        wo: (w - 1) * stride + kw,
    })
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad: &[T],
) -> Result<()> {
    let d = conv2d_dims(input, weight, bias, stride, pad)?;
    if bias.requires_grad() {
        let mut db = vec![T::zero(); d.co];
        for co in 0..d.co {
            let mut acc = T::zero();
            for &g in &grad[co * d.ho * d.wo..(co + 1) * d.ho * d.wo] {
                acc = acc + g;
            }
            db[co] = acc;
        }
        bias.accumulate_grad(&db);
    }
    let xd = input.data();
    let wd = weight.data();
    if weight.requires_grad() {
        let mut dw = vec![T::zero(); weight.len()];
        if stride == 1 {
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ci in 0..d.ci {
                    let iplane = ci * d.h * d.w;
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            let xo_lo = pad.saturating_sub(kx);
                            let xo_hi = (d.w + pad - kx).min(d.wo);
                            if xo_lo >= xo_hi {
                                continue;
                            }
                            let mut acc = T::zero();
                            for yo in 0..d.ho {
                                let yi = yo + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                let src0 = iplane + (yi - pad) * d.w + (xo_lo + kx - pad);
                                let g0 = oplane + yo * d.wo + xo_lo;
                                let n = xo_hi - xo_lo;
                                for (sv, gv) in xd[src0..src0 + n].iter().zip(&grad[g0..g0 + n]) {
                                    acc = acc + *sv * *gv;
                                }
                            }
                            dw[((co * d.ci + ci) * d.kh + ky) * d.kw + kx] = acc;
                        }
                    }
                }
            }
        } else {
            for co in 0..d.co {
                for yo in 0..d.ho {
                    for xo in 0..d.wo {
                        let g = grad[(co * d.ho + yo) * d.wo + xo];
                        for ci in 0..d.ci {
                            for ky in 0..d.kh {
                                let yi = yo * stride + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let xi = xo * stride + kx;
                                    if xi < pad || xi - pad >= d.w {
                                        continue;
                                    }
                                    let widx = ((co * d.ci + ci) * d.kh + ky) * d.kw + kx;
                                    dw[widx] = dw[widx]
                                        + g * xd[(ci * d.h + yi - pad) * d.w + (xi - pad)];
                                }
                            }
                        }
                    }
                }
            }
        }
        weight.accumulate_grad(&dw);
    }
    if input.requires_grad() {
        let mut dx = vec![T::zero(); input.len()];
        if stride == 1 {
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ci in 0..d.ci {
                    let iplane = ci * d.h * d.w;
                    for ky in 0..d.kh {
                        for kx in 0..d.kw {
                            let wv = wd[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                            if wv == T::zero() {
                                continue;
                            }
                            let xo_lo = pad.saturating_sub(kx);
                            let xo_hi = (d.w + pad - kx).min(d.wo);
                            if xo_lo >= xo_hi {
                                continue;
                            }
                            for yo in 0..d.ho {
                                let yi = yo + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                let dst0 = iplane + (yi - pad) * d.w + (xo_lo + kx - pad);
                                let g0 = oplane + yo * d.wo + xo_lo;
                                let n = xo_hi - xo_lo;
                                for (dv, gv) in
                                    dx[dst0..dst0 + n].iter_mut().zip(&grad[g0..g0 + n])
                                {
                                    *dv = *dv + wv * *gv;
                                }
                            }
                        }
                    }
                }
            }
        } else {
            for co in 0..d.co {
                for yo in 0..d.ho {
                    for xo in 0..d.wo {
                        let g = grad[(co * d.ho + yo) * d.wo + xo];
                        for ci in 0..d.ci {
                            for ky in 0..d.kh {
                                let yi = yo * stride + ky;
                                if yi < pad || yi - pad >= d.h {
                                    continue;
                                }
                                for kx in 0..d.kw {
                                    let xi = xo * stride + kx;
                                    if xi < pad || xi - pad >= d.w {
                                        continue;
                                    }
                                    let didx = (ci * d.h + yi - pad) * d.w + (xi - pad);
                                    let wv = wd[((co * d.ci + ci) * d.kh + ky) * d.kw + kx];
                                    dx[didx] = dx[didx] + g * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        input.accumulate_grad(&dx);
    }
    Ok(())
}

pub(crate) fn conv_transpose2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    grad: &[T],
) -> Result<()> {
    let d = transpose_dims(input, weight, bias, stride)?;
    if bias.requires_grad() {
        let mut db = vec![T::zero(); d.co];
        for co in 0..d.co {
            let mut acc = T::zero();
            for &g in &grad[co * d.ho * d.wo..(co + 1) * d.ho * d.wo] {
                acc = acc + g;
            }
            db[co] = acc;
        }
        bias.accumulate_grad(&db);
    }
    let xd = input.data();
    let wd = weight.data();
    if weight.requires_grad() {
        let mut dw = vec![T::zero(); weight.len()];
        for ci in 0..d.ci {
            let iplane = ci * d.h * d.w;
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = T::zero();
                        for y in 0..d.h {
                            let orow = oplane + (y * stride + ky) * d.wo + kx;
                            let irow = iplane + y * d.w;
                            for x in 0..d.w {
                                acc = acc + xd[irow + x] * grad[orow + x * stride];
                            }
                        }
                        dw[((ci * d.co + co) * d.kh + ky) * d.kw + kx] = acc;
                    }
                }
            }
        }
        weight.accumulate_grad(&dw);
    }
    if input.requires_grad() {
        let mut dx = vec![T::zero(); input.len()];
        for ci in 0..d.ci {
            let iplane = ci * d.h * d.w;
            for co in 0..d.co {
                let oplane = co * d.ho * d.wo;
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wv = wd[((ci * d.co + co) * d.kh + ky) * d.kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for y in 0..d.h {
                            let orow = oplane + (y * stride + ky) * d.wo + kx;
                            let irow = iplane + y * d.w;
                            for x in 0..d.w {
                                dx[irow + x] = dx[irow + x] + wv * grad[orow + x * stride];
                            }
                        }
                    }
                }
            }
        }
        input.accumulate_grad(&dx);
    }
    Ok(())
}
