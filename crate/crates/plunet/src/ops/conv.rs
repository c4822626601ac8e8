//! Grouped dilated convolution, its gradients, the depthwise-separable
//! composition and the fixed 2x2 stride-2 transposed convolution.

use super::{for_each_chunk, ConvSpec};
use crate::error::{bail_shape, Result};
use crate::tensor::{dims, Scalar, Tensor};

/// Output positions `[lo, hi)` for which `pos*stride + tap - pad` lands
/// inside `[0, in_size)`. Positions outside read zero padding and are
/// skipped entirely.
fn valid_range(out_size: usize, in_size: usize, stride: usize, tap: usize, pad: usize) -> (usize, usize) {
    let off = tap as i64 - pad as i64;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let lim = in_size as i64 - 1 - off;
    if lim < 0 {
        return (0, 0);
    }
    let hi = (lim as usize / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

fn check_conv_args<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<()> {
    if w.dims() != spec.weight_dims() {
        bail_shape!("weight dims {} do not match spec {}", w.dims(), spec.weight_dims());
    }
    match (spec.bias, b) {
        (true, Some(bt)) => {
            if bt.dims() != spec.bias_dims() {
                bail_shape!("bias dims {} do not match spec {}", bt.dims(), spec.bias_dims());
            }
        }
        (false, None) => {}
        (true, None) => bail_shape!("spec declares a bias but none was supplied"),
        (false, Some(_)) => bail_shape!("spec declares no bias but one was supplied"),
    }
    let _ = x;
    Ok(())
}

/// `out[n,o,i,j] = sum_{c,u,v} x[n,c, i*sh - ph + u*dh, j*sw - pw + v*dw] * w[o,c,u,v] (+ b[o])`
/// with zero padding; accumulation order per output element is `c`, then
/// `u`, then `v`, and the bias is added after the sum.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    check_conv_args(x, w, b, spec)?;

    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let (ih, iw) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);
    let xs = x.data();
    let ws = w.data();

    let mut out = Tensor::zeros(od);
    let plane = oh * ow;
    for_each_chunk(out.data_mut(), plane, |pi, op| {
        let n = pi / spec.out_channels;
        let o = pi % spec.out_channels;
        let cbase = (o / opg) * ipg;
        for ci in 0..ipg {
            let xplane = &xs[((n * xd.c + cbase + ci) * ih) * iw..][..ih * iw];
            let wrow = &ws[((o * ipg + ci) * kh) * kw..][..kh * kw];
            for u in 0..kh {
                let (oy_lo, oy_hi) = valid_range(oh, ih, sh, u * dh, ph);
                for v in 0..kw {
                    let wv = wrow[u * kw + v];
                    let (ox_lo, ox_hi) = valid_range(ow, iw, sw, v * dw, pw);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let off = (v * dw) as i64 - pw as i64;
                    for oy in oy_lo..oy_hi {
                        let iy = (oy * sh + u * dh) as i64 - ph as i64;
                        let xrow = &xplane[iy as usize * iw..][..iw];
                        let orow = &mut op[oy * ow..][..ow];
                        if sw == 1 {
                            let xseg = &xrow[(ox_lo as i64 + off) as usize..];
                            for (ov, &xv) in orow[ox_lo..ox_hi].iter_mut().zip(xseg) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                let ix = (ox * sw) as i64 + off;
                                orow[ox] += wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        if let Some(bt) = b {
            let bv = bt.data()[o];
            for ov in op.iter_mut() {
                *ov += bv;
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let xd = x.dims();
    let od = spec.output_dims(xd)?;
    if dy.dims() != od {
        bail_shape!("upstream gradient dims {} do not match output {}", dy.dims(), od);
    }
    if w.dims() != spec.weight_dims() {
        bail_shape!("weight dims {} do not match spec {}", w.dims(), spec.weight_dims());
    }

    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let (dh, dw) = spec.dilation;
    let ipg = spec.in_channels / spec.groups;
    let opg = spec.out_channels / spec.groups;
    let (ih, iw) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    // dL/dx: scatter each upstream element back through the taps.
    let mut dx = Tensor::zeros(xd);
    let xn_stride = xd.c * ih * iw;
    for_each_chunk(dx.data_mut(), xn_stride, |n, dxp| {
        for o in 0..spec.out_channels {
            let cbase = (o / opg) * ipg;
            let dyplane = &dys[(n * spec.out_channels + o) * oh * ow..][..oh * ow];
            for ci in 0..ipg {
                let dxplane = &mut dxp[(cbase + ci) * ih * iw..][..ih * iw];
                let wrow = &ws[((o * ipg + ci) * kh) * kw..][..kh * kw];
                for u in 0..kh {
                    let (oy_lo, oy_hi) = valid_range(oh, ih, sh, u * dh, ph);
                    for v in 0..kw {
                        let wv = wrow[u * kw + v];
                        let (ox_lo, ox_hi) = valid_range(ow, iw, sw, v * dw, pw);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let off = (v * dw) as i64 - pw as i64;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * sh + u * dh) as i64 - ph as i64;
                            let dxrow = &mut dxplane[iy as usize * iw..][..iw];
                            let dyrow = &dyplane[oy * ow..][..ow];
                            if sw == 1 {
                                let base = (ox_lo as i64 + off) as usize;
                                for (i, &gv) in dyrow[ox_lo..ox_hi].iter().enumerate() {
                                    dxrow[base + i] += wv * gv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * sw) as i64 + off;
                                    dxrow[ix as usize] += wv * dyrow[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });

    // dL/dw: correlation of input with the upstream gradient.
    let mut dwt = Tensor::zeros(spec.weight_dims());
    let wchunk = ipg * kh * kw;
    for_each_chunk(dwt.data_mut(), wchunk, |o, dwp| {
        let cbase = (o / opg) * ipg;
        for ci in 0..ipg {
            for u in 0..kh {
                let (oy_lo, oy_hi) = valid_range(oh, ih, sh, u * dh, ph);
                for v in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(ow, iw, sw, v * dw, pw);
                    let off = (v * dw) as i64 - pw as i64;
                    let mut acc = T::ZERO;
                    for n in 0..xd.n {
                        let xplane = &xs[((n * xd.c + cbase + ci) * ih) * iw..][..ih * iw];
                        let dyplane = &dys[(n * spec.out_channels + o) * oh * ow..][..oh * ow];
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * sh + u * dh) as i64 - ph as i64;
                            let xrow = &xplane[iy as usize * iw..][..iw];
                            let dyrow = &dyplane[oy * ow..][..ow];
                            if sw == 1 && ox_lo < ox_hi {
                                let xseg = &xrow[(ox_lo as i64 + off) as usize..];
                                for (&gv, &xv) in dyrow[ox_lo..ox_hi].iter().zip(xseg) {
                                    acc += gv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = (ox * sw) as i64 + off;
                                    acc += dyrow[ox] * xrow[ix as usize];
                                }
                            }
                        }
                    }
                    dwp[(ci * kh + u) * kw + v] = acc;
                }
            }
        }
    });

    let db = if spec.bias {
        let mut db = Tensor::zeros(spec.bias_dims());
        let dbs = db.data_mut();
        for n in 0..od.n {
            for o in 0..spec.out_channels {
                let dyplane = &dys[(n * spec.out_channels + o) * oh * ow..][..oh * ow];
                let mut acc = T::ZERO;
                for &gv in dyplane {
                    acc += gv;
                }
                dbs[o] += acc;
            }
        }
        Some(db)
    } else {
        None
    };

    Ok((dx, dwt, db))
}

/// Depthwise 3x3 (or `spec.kernel`) convolution followed by a 1x1
/// pointwise projection. Built literally as the composition of two
/// [`conv2d`] calls, so it matches that factorisation bit for bit.
/// `spec` describes the overall `in -> out` mapping; its `groups` and
/// `bias` fields are ignored in favour of the supplied bias tensors.
pub fn conv2d_depthwise_separable<T: Scalar>(
    x: &Tensor<T>,
    w_depth: &Tensor<T>,
    b_depth: Option<&Tensor<T>>,
    w_point: &Tensor<T>,
    b_point: Option<&Tensor<T>>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let (depth_spec, point_spec) = separable_parts(spec, b_depth.is_some(), b_point.is_some());
    let mid = conv2d(x, w_depth, b_depth, &depth_spec)?;
    conv2d(&mid, w_point, b_point, &point_spec)
}

/// The two [`ConvSpec`]s a separable convolution decomposes into.
pub(crate) fn separable_parts(spec: &ConvSpec, depth_bias: bool, point_bias: bool) -> (ConvSpec, ConvSpec) {
    let depth = ConvSpec {
        in_channels: spec.in_channels,
        out_channels: spec.in_channels,
        kernel: spec.kernel,
        stride: spec.stride,
        padding: spec.padding,
        dilation: spec.dilation,
        groups: spec.in_channels,
        bias: depth_bias,
    };
    let point = ConvSpec {
        bias: point_bias,
        ..ConvSpec::k1(spec.in_channels, spec.out_channels)
    };
    (depth, point)
}

fn check_transpose_args<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<()> {
    let wd = w.dims();
    if wd.n != x.dims().c || wd.h != 2 || wd.w != 2 {
        bail_shape!(
            "transposed conv weight must be (in_ch, out_ch, 2, 2), got {} for input {}",
            wd,
            x.dims()
        );
    }
    Ok(())
}

/// 2x2 stride-2 transposed convolution, the adjoint of a 2x2 stride-2
/// [`conv2d`]: `y[n,o,2i+u,2j+v] = sum_c x[n,c,i,j] * w[c,o,u,v]`.
/// Weight layout is `(in_ch, out_ch, 2, 2)`; output doubles `H` and `W`.
pub fn conv_transpose2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    check_transpose_args(x, w)?;
    let xd = x.dims();
    let cout = w.dims().c;
    let od = dims(xd.n, cout, xd.h * 2, xd.w * 2);
    let (ih, iw) = (xd.h, xd.w);
    let (oh, ow) = (od.h, od.w);
    let xs = x.data();
    let ws = w.data();

    let mut out = Tensor::zeros(od);
    for_each_chunk(out.data_mut(), oh * ow, |pi, op| {
        let n = pi / cout;
        let o = pi % cout;
        for c in 0..xd.c {
            let xplane = &xs[((n * xd.c + c) * ih) * iw..][..ih * iw];
            let wsub = &ws[(c * cout + o) * 4..][..4];
            for u in 0..2 {
                for v in 0..2 {
                    let wv = wsub[u * 2 + v];
                    for i in 0..ih {
                        let xrow = &xplane[i * iw..][..iw];
                        let orow = &mut op[(2 * i + u) * ow..][..ow];
                        for j in 0..iw {
                            orow[2 * j + v] += wv * xrow[j];
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Gradients of [`conv_transpose2d`] with respect to input and weight.
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_transpose_args(x, w)?;
    let xd = x.dims();
    let cout = w.dims().c;
    let od = dims(xd.n, cout, xd.h * 2, xd.w * 2);
    if dy.dims() != od {
        bail_shape!("upstream gradient dims {} do not match output {}", dy.dims(), od);
    }
    let (ih, iw) = (xd.h, xd.w);
    let ow = od.w;
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = Tensor::zeros(xd);
    for_each_chunk(dx.data_mut(), ih * iw, |pi, dxp| {
        let n = pi / xd.c;
        let c = pi % xd.c;
        for o in 0..cout {
            let dyplane = &dys[(n * cout + o) * od.h * ow..][..od.h * ow];
            let wsub = &ws[(c * cout + o) * 4..][..4];
            for u in 0..2 {
                for v in 0..2 {
                    let wv = wsub[u * 2 + v];
                    for i in 0..ih {
                        let dyrow = &dyplane[(2 * i + u) * ow..][..ow];
                        let dxrow = &mut dxp[i * iw..][..iw];
                        for j in 0..iw {
                            dxrow[j] += wv * dyrow[2 * j + v];
                        }
                    }
                }
            }
        }
    });

    let mut dwt = Tensor::zeros(w.dims());
    for_each_chunk(dwt.data_mut(), cout * 4, |c, dwp| {
        for o in 0..cout {
            for u in 0..2 {
                for v in 0..2 {
                    let mut acc = T::ZERO;
                    for n in 0..xd.n {
                        let xplane = &xs[((n * xd.c + c) * ih) * iw..][..ih * iw];
                        let dyplane = &dys[(n * cout + o) * od.h * ow..][..od.h * ow];
                        for i in 0..ih {
                            let xrow = &xplane[i * iw..][..iw];
                            let dyrow = &dyplane[(2 * i + u) * ow..][..ow];
                            for j in 0..iw {
                                acc += xrow[j] * dyrow[2 * j + v];
                            }
                        }
                    }
                    dwp[o * 4 + u * 2 + v] = acc;
                }
            }
        }
    });

    Ok((dx, dwt))
}
