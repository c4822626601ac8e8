//! Element-wise activations and the per-channel rescale used by
//! squeeze-and-excitation gating.

use super::for_each_chunk;
use crate::error::{bail_shape, Result};
use crate::tensor::{dims, Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let y = x.map(|v| v.maximum(T::ZERO));
    y
}

/// Subgradient at zero is zero: only strictly positive inputs pass
/// gradient through.
pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if x.dims() != dy.dims() {
        bail_shape!("relu backward dims {} vs {}", x.dims(), dy.dims());
    }
    let mut dx = Tensor::zeros(x.dims());
    let out = dx.data_mut();
    for ((o, &v), &g) in out.iter_mut().zip(x.data()).zip(dy.data()) {
        *o = if v > T::ZERO { g } else { T::ZERO };
    }
    Ok(dx)
}

/// Numerically stable logistic: exponentials only ever see non-positive
/// arguments.
pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let y = x.map(|v| {
        if v >= T::ZERO {
            T::ONE / (T::ONE + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::ONE + e)
        }
    });
    y
}

/// Differentiates through the saved output: `dy * y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.dims() != dy.dims() {
        bail_shape!("sigmoid backward dims {} vs {}", y.dims(), dy.dims());
    }
    let mut dx = Tensor::zeros(y.dims());
    let out = dx.data_mut();
    for ((o, &v), &g) in out.iter_mut().zip(y.data()).zip(dy.data()) {
        *o = g * v * (T::ONE - v);
    }
    Ok(dx)
}

/// Multiplies each spatial plane by a per-sample, per-channel scale:
/// `y[n,c,h,w] = x[n,c,h,w] * s[n,c,0,0]`.
pub fn scale_channels<T: Scalar>(x: &Tensor<T>, s: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    if s.dims() != dims(d.n, d.c, 1, 1) {
        bail_shape!("scale dims {} must be (N,C,1,1) for input {}", s.dims(), d);
    }
    let plane = d.h * d.w;
    let xs = x.data();
    let ss = s.data();
    let mut y = Tensor::zeros(d);
    for_each_chunk(y.data_mut(), plane, |pi, yp| {
        let sv = ss[pi];
        let xp = &xs[pi * plane..][..plane];
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = v * sv;
        }
    });
    Ok(y)
}

/// Gradients of [`scale_channels`] for both factors.
pub fn scale_channels_backward<T: Scalar>(
    x: &Tensor<T>,
    s: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d = x.dims();
    if dy.dims() != d {
        bail_shape!("upstream gradient dims {} vs input {}", dy.dims(), d);
    }
    let plane = d.h * d.w;
    let xs = x.data();
    let ss = s.data();
    let dys = dy.data();

    let mut dx = Tensor::zeros(d);
    for_each_chunk(dx.data_mut(), plane, |pi, dxp| {
        let sv = ss[pi];
        let gp = &dys[pi * plane..][..plane];
        for (o, &g) in dxp.iter_mut().zip(gp) {
            *o = g * sv;
        }
    });

    let mut ds = Tensor::zeros(s.dims());
    for_each_chunk(ds.data_mut(), 1, |pi, dsp| {
        let xp = &xs[pi * plane..][..plane];
        let gp = &dys[pi * plane..][..plane];
        let mut acc = T::ZERO;
        for (&v, &g) in xp.iter().zip(gp) {
            acc += v * g;
        }
        dsp[0] = acc;
    });

    Ok((dx, ds))
}
