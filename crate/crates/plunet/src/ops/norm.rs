//! Batch normalisation over the (N, H, W) axes, one statistic per channel.

use super::for_each_chunk;
use crate::error::{bail_shape, bail_spec, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-channel batch statistics captured by the training forward pass;
/// the backward pass needs them to differentiate through the
/// normalisation itself.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

fn check_channel_vec<T: Scalar>(t: &Tensor<T>, c: usize, what: &str) -> Result<()> {
    let d = t.dims();
    if d.n != 1 || d.c != c || d.h != 1 || d.w != 1 {
        bail_shape!("{what} must be (1,{c},1,1), got {d}");
    }
    Ok(())
}

/// Training-mode forward pass. Normalises with the biased batch variance
/// and returns updated running statistics
/// `running <- (1 - momentum) * running + momentum * batch`, where the
/// running variance uses the unbiased batch estimate (the usual
/// framework convention). Errors when `N*H*W == 1`, where the batch
/// variance is undefined.
#[allow(clippy::type_complexity)]
pub fn batchnorm2d_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    momentum: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>, BnSaved<T>)> {
    let d = x.dims();
    check_channel_vec(gamma, d.c, "gamma")?;
    check_channel_vec(beta, d.c, "beta")?;
    check_channel_vec(running_mean, d.c, "running_mean")?;
    check_channel_vec(running_var, d.c, "running_var")?;
    let m = d.n * d.h * d.w;
    if m == 1 {
        bail_spec!("batch variance undefined for a single element per channel");
    }
    let m_t = T::from_f64(m as f64);
    let plane = d.h * d.w;
    let xs = x.data();

    let mut mean = vec![T::ZERO; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let p = &xs[(n * d.c + c) * plane..][..plane];
            let mut acc = T::ZERO;
            for &v in p {
                acc += v;
            }
            mean[c] += acc;
        }
    }
    for v in mean.iter_mut() {
        *v /= m_t;
    }

    let mut var = vec![T::ZERO; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let p = &xs[(n * d.c + c) * plane..][..plane];
            let mu = mean[c];
            let mut acc = T::ZERO;
            for &v in p {
                let dvi = v - mu;
                acc += dvi * dvi;
            }
            var[c] += acc;
        }
    }
    for v in var.iter_mut() {
        *v /= m_t;
    }

    let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();

    let mut y = Tensor::zeros(d);
    let gs = gamma.data();
    let bs = beta.data();
    for_each_chunk(y.data_mut(), plane, |pi, yp| {
        let c = pi % d.c;
        let (mu, inv, g, b) = (mean[c], inv_std[c], gs[c], bs[c]);
        let xp = &xs[pi * plane..][..plane];
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = g * ((v - mu) * inv) + b;
        }
    });

    let one = T::ONE;
    let unbias = m_t / T::from_f64((m - 1) as f64);
    let mut new_rm = running_mean.clone();
    let mut new_rv = running_var.clone();
    for c in 0..d.c {
        let rm = new_rm.data_mut();
        rm[c] = (one - momentum) * rm[c] + momentum * mean[c];
        let rv = new_rv.data_mut();
        rv[c] = (one - momentum) * rv[c] + momentum * (var[c] * unbias);
    }

    Ok((y, new_rm, new_rv, BnSaved { mean, inv_std }))
}

/// Gradients of the training-mode forward pass; the batch statistics are
/// functions of `x`, so the chain rule runs through them as well.
pub fn batchnorm2d_train_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    saved: &BnSaved<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.dims();
    if dy.dims() != d {
        bail_shape!("upstream gradient dims {} vs input {}", dy.dims(), d);
    }
    check_channel_vec(gamma, d.c, "gamma")?;
    let m = d.n * d.h * d.w;
    let m_t = T::from_f64(m as f64);
    let plane = d.h * d.w;
    let xs = x.data();
    let dys = dy.data();

    let mut sum_dy = vec![T::ZERO; d.c];
    let mut sum_dy_xhat = vec![T::ZERO; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let xp = &xs[(n * d.c + c) * plane..][..plane];
            let gp = &dys[(n * d.c + c) * plane..][..plane];
            let (mu, inv) = (saved.mean[c], saved.inv_std[c]);
            let mut a = T::ZERO;
            let mut bacc = T::ZERO;
            for (&g, &v) in gp.iter().zip(xp) {
                a += g;
                bacc += g * ((v - mu) * inv);
            }
            sum_dy[c] += a;
            sum_dy_xhat[c] += bacc;
        }
    }

    let gs = gamma.data();
    let mut dx = Tensor::zeros(d);
    for_each_chunk(dx.data_mut(), plane, |pi, dxp| {
        let c = pi % d.c;
        let (mu, inv, g) = (saved.mean[c], saved.inv_std[c], gs[c]);
        let mean_dy = sum_dy[c] / m_t;
        let mean_dy_xhat = sum_dy_xhat[c] / m_t;
        let xp = &xs[pi * plane..][..plane];
        let gp = &dys[pi * plane..][..plane];
        for ((o, &gv), &xv) in dxp.iter_mut().zip(gp).zip(xp) {
            let xhat = (xv - mu) * inv;
            *o = g * inv * (gv - mean_dy - xhat * mean_dy_xhat);
        }
    });

    let dgamma = Tensor::from_channel_vec(sum_dy_xhat);
    let dbeta = Tensor::from_channel_vec(sum_dy);
    Ok((dx, dgamma, dbeta))
}

/// Inference-mode forward pass: normalises with the stored running
/// statistics, a per-channel affine map.
pub fn batchnorm2d_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let d = x.dims();
    check_channel_vec(gamma, d.c, "gamma")?;
    check_channel_vec(beta, d.c, "beta")?;
    check_channel_vec(running_mean, d.c, "running_mean")?;
    check_channel_vec(running_var, d.c, "running_var")?;
    let plane = d.h * d.w;
    let xs = x.data();
    let (gs, bs) = (gamma.data(), beta.data());
    let (rms, rvs) = (running_mean.data(), running_var.data());

    let mut y = Tensor::zeros(d);
    for_each_chunk(y.data_mut(), plane, |pi, yp| {
        let c = pi % d.c;
        let inv = T::ONE / (rvs[c] + eps).sqrt();
        let (mu, g, b) = (rms[c], gs[c], bs[c]);
        let xp = &xs[pi * plane..][..plane];
        for (o, &v) in yp.iter_mut().zip(xp) {
            *o = g * ((v - mu) * inv) + b;
        }
    });
    Ok(y)
}

/// Gradients of the inference-mode pass; the running statistics are
/// constants here.
pub fn batchnorm2d_eval_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = x.dims();
    if dy.dims() != d {
        bail_shape!("upstream gradient dims {} vs input {}", dy.dims(), d);
    }
    let plane = d.h * d.w;
    let xs = x.data();
    let dys = dy.data();
    let gs = gamma.data();
    let (rms, rvs) = (running_mean.data(), running_var.data());

    let mut sum_dy = vec![T::ZERO; d.c];
    let mut sum_dy_xhat = vec![T::ZERO; d.c];
    for n in 0..d.n {
        for c in 0..d.c {
            let xp = &xs[(n * d.c + c) * plane..][..plane];
            let gp = &dys[(n * d.c + c) * plane..][..plane];
            let inv = T::ONE / (rvs[c] + eps).sqrt();
            let mu = rms[c];
            let mut a = T::ZERO;
            let mut bacc = T::ZERO;
            for (&g, &v) in gp.iter().zip(xp) {
                a += g;
                bacc += g * ((v - mu) * inv);
            }
            sum_dy[c] += a;
            sum_dy_xhat[c] += bacc;
        }
    }

    let mut dx = Tensor::zeros(d);
    for_each_chunk(dx.data_mut(), plane, |pi, dxp| {
        let c = pi % d.c;
        let scale = gs[c] * (T::ONE / (rvs[c] + eps).sqrt());
        let gp = &dys[pi * plane..][..plane];
        for (o, &gv) in dxp.iter_mut().zip(gp) {
            *o = gv * scale;
        }
    });

    Ok((
        dx,
        Tensor::from_channel_vec(sum_dy_xhat),
        Tensor::from_channel_vec(sum_dy),
    ))
}
