//! Fully connected layer on squeezed `(N, C, 1, 1)` tensors; used by the
//! squeeze-and-excitation gate.

use crate::error::{bail_shape, Result};
use crate::tensor::{dims, Scalar, Tensor};

/// `y[n,o] = sum_i w[o,i] * x[n,i] + b[o]`, weight layout `(out, in, 1, 1)`.
pub fn linear<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let xd = x.dims();
    if xd.h != 1 || xd.w != 1 {
        bail_shape!("linear expects (N,C,1,1), got {xd}");
    }
    let wd = w.dims();
    if wd.c != xd.c || wd.h != 1 || wd.w != 1 {
        bail_shape!("weight dims {wd} incompatible with input {xd}");
    }
    let (n_in, n_out) = (xd.c, wd.n);
    if let Some(bt) = b {
        if bt.dims() != dims(1, n_out, 1, 1) {
            bail_shape!("bias dims {} must be (1,{n_out},1,1)", bt.dims());
        }
    }
    let xs = x.data();
    let ws = w.data();
    let mut y = Tensor::zeros(dims(xd.n, n_out, 1, 1));
    let ys = y.data_mut();
    for n in 0..xd.n {
        let xrow = &xs[n * n_in..][..n_in];
        for o in 0..n_out {
            let wrow = &ws[o * n_in..][..n_in];
            let mut acc = T::ZERO;
            for (&wv, &xv) in wrow.iter().zip(xrow) {
                acc += wv * xv;
            }
            if let Some(bt) = b {
                acc += bt.data()[o];
            }
            ys[n * n_out + o] = acc;
        }
    }
    Ok(y)
}

/// Gradients of [`linear`] for input, weight and bias.
#[allow(clippy::type_complexity)]
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let xd = x.dims();
    let wd = w.dims();
    let (n_in, n_out) = (xd.c, wd.n);
    if dy.dims() != dims(xd.n, n_out, 1, 1) {
        bail_shape!("upstream gradient dims {} vs (N,{n_out},1,1)", dy.dims());
    }
    let xs = x.data();
    let ws = w.data();
    let dys = dy.data();

    let mut dx = Tensor::zeros(xd);
    {
        let dxs = dx.data_mut();
        for n in 0..xd.n {
            for o in 0..n_out {
                let g = dys[n * n_out + o];
                let wrow = &ws[o * n_in..][..n_in];
                let dxrow = &mut dxs[n * n_in..][..n_in];
                for (d, &wv) in dxrow.iter_mut().zip(wrow) {
                    *d += g * wv;
                }
            }
        }
    }

    let mut dw = Tensor::zeros(wd);
    {
        let dws = dw.data_mut();
        for n in 0..xd.n {
            let xrow = &xs[n * n_in..][..n_in];
            for o in 0..n_out {
                let g = dys[n * n_out + o];
                let dwrow = &mut dws[o * n_in..][..n_in];
                for (d, &xv) in dwrow.iter_mut().zip(xrow) {
                    *d += g * xv;
                }
            }
        }
    }

    let db = if has_bias {
        let mut db = Tensor::zeros(dims(1, n_out, 1, 1));
        let dbs = db.data_mut();
        for n in 0..xd.n {
            for o in 0..n_out {
                dbs[o] += dys[n * n_out + o];
            }
        }
        Some(db)
    } else {
        None
    };

    Ok((dx, dw, db))
}
