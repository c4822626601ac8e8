//! Spatial pooling: fixed 2x2 stride-2 max pooling and global average
//! pooling.

use super::for_each_chunk;
use crate::error::{bail_shape, Result};
use crate::tensor::{dims, Scalar, Tensor};

/// 2x2 stride-2 max pooling. `H` and `W` must be even. Returns the pooled
/// tensor and, per output element, the flat input index of the selected
/// maximum; ties resolve to the first index in row-major window order,
/// and the backward pass routes gradient only there.
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let d = x.dims();
    if d.h % 2 != 0 || d.w % 2 != 0 {
        bail_shape!("maxpool2d needs even H and W, got {d}");
    }
    if x.len() > u32::MAX as usize {
        bail_shape!("input too large for pooling index bookkeeping");
    }
    let od = dims(d.n, d.c, d.h / 2, d.w / 2);
    let (ih, iw) = (d.h, d.w);
    let (oh, ow) = (od.h, od.w);
    let xs = x.data();

    let mut out = Tensor::zeros(od);
    let mut argmax = vec![0u32; od.count()];
    // Both buffers are chunked per (n, c) plane; the closure fills one
    // output plane and its index plane.
    let plane_out = oh * ow;
    let fill = |pi: usize, op: &mut [T], ap: &mut [u32]| {
        let base = pi * ih * iw;
        let xp = &xs[base..][..ih * iw];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = (2 * oy) * iw + 2 * ox;
                let mut best = xp[best_idx];
                for (du, dv) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = (2 * oy + du) * iw + 2 * ox + dv;
                    let v = xp[idx];
                    if v > best {
                        best = v;
                        best_idx = idx;
                    }
                }
                op[oy * ow + ox] = best;
                ap[oy * ow + ox] = (base + best_idx) as u32;
            }
        }
    };
    if crate::runtime::parallel() {
        use rayon::prelude::*;
        out.data_mut()
            .par_chunks_mut(plane_out)
            .zip(argmax.par_chunks_mut(plane_out))
            .enumerate()
            .for_each(|(pi, (op, ap))| fill(pi, op, ap));
    } else {
        for (pi, (op, ap)) in out
            .data_mut()
            .chunks_mut(plane_out)
            .zip(argmax.chunks_mut(plane_out))
            .enumerate()
        {
            fill(pi, op, ap);
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream element back to the input position that won the
/// max; all other positions receive zero.
pub fn maxpool2d_backward<T: Scalar>(
    input_dims: crate::tensor::Dims,
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let od = dims(input_dims.n, input_dims.c, input_dims.h / 2, input_dims.w / 2);
    if dy.dims() != od {
        bail_shape!("upstream gradient dims {} do not match pooled {}", dy.dims(), od);
    }
    if argmax.len() != od.count() {
        bail_shape!("argmax length {} does not match pooled size {}", argmax.len(), od.count());
    }
    let mut dx = Tensor::zeros(input_dims);
    let dxs = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(dy.data()) {
        dxs[idx as usize] += g;
    }
    Ok(dx)
}

/// Mean over the spatial axes: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = x.dims();
    let plane = d.h * d.w;
    let denom = T::from_f64(plane as f64);
    let xs = x.data();
    let mut out = Tensor::zeros(dims(d.n, d.c, 1, 1));
    for_each_chunk(out.data_mut(), 1, |pi, op| {
        let xp = &xs[pi * plane..][..plane];
        let mut acc = T::ZERO;
        for &v in xp {
            acc += v;
        }
        op[0] = acc / denom;
    });
    Ok(out)
}

/// Spreads each upstream element uniformly over its spatial plane.
pub fn global_avg_pool_backward<T: Scalar>(
    input_dims: crate::tensor::Dims,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if dy.dims() != dims(input_dims.n, input_dims.c, 1, 1) {
        bail_shape!(
            "upstream gradient dims {} do not match pooled (N,C,1,1) of {}",
            dy.dims(),
            input_dims
        );
    }
    let plane = input_dims.h * input_dims.w;
    let denom = T::from_f64(plane as f64);
    let dys = dy.data();
    let mut dx = Tensor::zeros(input_dims);
    for_each_chunk(dx.data_mut(), plane, |pi, dxp| {
        let g = dys[pi] / denom;
        for o in dxp.iter_mut() {
            *o = g;
        }
    });
    Ok(dx)
}
