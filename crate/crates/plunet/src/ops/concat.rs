//! Channel concatenation, the skip-connection join.

use crate::error::{bail_shape, Result};
use crate::tensor::{dims, Scalar, Tensor};

/// Concatenates along the channel axis in argument order; all parts must
/// agree on `N`, `H` and `W`.
pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = match parts.first() {
        Some(t) => t.dims(),
        None => bail_shape!("concat_channels needs at least one input"),
    };
    let mut c_total = 0;
    for p in parts {
        let d = p.dims();
        if d.n != first.n || d.h != first.h || d.w != first.w {
            bail_shape!("concat parts disagree: {} vs {}", d, first);
        }
        c_total += d.c;
    }
    let od = dims(first.n, c_total, first.h, first.w);
    let plane = first.h * first.w;
    let mut out = Tensor::zeros(od);
    let os = out.data_mut();
    for n in 0..first.n {
        let mut c_off = 0;
        for p in parts {
            let d = p.dims();
            let src = &p.data()[n * d.c * plane..][..d.c * plane];
            let dst = &mut os[(n * c_total + c_off) * plane..][..d.c * plane];
            dst.copy_from_slice(src);
            c_off += d.c;
        }
    }
    Ok(out)
}

/// Splits the upstream gradient back into per-part tensors.
pub fn concat_channels_backward<T: Scalar>(
    part_dims: &[crate::tensor::Dims],
    dy: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let d = dy.dims();
    let c_total: usize = part_dims.iter().map(|p| p.c).sum();
    if c_total != d.c {
        bail_shape!("split channels {} vs upstream {}", c_total, d.c);
    }
    let plane = d.h * d.w;
    let mut grads: Vec<Tensor<T>> = part_dims.iter().map(|&pd| Tensor::zeros(pd)).collect();
    for n in 0..d.n {
        let mut c_off = 0;
        for (pi, pd) in part_dims.iter().enumerate() {
            if pd.n != d.n || pd.h != d.h || pd.w != d.w {
                bail_shape!("part dims {} disagree with upstream {}", pd, d);
            }
            let src = &dy.data()[(n * c_total + c_off) * plane..][..pd.c * plane];
            let dst = &mut grads[pi].data_mut()[n * pd.c * plane..][..pd.c * plane];
            dst.copy_from_slice(src);
            c_off += pd.c;
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dims;
    use crate::testutil::rand_tensor;

    #[test]
    fn single_input_concat_is_identity() {
        let x = rand_tensor::<f64>(dims(2, 3, 4, 4), 1);
        let y = concat_channels(&[&x]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn stacks_channels_in_argument_order() {
        let a = Tensor::<f64>::filled(dims(1, 2, 2, 2), 1.0);
        let b = Tensor::<f64>::filled(dims(1, 3, 2, 2), 2.0);
        let y = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(y.dims(), dims(1, 5, 2, 2));
        for c in 0..5 {
            let want = if c < 2 { 1.0 } else { 2.0 };
            for i in 0..2 {
                for j in 0..2 {
                    assert_eq!(y.get(0, c, i, j), want);
                }
            }
        }
    }

    #[test]
    fn backward_splits_gradient_exactly() {
        let a = rand_tensor::<f64>(dims(2, 2, 3, 3), 2);
        let b = rand_tensor::<f64>(dims(2, 4, 3, 3), 3);
        let y = concat_channels(&[&a, &b]).unwrap();
        let grads = concat_channels_backward(&[a.dims(), b.dims()], &y).unwrap();
        assert_eq!(grads[0].data(), a.data());
        assert_eq!(grads[1].data(), b.data());
    }

    #[test]
    fn rejects_spatial_mismatch_and_empty_list() {
        let a = Tensor::<f64>::zeros(dims(1, 1, 2, 2));
        let b = Tensor::<f64>::zeros(dims(1, 1, 4, 4));
        assert!(concat_channels(&[&a, &b]).is_err());
        assert!(concat_channels::<f64>(&[]).is_err());
    }
}
