//! Spatial pooling operations.

use crate::error::{Error, Result};
use crate::ops::conv::conv_output_hw;
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Max pooling over `k x k` windows. Padded positions are ignored rather than
/// treated as zeros. Ties select the first maximum in scan order, and the
/// backward pass routes the gradient to that single element.
pub fn maxpool2d<'t, E: Scalar>(
    x: Var<'t, E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, E>> {
    let xv = x.value();
    if xv.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2d expects an NCHW tensor, got {:?}",
            xv.shape()
        )));
    }
    let s = xv.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = conv_output_hw(h, w, k, k, stride, padding)?;
    let xd = xv.data();
    let mut out = vec![E::zero(); n * c * oh * ow];
    let mut argmax = vec![0usize; n * c * oh * ow];
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            let oplane = (img * c + ch) * oh * ow;
            for oi in 0..oh {
                for oj in 0..ow {
                    let base_i = (oi * stride) as isize - padding as isize;
                    let base_j = (oj * stride) as isize - padding as isize;
                    let mut best = E::neg_infinity();
                    let mut best_idx = 0usize;
                    for ki in 0..k {
                        let ii = base_i + ki as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = base_j + kj as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = plane + ii as usize * w + jj as usize;
                            if xd[idx] > best {
                                best = xd[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[oplane + oi * ow + oj] = best;
                    argmax[oplane + oi * ow + oj] = best_idx;
                }
            }
        }
    }
    let out = Tensor::new(vec![n, c, oh, ow], out)?;
    let rg = x.requires_grad();
    let xid = x.id();
    let xshape = s.to_vec();
    let back = move |g: &Tensor<E>| {
        let mut dx = vec![E::zero(); xshape.iter().product()];
        for (gi, &src) in argmax.iter().enumerate() {
            dx[src] += g.data()[gi];
        }
        vec![(xid, Tensor::new(xshape.clone(), dx).expect("maxpool dx"))]
    };
    Ok(x.tape().push(OpKind::MaxPool2d, out, rg, Some(Box::new(back)), None))
}

/// Adaptive average pooling to 1x1 followed by flatten: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    if xv.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool expects an NCHW tensor, got {:?}",
            xv.shape()
        )));
    }
    let s = xv.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let inv = E::from_f64(1.0 / hw as f64);
    let xd = xv.data();
    let mut out = vec![E::zero(); n * c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut acc = E::zero();
            for i in base..base + hw {
                acc += xd[i];
            }
            out[img * c + ch] = acc * inv;
        }
    }
    let out = Tensor::new(vec![n, c], out)?;
    let rg = x.requires_grad();
    let xid = x.id();
    let xshape = s.to_vec();
    let back = move |g: &Tensor<E>| {
        let gd = g.data();
        let mut dx = vec![E::zero(); n * c * hw];
        for img in 0..n {
            for ch in 0..c {
                let gv = gd[img * c + ch] * inv;
                let base = (img * c + ch) * hw;
                for v in &mut dx[base..base + hw] {
                    *v = gv;
                }
            }
        }
        vec![(xid, Tensor::new(xshape.clone(), dx).expect("gap dx"))]
    };
    Ok(x.tape().push(OpKind::GlobalAvgPool, out, rg, Some(Box::new(back)), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::sum;
    use crate::tape::Tape;

    #[test]
    fn maxpool_picks_window_maxima() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(
            Tensor::new(
                vec![1, 1, 4, 4],
                vec![
                    1.0, 2.0, 5.0, 6.0, //
                    3.0, 4.0, 7.0, 8.0, //
                    9.0, 10.0, 13.0, 14.0, //
                    11.0, 12.0, 15.0, 16.0,
                ],
            )
            .unwrap(),
        );
        let y = maxpool2d(x, 2, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn maxpool_gradient_goes_to_argmax_only() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let y = maxpool2d(x, 2, 2, 0).unwrap();
        let loss = sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn stem_pool_shape_matches_convention() {
        // 112 -> 56 with k=3, stride 2, padding 1
        let tape: Tape<f32> = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 4, 112, 112]));
        let y = maxpool2d(x, 3, 2, 1).unwrap();
        assert_eq!(y.value().shape(), &[1, 4, 56, 56]);
    }

    #[test]
    fn global_avg_pool_of_constant_map_is_the_constant() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::full(&[2, 3, 5, 5], 2.5));
        let y = global_avg_pool(x).unwrap();
        assert_eq!(y.value().shape(), &[2, 3]);
        assert!(y.value().data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }
}
