//! 2D convolution (cross-correlation) via per-image im2col and a matmul.
//!
//! The patch matrix of a single image stays cache-resident, and work is
//! partitioned over batch images, so every output element is owned by one
//! task and results are bitwise deterministic for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matmul, transpose};
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tape::{same_tape, Var};
use crate::tensor::Tensor;

/// Output spatial size `floor((d + 2*padding - k)/stride) + 1` for both axes.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Result<(usize, usize)> {
    if kh == 0 || kw == 0 || stride == 0 {
        return Err(Error::InvalidConfig(format!(
            "kernel {kh}x{kw} and stride {stride} must be at least 1"
        )));
    }
    let hp = h + 2 * padding;
    let wp = w + 2 * padding;
    if hp < kh || wp < kw {
        return Err(Error::InvalidConfig(format!(
            "conv output would be empty: input {h}x{w}, kernel {kh}x{kw}, padding {padding}"
        )));
    }
    Ok(((hp - kh) / stride + 1, (wp - kw) / stride + 1))
}

fn dims4<E: Scalar>(t: &Tensor<E>) -> (usize, usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2], s[3])
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn in_size(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_size(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    /// Patch length: one receptive field across all input channels.
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds one image into a `(oh*ow) x (cin*kh*kw)` patch matrix; padding
/// taps stay zero.
fn im2col_image<E: Scalar>(x: &[E], col: &mut [E], g: Geometry) {
    let cols = g.patch();
    for (r, row) in col.chunks_mut(cols).enumerate() {
        let oi = r / g.ow;
        let oj = r % g.ow;
        let base_i = (oi * g.stride) as isize - g.padding as isize;
        let base_j = (oj * g.stride) as isize - g.padding as isize;
        let mut t = 0;
        for ci in 0..g.cin {
            let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ki in 0..g.kh {
                let ii = base_i + ki as isize;
                if ii < 0 || ii >= g.h as isize {
                    t += g.kw;
                    continue;
                }
                let line = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                for kj in 0..g.kw {
                    let jj = base_j + kj as isize;
                    if jj >= 0 && jj < g.w as isize {
                        row[t] = line[jj as usize];
                    }
                    t += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col_image`]: folds patch rows back onto the input grid,
/// accumulating where receptive fields overlap.
fn col2im_image<E: Scalar>(col: &[E], dx: &mut [E], g: Geometry) {
    let cols = g.patch();
    for (r, row) in col.chunks(cols).enumerate() {
        let oi = r / g.ow;
        let oj = r % g.ow;
        let base_i = (oi * g.stride) as isize - g.padding as isize;
        let base_j = (oj * g.stride) as isize - g.padding as isize;
        let mut t = 0;
        for ci in 0..g.cin {
            for ki in 0..g.kh {
                let ii = base_i + ki as isize;
                if ii < 0 || ii >= g.h as isize {
                    t += g.kw;
                    continue;
                }
                for kj in 0..g.kw {
                    let jj = base_j + kj as isize;
                    if jj >= 0 && jj < g.w as isize {
                        dx[(ci * g.h + ii as usize) * g.w + jj as usize] += row[t];
                    }
                    t += 1;
                }
            }
        }
    }
}

/// Forward for one image: unfold, multiply by the transposed kernel matrix,
/// scatter pixel-major rows into channel-major planes.
fn forward_image<E: Scalar>(x: &[E], wmat_t: &[E], out: &mut [E], g: Geometry) {
    let cols = g.patch();
    let pixels = g.oh * g.ow;
    let mut col = vec![E::zero(); pixels * cols];
    im2col_image(x, &mut col, g);
    let rows = matmul(&col, wmat_t, pixels, cols, g.cout);
    for p in 0..pixels {
        for co in 0..g.cout {
            out[co * pixels + p] = rows[p * g.cout + co];
        }
    }
}

/// Backward for one image: weight gradient `gᵀ · col` and input gradient
/// `col2im(g · w)`.
#[allow(clippy::too_many_arguments)]
fn backward_image<E: Scalar>(
    x: &[E],
    grad: &[E],
    wmat: &[E],
    g: Geometry,
    want_dw: bool,
    want_dx: bool,
    dw: &mut [E],
    dx: &mut [E],
) {
    let cols = g.patch();
    let pixels = g.oh * g.ow;
    let mut g_rows = vec![E::zero(); pixels * g.cout];
    for co in 0..g.cout {
        for p in 0..pixels {
            g_rows[p * g.cout + co] = grad[co * pixels + p];
        }
    }
    if want_dw {
        let mut col = vec![E::zero(); pixels * cols];
        im2col_image(x, &mut col, g);
        let g_rows_t = transpose(&g_rows, pixels, g.cout);
        let dw_part = matmul(&g_rows_t, &col, g.cout, pixels, cols);
        for (acc, v) in dw.iter_mut().zip(dw_part) {
            *acc += v;
        }
    }
    if want_dx {
        let dcol = matmul(&g_rows, wmat, pixels, g.cout, cols);
        col2im_image(&dcol, dx, g);
    }
}

fn geometry<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<(usize, Geometry)> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects 4-d input and kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, wd) = dims4(x);
    let (cout, wcin, kh, kw) = dims4(w);
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d channel mismatch: input has {cin}, kernel expects {wcin}"
        )));
    }
    let (oh, ow) = conv_output_hw(h, wd, kh, kw, stride, padding)?;
    Ok((
        n,
        Geometry {
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        },
    ))
}

pub(crate) fn conv2d_forward<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let (n, g) = geometry(x, w, stride, padding)?;
    let xd = x.data();
    let wmat_t = transpose(w.data(), g.cout, g.patch());
    let (in_sz, out_sz) = (g.in_size(), g.out_size());
    let mut out = vec![E::zero(); n * out_sz];
    let run = |(img, chunk): (usize, &mut [E])| {
        forward_image(&xd[img * in_sz..(img + 1) * in_sz], &wmat_t, chunk, g);
    };
    if n >= 2 {
        out.par_chunks_mut(out_sz).enumerate().for_each(run);
    } else {
        out.chunks_mut(out_sz).enumerate().for_each(run);
    }
    Tensor::new(vec![n, g.cout, g.oh, g.ow], out)
}

/// 2D cross-correlation with zero padding, summed over input channels.
///
/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]` producing
/// `[N, Cout, H', W']`. Backward yields gradients for both `x` and `w`.
pub fn conv2d<'t, E: Scalar>(
    x: Var<'t, E>,
    w: Var<'t, E>,
    stride: usize,
    padding: usize,
) -> Result<Var<'t, E>> {
    same_tape(x, w)?;
    let xv = x.value();
    let wv = w.value();
    let out = conv2d_forward(&xv, &wv, stride, padding)?;
    let rg = x.requires_grad() || w.requires_grad();
    let (xid, wid) = (x.id(), w.id());
    let (xrg, wrg) = (x.requires_grad(), w.requires_grad());
    let back = move |grad: &Tensor<E>| {
        let (n, g) = geometry(&xv, &wv, stride, padding).expect("shapes already validated");
        let gd = grad.data();
        let xd = xv.data();
        let wd = wv.data();
        let (in_sz, out_sz) = (g.in_size(), g.out_size());
        let wlen = wv.numel();
        // each image yields an independent (dw partial, dx slice); partials
        // fold in batch order, independent of scheduling
        let per_image = |img: usize| {
            let mut dw = if wrg { vec![E::zero(); wlen] } else { Vec::new() };
            let mut dx = if xrg { vec![E::zero(); in_sz] } else { Vec::new() };
            backward_image(
                &xd[img * in_sz..(img + 1) * in_sz],
                &gd[img * out_sz..(img + 1) * out_sz],
                wd,
                g,
                wrg,
                xrg,
                &mut dw,
                &mut dx,
            );
            (dw, dx)
        };
        let parts: Vec<(Vec<E>, Vec<E>)> = if n >= 2 {
            (0..n).into_par_iter().map(per_image).collect()
        } else {
            (0..n).map(per_image).collect()
        };
        let mut contribs = Vec::with_capacity(2);
        if wrg {
            let mut dw = vec![E::zero(); wlen];
            for (partial, _) in &parts {
                for (acc, &v) in dw.iter_mut().zip(partial) {
                    *acc += v;
                }
            }
            contribs.push((wid, Tensor::new(wv.shape().to_vec(), dw).expect("dw shape")));
        }
        if xrg {
            let mut dx = Vec::with_capacity(n * in_sz);
            for (_, part) in parts {
                dx.extend(part);
            }
            contribs.push((xid, Tensor::new(xv.shape().to_vec(), dx).expect("dx shape")));
        }
        contribs
    };
    Ok(x.tape().push(OpKind::Conv2d, out, rg, Some(Box::new(back)), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{mul, sum};
    use crate::tape::Tape;

    #[test]
    fn identity_kernel_passes_input_through() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0));
        let w = tape.input(Tensor::ones(&[1, 1, 1, 1]));
        let y = conv2d(x, w, 1, 0).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn two_by_two_diagonal_kernel() {
        // x = [[1,2],[3,4]], kernel [[1,0],[0,1]] -> 1*1 + 4*1 = 5
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let y = conv2d(x, w, 1, 0).unwrap();
        assert_eq!(y.value().shape(), &[1, 1, 1, 1]);
        assert_eq!(y.value().item(), 5.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.input(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(matches!(conv2d(x, w, 1, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn empty_output_is_rejected() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(conv2d(x, w, 1, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn strided_padded_shape() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 3, 32, 32]));
        let w = tape.input(Tensor::zeros(&[8, 3, 3, 3]));
        let y = conv2d(x, w, 2, 1).unwrap();
        assert_eq!(y.value().shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn matches_the_naive_oracle_across_shapes() {
        let w = Tensor::from_fn(&[4, 3, 3, 3], |i| ((i * 13 + 5) % 23) as f64 * 0.05 - 0.5);
        for side in [20usize, 8] {
            let x = Tensor::from_fn(&[2, 3, side, side], |i| {
                ((i * 37 + 11) % 101) as f64 * 0.01 - 0.5
            });
            for (stride, padding) in [(1, 1), (2, 0)] {
                let got = conv2d_forward(&x, &w, stride, padding).unwrap();
                let want = crate::verify::naive_conv2d(&x, &w, stride, padding).unwrap();
                assert_eq!(got.shape(), want.shape());
                for (a, b) in got.data().iter().zip(want.data()) {
                    assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn gradient_sums_match_direct_expansion() {
        // d/dw sum(conv(x, w)) over a 1x1 kernel equals sum of x
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64));
        let w = tape.leaf(Tensor::ones(&[1, 1, 1, 1]));
        let y = conv2d(x, w, 1, 0).unwrap();
        let loss = sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().item(), 36.0);
    }

    #[test]
    fn input_gradient_respects_weighting() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]));
        let w = tape.input(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = conv2d(x, w, 1, 0).unwrap();
        let r = tape.input(Tensor::full(&[1, 1, 1, 1], 2.0));
        let loss = sum(mul(y, r).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
    }
}
