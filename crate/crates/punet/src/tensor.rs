//! Dense row-major n-dimensional tensors.
//!
//! Tensors are immutable values backed by a shared buffer; cloning is cheap
//! and copy-on-write happens through [`Tensor::make_mut`].

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Element count above which pointwise passes run on the worker pool.
/// Chunked pointwise work is bitwise deterministic for any thread count.
const PAR_ELEMS: usize = 1 << 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Scalar> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
}

impl<E: Scalar> Tensor<E> {
    /// Builds a tensor from a shape and a row-major buffer.
    ///
    /// The empty shape `[]` denotes a scalar holding one element.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but buffer has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(v: E) -> Self {
        Self {
            shape: Vec::new(),
            data: Arc::new(vec![v]),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, E::one())
    }

    pub fn full(shape: &[usize], v: E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![v; numel]),
        }
    }

    /// Fills a tensor by calling `f` with each row-major linear index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..numel).map(&mut f).collect()),
        }
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access to the buffer, cloning it first if shared.
    pub fn make_mut(&mut self) -> &mut [E] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1, "item() on tensor with {} elements", self.numel());
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) || numel != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} ({} elements) to {shape:?}",
                self.shape,
                self.numel()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(E) -> E + Sync) -> Self {
        let data = if self.numel() >= PAR_ELEMS {
            let mut out = vec![E::zero(); self.numel()];
            out.par_chunks_mut(PAR_ELEMS)
                .zip(self.data.par_chunks(PAR_ELEMS))
                .for_each(|(dst, src)| {
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = f(s);
                    }
                });
            out
        } else {
            self.data.iter().map(|&v| f(v)).collect()
        };
        Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(E, E) -> E + Sync) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "zip_map on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = if self.numel() >= PAR_ELEMS {
            let mut out = vec![E::zero(); self.numel()];
            out.par_chunks_mut(PAR_ELEMS)
                .zip(self.data.par_chunks(PAR_ELEMS).zip(other.data.par_chunks(PAR_ELEMS)))
                .for_each(|(dst, (a, b))| {
                    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
                        *d = f(x, y);
                    }
                });
            out
        } else {
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        Ok(Self {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    /// Adds `other` into `self` in place; shapes must match.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "add_assign on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let dst = self.make_mut();
        if dst.len() >= PAR_ELEMS {
            dst.par_chunks_mut(PAR_ELEMS)
                .zip(other.data.par_chunks(PAR_ELEMS))
                .for_each(|(d, s)| {
                    for (dv, &sv) in d.iter_mut().zip(s) {
                        *dv += sv;
                    }
                });
        } else {
            for (d, &s) in dst.iter_mut().zip(other.data.iter()) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn sum(&self) -> E {
        self.data.iter().copied().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Casts every element through f64 into another scalar type.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|v| T::from_f64(v.as_f64())).collect()),
        }
    }
}

/// Shape of `a (op) b` under broadcasting over size-1 axes, aligned from the
/// trailing dimension.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return Err(Error::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
    }
    Ok(out)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

/// Strides for reading a tensor of `shape` as if it had `out_shape`,
/// with zero stride along broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - shape.len();
    let base = contiguous_strides(shape);
    let mut strides = vec![0usize; rank];
    for i in 0..shape.len() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { base[i] };
    }
    strides
}

/// Elementwise combination of two broadcast-compatible tensors.
pub fn broadcast_zip<E: Scalar>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: impl Fn(E, E) -> E + Sync,
) -> Result<Tensor<E>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, f);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let ad = a.data();
    let bd = b.data();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut oa = 0usize;
    let mut ob = 0usize;
    let mut out = Vec::with_capacity(numel);
    for _ in 0..numel {
        out.push(f(ad[oa], bd[ob]));
        // advance the multi-index in row-major order
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            oa += sa[axis];
            ob += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            oa -= sa[axis] * out_shape[axis];
            ob -= sb[axis] * out_shape[axis];
        }
    }
    Tensor::new(out_shape, out)
}

/// Reduces `grad` (shaped like a broadcast result) back to `target_shape`
/// by summing over expanded axes. This is the backward rule for broadcasting.
pub fn reduce_to_shape<E: Scalar>(grad: &Tensor<E>, target_shape: &[usize]) -> Tensor<E> {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let rank = grad.rank();
    let offset = rank - target_shape.len();
    let out_numel: usize = target_shape.iter().product();
    let mut out = vec![E::zero(); out_numel];
    let strides = {
        // target strides positioned under the trailing axes, zero elsewhere
        let base = contiguous_strides(target_shape);
        let mut s = vec![0usize; rank];
        for i in 0..target_shape.len() {
            s[offset + i] = if target_shape[i] == 1 { 0 } else { base[i] };
        }
        s
    };
    let gshape = grad.shape();
    let gdata = grad.data();
    let mut idx = vec![0usize; rank];
    let mut o = 0usize;
    for &g in gdata.iter() {
        out[o] += g;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            o += strides[axis];
            if idx[axis] < gshape[axis] {
                break;
            }
            idx[axis] = 0;
            o -= strides[axis] * gshape[axis];
        }
    }
    Tensor::new(target_shape.to_vec(), out).expect("reduce_to_shape size")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_buffer() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let t = Tensor::scalar(3.0f64);
        assert_eq!(t.shape(), &[] as &[usize]);
        assert_eq!(t.numel(), 1);
        assert_eq!(t.item(), 3.0);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[2, 2]).unwrap(), vec![2, 2]);
        assert!(broadcast_shape(&[2, 3], &[4, 3]).is_err());
    }

    #[test]
    fn broadcast_zip_matches_manual() {
        let a = Tensor::new(vec![2, 1], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 3], vec![10.0f64, 20.0, 30.0]).unwrap();
        let c = broadcast_zip(&a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
    }

    #[test]
    fn reduce_undoes_broadcast() {
        let g = Tensor::new(vec![2, 3], vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = reduce_to_shape(&g, &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
        let r = reduce_to_shape(&g, &[3]);
        assert_eq!(r.data(), &[5.0, 7.0, 9.0]);
        let r = reduce_to_shape(&g, &[]);
        assert_eq!(r.data(), &[21.0]);
    }
}
