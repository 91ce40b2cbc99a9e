//! Elementwise and reduction operations.

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tape::{same_tape, Var};
use crate::tensor::{broadcast_zip, reduce_to_shape, Tensor};

fn binary<'t, E: Scalar>(
    op: OpKind,
    a: Var<'t, E>,
    b: Var<'t, E>,
    forward: impl Fn(E, E) -> E + Sync,
    backward: impl Fn(&Tensor<E>, &Tensor<E>, &Tensor<E>) -> (Option<Tensor<E>>, Option<Tensor<E>>)
        + 'static,
) -> Result<Var<'t, E>> {
    same_tape(a, b)?;
    let av = a.value();
    let bv = b.value();
    let out = broadcast_zip(&av, &bv, forward)?;
    let rg = a.requires_grad() || b.requires_grad();
    let (aid, bid) = (a.id(), b.id());
    let (ashape, bshape) = (av.shape().to_vec(), bv.shape().to_vec());
    let (arg, brg) = (a.requires_grad(), b.requires_grad());
    let back = move |g: &Tensor<E>| {
        let (ga, gb) = backward(g, &av, &bv);
        let mut contribs = Vec::with_capacity(2);
        if arg {
            if let Some(ga) = ga {
                contribs.push((aid, reduce_to_shape(&ga, &ashape)));
            }
        }
        if brg {
            if let Some(gb) = gb {
                contribs.push((bid, reduce_to_shape(&gb, &bshape)));
            }
        }
        contribs
    };
    Ok(a.tape().push(op, out, rg, Some(Box::new(back)), None))
}

/// Elementwise `a + b` with broadcasting over size-1 axes.
pub fn add<'t, E: Scalar>(a: Var<'t, E>, b: Var<'t, E>) -> Result<Var<'t, E>> {
    binary(OpKind::Add, a, b, |x, y| x + y, |g, _, _| {
        (Some(g.clone()), Some(g.clone()))
    })
}

/// Elementwise `a - b` with broadcasting.
pub fn sub<'t, E: Scalar>(a: Var<'t, E>, b: Var<'t, E>) -> Result<Var<'t, E>> {
    binary(OpKind::Sub, a, b, |x, y| x - y, |g, _, _| {
        (Some(g.clone()), Some(g.map(|v| -v)))
    })
}

/// Elementwise `a * b` with broadcasting.
pub fn mul<'t, E: Scalar>(a: Var<'t, E>, b: Var<'t, E>) -> Result<Var<'t, E>> {
    binary(OpKind::Mul, a, b, |x, y| x * y, |g, av, bv| {
        let ga = broadcast_zip(g, bv, |gv, v| gv * v).expect("mul backward shapes");
        let gb = broadcast_zip(g, av, |gv, v| gv * v).expect("mul backward shapes");
        (Some(ga), Some(gb))
    })
}

fn unary<'t, E: Scalar>(
    op: OpKind,
    x: Var<'t, E>,
    out: Tensor<E>,
    dx: impl Fn(&Tensor<E>) -> Tensor<E> + 'static,
) -> Var<'t, E> {
    let rg = x.requires_grad();
    let xid = x.id();
    let back = move |g: &Tensor<E>| {
        let factor = dx(g);
        vec![(xid, factor)]
    };
    x.tape().push(op, out, rg, Some(Box::new(back)), None)
}

/// Natural logarithm. Errors when any element is non-positive; callers keep
/// inputs positive via [`clamp_min`] or [`max_scalar`].
pub fn log<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    if let Some(bad) = xv.data().iter().find(|v| **v <= E::zero()) {
        return Err(Error::Domain(format!("log of non-positive value {bad}")));
    }
    let out = xv.map(|v| v.ln());
    Ok(unary(OpKind::Log, x, out, move |g| {
        g.zip_map(&xv, |gv, v| gv / v).expect("log backward shape")
    }))
}

/// Elementwise exponential.
pub fn exp<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let out = x.value().map(|v| v.exp());
    let outc = out.clone();
    Ok(unary(OpKind::Exp, x, out, move |g| {
        g.zip_map(&outc, |gv, y| gv * y).expect("exp backward shape")
    }))
}

/// Exponential that fails instead of overflowing to infinity.
///
/// Signals divergence to the training loop when the log-domain activation
/// exceeds the representable range of the element type.
pub fn exp_checked<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    let limit = E::exp_overflow_limit();
    if let Some(bad) = xv.data().iter().find(|v| **v > limit || !v.is_finite()) {
        return Err(Error::NumericalOverflow(format!(
            "pre-exp activation {bad} exceeds exp limit {limit}"
        )));
    }
    exp(x)
}

#[inline]
fn sigmoid<E: Scalar>(v: E) -> E {
    let one = E::one();
    if v >= E::zero() {
        one / (one + (-v).exp())
    } else {
        let ev = v.exp();
        ev / (one + ev)
    }
}

#[inline]
fn softplus_value<E: Scalar>(v: E) -> E {
    // log(1 + exp(v)) written to avoid overflow for large |v|
    if v > E::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// `softplus(x) = log(1 + exp(x))`.
pub fn softplus<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    let out = xv.map(softplus_value);
    Ok(unary(OpKind::Softplus, x, out, move |g| {
        g.zip_map(&xv, |gv, v| gv * sigmoid(v)).expect("softplus backward shape")
    }))
}

/// Elementwise `max(x, c)` for a constant scalar.
///
/// Backward passes gradient only where `x > c`; clamped entries (including
/// exact ties) get zero, the subgradient convention.
pub fn clamp_min<'t, E: Scalar>(x: Var<'t, E>, c: E) -> Result<Var<'t, E>> {
    let xv = x.value();
    let out = xv.map(|v| v.max(c));
    Ok(unary(OpKind::ClampMin, x, out, move |g| {
        g.zip_map(&xv, |gv, v| if v > c { gv } else { E::zero() })
            .expect("clamp_min backward shape")
    }))
}

/// Elementwise `max(x, t)` against a one-element tensor `t`.
///
/// Where `x` is clamped (`x <= t`) the gradient flows to `t` instead of `x`,
/// which is how the product unit's trainable threshold receives its signal.
pub fn max_scalar<'t, E: Scalar>(x: Var<'t, E>, t: Var<'t, E>) -> Result<Var<'t, E>> {
    same_tape(x, t)?;
    let tv = t.value();
    if tv.numel() != 1 {
        return Err(Error::ShapeMismatch(format!(
            "max_scalar threshold must hold one element, got shape {:?}",
            tv.shape()
        )));
    }
    let thr = tv.item();
    let xv = x.value();
    let out = xv.map(|v| v.max(thr));
    let rg = x.requires_grad() || t.requires_grad();
    let (xid, tid) = (x.id(), t.id());
    let (xrg, trg) = (x.requires_grad(), t.requires_grad());
    let tshape = tv.shape().to_vec();
    let back = move |g: &Tensor<E>| {
        let mut contribs = Vec::with_capacity(2);
        if xrg {
            let gx = g
                .zip_map(&xv, |gv, v| if v > thr { gv } else { E::zero() })
                .expect("max_scalar backward shape");
            contribs.push((xid, gx));
        }
        if trg {
            let mut acc = E::zero();
            for (gv, v) in g.data().iter().zip(xv.data().iter()) {
                if *v <= thr {
                    acc += *gv;
                }
            }
            contribs.push((tid, Tensor::full(&tshape, acc)));
        }
        contribs
    };
    Ok(x.tape().push(OpKind::MaxScalar, out, rg, Some(Box::new(back)), None))
}

/// Rectified linear unit.
pub fn relu<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    let out = xv.map(|v| v.max(E::zero()));
    Ok(unary(OpKind::Relu, x, out, move |g| {
        g.zip_map(&xv, |gv, v| if v > E::zero() { gv } else { E::zero() })
            .expect("relu backward shape")
    }))
}

/// Sum of all elements, producing a rank-0 scalar.
pub fn sum<'t, E: Scalar>(x: Var<'t, E>) -> Result<Var<'t, E>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let out = Tensor::scalar(xv.sum());
    Ok(unary(OpKind::Sum, x, out, move |g| {
        Tensor::full(&shape, g.item())
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn add_matches_elementwise_definition() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.input(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap());
        let b = tape.input(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        assert_eq!(add(a, b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_ones_is_identity() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap());
        let ones = tape.input(Tensor::ones(&[3]));
        assert_eq!(mul(x, ones).unwrap().value().data(), x.value().data());
    }

    #[test]
    fn add_rejects_incompatible_shapes() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.input(Tensor::zeros(&[4, 3]));
        assert!(matches!(add(a, b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn grad_of_sum_mul_is_other_operand() {
        let tape: Tape<f64> = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![0.3, 0.7]).unwrap());
        let b = tape.input(Tensor::new(vec![2], vec![2.0, 5.0]).unwrap());
        let loss = sum(mul(a, b).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(a.grad().unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn exp_log_inverse_pair() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![2.0, 5.0]).unwrap());
        let y = exp(log(x).unwrap()).unwrap();
        let v = y.value();
        assert!((v.data()[0] - 2.0).abs() < 1e-12);
        assert!((v.data()[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(log(x), Err(Error::Domain(_))));
    }

    #[test]
    fn softplus_at_zero_is_ln_two() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::scalar(0.0));
        let y = softplus(x).unwrap().value().item();
        assert!((y - 0.6931471805599453).abs() < 1e-12);
    }

    #[test]
    fn softplus_is_stable_for_large_inputs() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![800.0, -800.0]).unwrap());
        let y = softplus(x).unwrap().value();
        assert_eq!(y.data()[0], 800.0);
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn clamp_min_forward_and_subgradient() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap());
        let y = clamp_min(x, 0.1).unwrap();
        assert_eq!(y.value().data(), &[0.1, 0.5]);
        let loss = sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn max_scalar_routes_gradient_to_threshold() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.2, 0.9, 0.4]).unwrap());
        let t = tape.leaf(Tensor::scalar(0.5));
        let y = max_scalar(x, t).unwrap();
        assert_eq!(y.value().data(), &[0.5, 0.9, 0.5]);
        let loss = sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
        assert_eq!(t.grad().unwrap().item(), 2.0);
    }

    #[test]
    fn relu_forward() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![2], vec![-2.0, 3.0]).unwrap());
        assert_eq!(relu(x).unwrap().value().data(), &[0.0, 3.0]);
    }

    #[test]
    fn exp_checked_flags_overflow() {
        let tape: Tape<f32> = Tape::new();
        let x = tape.input(Tensor::scalar(100.0f32));
        assert!(matches!(exp_checked(x), Err(Error::NumericalOverflow(_))));
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::scalar(100.0f64));
        assert!(exp_checked(x).is_ok());
    }

    #[test]
    fn broadcast_backward_sums_over_expanded_axes() {
        // b has shape [1, 3] broadcast against a [2, 3]
        let tape: Tape<f64> = Tape::new();
        let a = tape.input(Tensor::new(vec![2, 3], vec![1.0; 6]).unwrap());
        let b = tape.leaf(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let loss = sum(mul(a, b).unwrap()).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
