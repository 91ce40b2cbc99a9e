//! Fully connected layer and the classification loss.

use crate::error::{Error, Result};
use crate::linalg::{matmul, transpose};
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tape::{same_tape, Var};
use crate::tensor::Tensor;

/// `y = x @ w^T + b` with `x: [N, F]`, `w: [C, F]`, `b: [C]`.
pub fn linear<'t, E: Scalar>(x: Var<'t, E>, w: Var<'t, E>, b: Var<'t, E>) -> Result<Var<'t, E>> {
    same_tape(x, w)?;
    same_tape(x, b)?;
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    if xv.rank() != 2 || wv.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "linear expects 2-d input and weight, got {:?} and {:?}",
            xv.shape(),
            wv.shape()
        )));
    }
    let (n, f) = (xv.shape()[0], xv.shape()[1]);
    let (c, wf) = (wv.shape()[0], wv.shape()[1]);
    if f != wf || bv.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "linear shapes disagree: x {:?}, w {:?}, b {:?}",
            xv.shape(),
            wv.shape(),
            bv.shape()
        )));
    }
    let wt = transpose(wv.data(), c, f);
    let mut out = matmul(xv.data(), &wt, n, f, c);
    for row in out.chunks_mut(c) {
        for (o, &bias) in row.iter_mut().zip(bv.data()) {
            *o += bias;
        }
    }
    let out = Tensor::new(vec![n, c], out)?;
    let rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
    let (xid, wid, bid) = (x.id(), w.id(), b.id());
    let (xrg, wrg, brg) = (x.requires_grad(), w.requires_grad(), b.requires_grad());
    let back = move |g: &Tensor<E>| {
        let gd = g.data();
        let mut contribs = Vec::with_capacity(3);
        if xrg {
            let dx = matmul(gd, wv.data(), n, c, f);
            contribs.push((xid, Tensor::new(vec![n, f], dx).expect("linear dx")));
        }
        if wrg {
            let gt = transpose(gd, n, c);
            let dw = matmul(&gt, xv.data(), c, n, f);
            contribs.push((wid, Tensor::new(vec![c, f], dw).expect("linear dw")));
        }
        if brg {
            let mut db = vec![E::zero(); c];
            for row in gd.chunks_exact(c) {
                for (acc, &gv) in db.iter_mut().zip(row) {
                    *acc += gv;
                }
            }
            contribs.push((bid, Tensor::new(vec![c], db).expect("linear db")));
        }
        contribs
    };
    Ok(x.tape().push(OpKind::Linear, out, rg, Some(Box::new(back)), None))
}

/// Mean cross-entropy of `logits: [N, C]` against integer labels, computed
/// through the max-shifted log-sum-exp. Softmax lives inside this op.
pub fn cross_entropy<'t, E: Scalar>(logits: Var<'t, E>, labels: &[usize]) -> Result<Var<'t, E>> {
    let lv = logits.value();
    if lv.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cross_entropy expects [N, C] logits, got {:?}",
            lv.shape()
        )));
    }
    let (n, c) = (lv.shape()[0], lv.shape()[1]);
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Domain(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let ld = lv.data();
    let mut loss = E::zero();
    // softmax probabilities, kept for the backward pass
    let mut probs = vec![E::zero(); n * c];
    for (row_idx, row) in ld.chunks_exact(c).enumerate() {
        let max = row.iter().copied().fold(E::neg_infinity(), E::max);
        let mut denom = E::zero();
        for (p, &z) in probs[row_idx * c..(row_idx + 1) * c].iter_mut().zip(row) {
            let e = (z - max).exp();
            *p = e;
            denom += e;
        }
        let lse = max + denom.ln();
        loss += lse - row[labels[row_idx]];
        let inv = denom.recip();
        for p in &mut probs[row_idx * c..(row_idx + 1) * c] {
            *p = *p * inv;
        }
    }
    let n_e = E::from_f64(n as f64);
    let out = Tensor::scalar(loss / n_e);
    let rg = logits.requires_grad();
    let lid = logits.id();
    let labels = labels.to_vec();
    let back = move |g: &Tensor<E>| {
        let scale = g.item() / n_e;
        let mut dl = probs.clone();
        for (row_idx, &label) in labels.iter().enumerate() {
            dl[row_idx * c + label] -= E::one();
        }
        for v in &mut dl {
            *v = *v * scale;
        }
        vec![(lid, Tensor::new(vec![n, c], dl).expect("ce dlogits"))]
    };
    Ok(logits
        .tape()
        .push(OpKind::CrossEntropy, out, rg, Some(Box::new(back)), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn linear_identity_weight() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap());
        let w = tape.input(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = tape.input(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap());
        let y = linear(x, w, b).unwrap();
        assert_eq!(y.value().data(), &[3.5, 3.5]);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.input(Tensor::zeros(&[4, 10]));
        let loss = cross_entropy(logits, &[0, 3, 7, 9]).unwrap();
        assert!((loss.value().item() - (10.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_domain_error() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.input(Tensor::zeros(&[1, 3]));
        assert!(matches!(cross_entropy(logits, &[3]), Err(Error::Domain(_))));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let g = logits.grad().unwrap();
        assert!((g.data()[0] - 0.5).abs() < 1e-12);
        assert!((g.data()[1] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let tape: Tape<f64> = Tape::new();
        let logits = tape.input(Tensor::new(vec![1, 2], vec![1e4, -1e4]).unwrap());
        let loss = cross_entropy(logits, &[0]).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }
}
