//! Batch normalization over the (N, H, W) axes of an NCHW tensor.

use crate::error::{Error, Result};
use crate::ops::OpKind;
use crate::scalar::Scalar;
use crate::tape::{same_tape, Var};
use crate::tensor::Tensor;

/// Normalization epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;

/// Batch statistics produced by a training-mode forward pass; the layer uses
/// them to update its running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<E: Scalar> {
    pub mean: Vec<E>,
    /// Biased variance (divisor `m`), the one used for normalization.
    pub var_biased: Vec<E>,
    /// Unbiased variance (divisor `m - 1`), the one folded into running stats.
    pub var_unbiased: Vec<E>,
}

fn check_shapes<E: Scalar>(x: &Tensor<E>, gamma: &Tensor<E>, beta: &Tensor<E>) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::InvalidConfig(format!(
            "batchnorm2d expects an NCHW tensor, got shape {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[1];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::InvalidConfig(format!(
            "batchnorm2d parameter length must be {c}, got gamma {:?} beta {:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(c)
}

/// Applies `y = gamma * (x - mean)/sqrt(var + eps) + beta` per channel with
/// the supplied statistics, returning the output buffer and `x_hat`.
fn normalize<E: Scalar>(
    x: &Tensor<E>,
    gamma: &[E],
    beta: &[E],
    mean: &[E],
    var: &[E],
    eps: E,
) -> (Vec<E>, Vec<E>) {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    let mut xhat = vec![E::zero(); xd.len()];
    for ch in 0..c {
        let inv_std = (var[ch] + eps).sqrt().recip();
        let (m, g, b) = (mean[ch], gamma[ch], beta[ch]);
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in base..base + hw {
                let h = (xd[i] - m) * inv_std;
                xhat[i] = h;
                out[i] = g * h + b;
            }
        }
    }
    (out, xhat)
}

/// Training-mode batch norm: normalizes by batch statistics and returns them
/// so the caller can fold them into running estimates. Differentiates through
/// the batch statistics.
pub fn batchnorm2d_train<'t, E: Scalar>(
    x: Var<'t, E>,
    gamma: Var<'t, E>,
    beta: Var<'t, E>,
) -> Result<(Var<'t, E>, BatchStats<E>)> {
    same_tape(x, gamma)?;
    same_tape(x, beta)?;
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let c = check_shapes(&xv, &gv, &bv)?;
    let s = xv.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let m = n * hw;
    let m_e = E::from_f64(m as f64);
    let eps = E::from_f64(BN_EPS);

    let xd = xv.data();
    let mut mean = vec![E::zero(); c];
    let mut var = vec![E::zero(); c];
    for ch in 0..c {
        let mut acc = E::zero();
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in base..base + hw {
                acc += xd[i];
            }
        }
        let mu = acc / m_e;
        mean[ch] = mu;
        let mut acc2 = E::zero();
        for img in 0..n {
            let base = (img * c + ch) * hw;
            for i in base..base + hw {
                let d = xd[i] - mu;
                acc2 += d * d;
            }
        }
        var[ch] = acc2 / m_e;
    }
    let var_unbiased: Vec<E> = if m > 1 {
        let denom = E::from_f64((m - 1) as f64);
        var.iter().map(|&v| v * m_e / denom).collect()
    } else {
        var.clone()
    };
    let stats = BatchStats {
        mean: mean.clone(),
        var_biased: var.clone(),
        var_unbiased,
    };

    let (out, xhat) = normalize(&xv, gv.data(), bv.data(), &mean, &var, eps);
    let out = Tensor::new(s.to_vec(), out)?;

    let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let (xid, gid, bid) = (x.id(), gamma.id(), beta.id());
    let (xrg, grg, brg) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    let shape = s.to_vec();
    let back = move |g: &Tensor<E>| {
        let gd = g.data();
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];
        for ch in 0..c {
            let mut sg = E::zero();
            let mut sgx = E::zero();
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in base..base + hw {
                    sg += gd[i];
                    sgx += gd[i] * xhat[i];
                }
            }
            dbeta[ch] = sg;
            dgamma[ch] = sgx;
        }
        let mut contribs = Vec::with_capacity(3);
        if xrg {
            // dx = gamma/std * (g - mean(g) - xhat * mean(g*xhat))
            let mut dx = vec![E::zero(); gd.len()];
            for ch in 0..c {
                let inv_std = (var[ch] + eps).sqrt().recip();
                let scale = gv.data()[ch] * inv_std;
                let mg = dbeta[ch] / m_e;
                let mgx = dgamma[ch] / m_e;
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = scale * (gd[i] - mg - xhat[i] * mgx);
                    }
                }
            }
            contribs.push((xid, Tensor::new(shape.clone(), dx).expect("bn dx shape")));
        }
        if grg {
            contribs.push((gid, Tensor::new(vec![c], dgamma).expect("bn dgamma shape")));
        }
        if brg {
            contribs.push((bid, Tensor::new(vec![c], dbeta).expect("bn dbeta shape")));
        }
        contribs
    };
    let out = x.tape().push(OpKind::BatchNorm2d, out, rg, Some(Box::new(back)), None);
    Ok((out, stats))
}

/// Inference-mode batch norm using fixed running statistics.
pub fn batchnorm2d_eval<'t, E: Scalar>(
    x: Var<'t, E>,
    gamma: Var<'t, E>,
    beta: Var<'t, E>,
    running_mean: &Tensor<E>,
    running_var: &Tensor<E>,
) -> Result<Var<'t, E>> {
    same_tape(x, gamma)?;
    same_tape(x, beta)?;
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let c = check_shapes(&xv, &gv, &bv)?;
    if running_mean.shape() != [c] || running_var.shape() != [c] {
        return Err(Error::InvalidConfig(format!(
            "running statistics must have length {c}, got {:?} and {:?}",
            running_mean.shape(),
            running_var.shape()
        )));
    }
    let s = xv.shape();
    let (n, hw) = (s[0], s[2] * s[3]);
    let eps = E::from_f64(BN_EPS);
    let mean = running_mean.data().to_vec();
    let var = running_var.data().to_vec();
    let (out, xhat) = normalize(&xv, gv.data(), bv.data(), &mean, &var, eps);
    let out = Tensor::new(s.to_vec(), out)?;

    let rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
    let (xid, gid, bid) = (x.id(), gamma.id(), beta.id());
    let (xrg, grg, brg) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    let shape = s.to_vec();
    let back = move |g: &Tensor<E>| {
        let gd = g.data();
        let mut contribs = Vec::with_capacity(3);
        if xrg {
            let mut dx = vec![E::zero(); gd.len()];
            for ch in 0..c {
                let scale = gv.data()[ch] * (var[ch] + eps).sqrt().recip();
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for i in base..base + hw {
                        dx[i] = gd[i] * scale;
                    }
                }
            }
            contribs.push((xid, Tensor::new(shape.clone(), dx).expect("bn eval dx")));
        }
        if grg || brg {
            let mut dgamma = vec![E::zero(); c];
            let mut dbeta = vec![E::zero(); c];
            for ch in 0..c {
                for img in 0..n {
                    let base = (img * c + ch) * hw;
                    for i in base..base + hw {
                        dbeta[ch] += gd[i];
                        dgamma[ch] += gd[i] * xhat[i];
                    }
                }
            }
            if grg {
                contribs.push((gid, Tensor::new(vec![c], dgamma).expect("bn eval dgamma")));
            }
            if brg {
                contribs.push((bid, Tensor::new(vec![c], dbeta).expect("bn eval dbeta")));
            }
        }
        contribs
    };
    Ok(x.tape().push(OpKind::BatchNorm2d, out, rg, Some(Box::new(back)), None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;

    #[test]
    fn training_mode_normalizes_to_unit_stats() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 3, 4, 4], |i| (i as f64 * 0.37).sin() * 3.0 + 1.0));
        let gamma = tape.input(Tensor::ones(&[3]));
        let beta = tape.input(Tensor::zeros(&[3]));
        let (y, stats) = batchnorm2d_train(x, gamma, beta).unwrap();
        let yv = y.value();
        let yd = yv.data();
        let hw = 16;
        for ch in 0..3 {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for img in 0..2 {
                let base = (img * 3 + ch) * hw;
                for i in base..base + hw {
                    sum += yd[i];
                    sum2 += yd[i] * yd[i];
                }
            }
            let m = 32.0;
            let mean = sum / m;
            let var = sum2 / m - mean * mean;
            assert!(mean.abs() < 1e-10, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
        }
        assert_eq!(stats.mean.len(), 3);
    }

    #[test]
    fn eval_mode_with_identity_stats_passes_through() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64 * 0.5 - 1.0));
        let gamma = tape.input(Tensor::ones(&[2]));
        let beta = tape.input(Tensor::zeros(&[2]));
        let rm = Tensor::zeros(&[2]);
        let rv = Tensor::ones(&[2]);
        let y = batchnorm2d_eval(x, gamma, beta, &rm, &rv).unwrap();
        // identity up to the 1/sqrt(1 + eps) factor
        for (a, b) in y.value().data().iter().zip(x.value().data()) {
            assert!((a - b).abs() < 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn channel_mismatch_is_invalid_config() {
        let tape: Tape<f64> = Tape::new();
        let x = tape.input(Tensor::zeros(&[1, 3, 2, 2]));
        let gamma = tape.input(Tensor::ones(&[2]));
        let beta = tape.input(Tensor::zeros(&[3]));
        assert!(matches!(
            batchnorm2d_train(x, gamma, beta),
            Err(Error::InvalidConfig(_))
        ));
    }
}
