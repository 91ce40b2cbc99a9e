//! The 2D product-unit convolution.
//!
//! A product unit raises each input in the receptive field to a learned
//! exponent and multiplies the results. Evaluated in the log domain this is
//! clamp -> log -> convolve -> exp, where the clamp threshold
//! `softplus(theta) + 1e-7` is itself trainable. [`pu_oracle`] evaluates the
//! product form directly and serves as the independent reference for the
//! exp-log pipeline.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Parameter, Tape, Var};
use crate::tensor::Tensor;

/// Additive shift keeping the clamp threshold strictly positive.
pub const EPSILON_SHIFT: f64 = 1e-7;

/// Convolutional product-unit layer: exponent weights plus one trainable
/// threshold scalar per layer.
pub struct ProductUnitConv2d<E: Scalar> {
    /// Exponent weights, shape `[Cout, Cin, k, k]`.
    pub weight: Rc<Parameter<E>>,
    /// Trainable threshold parameter, shape `[]`.
    pub theta: Rc<Parameter<E>>,
    pub stride: usize,
    pub padding: usize,
}

fn softplus_scalar<E: Scalar>(v: E) -> E {
    if v > E::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

impl<E: Scalar> ProductUnitConv2d<E> {
    /// Creates a layer with zeroed weights and `theta = 0`; real
    /// initialization happens in [`crate::init`].
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[cout, cin, k, k])),
            theta: Parameter::new(Tensor::scalar(E::zero())),
            stride,
            padding,
        }
    }

    /// Current clamp threshold `softplus(theta) + 1e-7`, strictly positive
    /// for every finite theta.
    pub fn threshold(&self) -> E {
        softplus_scalar(self.theta.value().item()) + E::from_f64(EPSILON_SHIFT)
    }

    /// Forward pass of the exp-log pipeline.
    ///
    /// Inputs are clamped from below by the threshold, logged, convolved with
    /// the exponent weights (zero padding applied in the log domain, i.e. the
    /// multiplicative identity), and exponentiated. The log-domain sum runs
    /// over input channels as well as the spatial window. Gradients flow to
    /// the input, the weights, and theta.
    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let theta = tape.param(&self.theta);
        let shift = tape.input(Tensor::scalar(E::from_f64(EPSILON_SHIFT)));
        let threshold = ops::add(ops::softplus(theta)?, shift)?;
        let clamped = ops::max_scalar(x, threshold)?;
        let z = ops::log(clamped)?;
        let w = tape.param(&self.weight);
        let pre = ops::conv2d(z, w, self.stride, self.padding)?;
        ops::exp_checked(pre)
    }
}

/// Direct product-form evaluation: every receptive-field element is clamped
/// to the threshold, raised to its exponent weight, and multiplied across the
/// window and the input channels. Padded positions contribute a factor of
/// one. Used exclusively as a test oracle; computes no gradients.
pub fn pu_oracle<E: Scalar>(layer: &ProductUnitConv2d<E>, x: &Tensor<E>) -> Result<Tensor<E>> {
    let w = layer.weight.value();
    if x.rank() != 4 || w.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "pu_oracle expects 4-d input and kernel, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if cin != wcin {
        return Err(Error::ShapeMismatch(format!(
            "pu_oracle channel mismatch: input has {cin}, kernel expects {wcin}"
        )));
    }
    let (stride, padding) = (layer.stride, layer.padding);
    let (oh, ow) = ops::conv_output_hw(h, wd, kh, kw, stride, padding)?;
    let threshold = layer.threshold();
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![E::zero(); n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let base_i = (oi * stride) as isize - padding as isize;
                    let base_j = (oj * stride) as isize - padding as isize;
                    let mut prod = E::one();
                    for ci in 0..cin {
                        for ki in 0..kh {
                            let ii = base_i + ki as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..kw {
                                let jj = base_j + kj as isize;
                                if jj < 0 || jj >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((img * cin + ci) * h + ii as usize) * wd + jj as usize]
                                    .max(threshold);
                                let exponent = wv[((co * cin + ci) * kh + ki) * kw + kj];
                                prod = prod * xv.powf(exponent);
                            }
                        }
                    }
                    if !prod.is_finite() {
                        return Err(Error::NumericalOverflow(format!(
                            "pu_oracle produced non-finite output {prod}"
                        )));
                    }
                    out[((img * cout + co) * oh + oi) * ow + oj] = prod;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Analytic theta gradient under the clamp:
/// `dL/dtheta = sum over clamped positions of dL/dz * sigmoid(theta) / threshold`,
/// where `z` is the post-log value. A second route for checking what the tape
/// computes through softplus and the clamp.
pub fn theta_gradient_oracle<E: Scalar>(
    layer: &ProductUnitConv2d<E>,
    x: &Tensor<E>,
    grad_post_log: &Tensor<E>,
) -> Result<E> {
    if x.shape() != grad_post_log.shape() {
        return Err(Error::ShapeMismatch(format!(
            "theta gradient oracle: input {:?} vs upstream {:?}",
            x.shape(),
            grad_post_log.shape()
        )));
    }
    let theta = layer.theta.value().item();
    let threshold = layer.threshold();
    let sig = E::one() / (E::one() + (-theta).exp());
    let mut acc = E::zero();
    for (&v, &g) in x.data().iter().zip(grad_post_log.data()) {
        if v <= threshold {
            acc += g * sig / threshold;
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn layer_with(
        weights: Tensor<f64>,
        theta: f64,
        stride: usize,
        padding: usize,
    ) -> ProductUnitConv2d<f64> {
        let shape = weights.shape().to_vec();
        let layer = ProductUnitConv2d::new(shape[1], shape[0], shape[2], stride, padding);
        layer.weight.set_value(weights);
        layer.theta.set_value(Tensor::scalar(theta));
        layer
    }

    #[test]
    fn threshold_is_strictly_positive() {
        let layer: ProductUnitConv2d<f64> = ProductUnitConv2d::new(1, 1, 3, 1, 1);
        layer.theta.set_value(Tensor::scalar(-60.0));
        assert!(layer.threshold() > 0.0);
        layer.theta.set_value(Tensor::scalar(0.0));
        assert!((layer.threshold() - (2f64.ln() + 1e-7)).abs() < 1e-12);
    }

    #[test]
    fn all_ones_input_maps_to_ones() {
        let layer = layer_with(
            Tensor::from_fn(&[2, 1, 2, 2], |i| 0.3 * i as f64 - 0.5),
            0.0,
            1,
            0,
        );
        let tape = Tape::new();
        let x = tape.input(Tensor::ones(&[1, 1, 4, 4]));
        let y = layer.forward(&tape, x).unwrap();
        assert!(y
            .value()
            .data()
            .iter()
            .all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn square_root_of_four_is_two() {
        // single pixel 4.0 through a 1x1 kernel with exponent 0.5
        let layer = layer_with(Tensor::full(&[1, 1, 1, 1], 0.5), 0.0, 1, 0);
        let tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 1, 1], 4.0));
        let y = layer.forward(&tape, x).unwrap();
        assert!((y.value().item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_two_by_two_products() {
        let layer = layer_with(Tensor::ones(&[1, 1, 2, 2]), 0.0, 1, 0);
        let x = Tensor::full(&[1, 1, 2, 2], 2.0);
        let y = pu_oracle(&layer, &x).unwrap();
        assert!((y.item() - 16.0).abs() < 1e-12);

        let layer = layer_with(Tensor::full(&[1, 1, 2, 2], 0.25), 0.0, 1, 0);
        let y = pu_oracle(&layer, &x).unwrap();
        assert!((y.item() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn forward_matches_oracle_on_random_positive_input() {
        let mut rng = crate::util::rng_from(42);
        let layer = layer_with(
            Tensor::from_fn(&[2, 2, 2, 2], |_| rng.random_range(-0.8..0.8)),
            0.0,
            1,
            0,
        );
        let x = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.random_range(0.8..2.0));
        let tape = Tape::new();
        let xv = tape.input(x.clone());
        let fast = layer.forward(&tape, xv).unwrap().value();
        let slow = pu_oracle(&layer, &x).unwrap();
        for (a, b) in fast.data().iter().zip(slow.data()) {
            let rel = (a - b).abs() / b.abs().max(1e-12);
            assert!(rel < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_output_is_strictly_positive() {
        let mut rng = crate::util::rng_from(7);
        let layer = layer_with(
            Tensor::from_fn(&[3, 2, 3, 3], |_| rng.random_range(-0.5..0.5)),
            0.0,
            2,
            1,
        );
        let tape = Tape::new();
        let x = tape.input(Tensor::from_fn(&[2, 2, 8, 8], |_| rng.random_range(-1.0..1.0)));
        let y = layer.forward(&tape, x).unwrap();
        assert!(y.value().data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn overflow_is_reported_not_propagated() {
        // 3^700 = e^769 exceeds the f64 exp limit of ~709.8
        let layer = layer_with(Tensor::full(&[1, 1, 1, 1], 700.0), 0.0, 1, 0);
        let tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 1, 1], 3.0));
        assert!(matches!(
            layer.forward(&tape, x),
            Err(Error::NumericalOverflow(_))
        ));
    }

    #[test]
    fn theta_grad_zero_when_nothing_clamped() {
        let layer = layer_with(Tensor::ones(&[1, 1, 2, 2]), 0.0, 1, 0);
        let tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 2, 2], 5.0));
        let y = layer.forward(&tape, x).unwrap();
        let loss = ops::sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(layer.theta.grad().unwrap().item(), 0.0);
        layer.theta.zero_grad();
    }

    #[test]
    fn theta_grad_all_clamped_is_sigmoid_per_pixel() {
        // 1x1 kernel, weight 1: y = exp(log t) = t per pixel, dy/dtheta = sigmoid(theta)
        let theta = 0.4;
        let layer = layer_with(Tensor::ones(&[1, 1, 1, 1]), theta, 1, 0);
        let tape = Tape::new();
        let x = tape.input(Tensor::full(&[1, 1, 2, 2], 0.01));
        let y = layer.forward(&tape, x).unwrap();
        let loss = ops::sum(y).unwrap();
        tape.backward(loss).unwrap();
        let got = layer.theta.grad().unwrap().item();
        let sigmoid = 1.0 / (1.0 + (-theta as f64).exp());
        let expected = 4.0 * sigmoid; // four clamped pixels
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }
}
