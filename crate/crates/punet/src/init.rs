//! Weight initialization.
//!
//! Product-unit exponents use Kaiming-uniform with negative-slope parameter
//! `a = 5`, which shrinks them toward zero and keeps early products near one.
//! Plain convolutions use Kaiming-normal over fan-out with ReLU gain, batch
//! norm starts at gamma 1 / beta 0, thresholds at zero, and the classifier at
//! the usual uniform fan-in bounds.

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arch::{LayerVisitor, Network};
use crate::nn::{BatchNorm2d, Conv2d, Linear};
use crate::pu::ProductUnitConv2d;
use crate::scalar::Scalar;
use crate::tape::Parameter;
use crate::tensor::Tensor;
use crate::util::rng_from;

/// Negative-slope parameter for the product-unit exponent initialization.
pub const PRODUCT_UNIT_SLOPE: f64 = 5.0;

/// Uniform bound `sqrt(6 / ((1 + a^2) * fan_in))`.
pub fn kaiming_uniform_bound(fan_in: usize, a: f64) -> f64 {
    (6.0 / ((1.0 + a * a) * fan_in as f64)).sqrt()
}

fn fill_uniform<E: Scalar>(param: &Parameter<E>, bound: f64, rng: &mut StdRng) {
    let shape = param.shape();
    param.set_value(Tensor::from_fn(&shape, |_| {
        E::from_f64(rng.random_range(-bound..bound))
    }));
}

fn fill_normal<E: Scalar>(param: &Parameter<E>, std: f64, rng: &mut StdRng) {
    let dist = Normal::new(0.0, std).expect("positive std");
    let shape = param.shape();
    param.set_value(Tensor::from_fn(&shape, |_| E::from_f64(dist.sample(rng))));
}

struct Initializer<'r> {
    rng: &'r mut StdRng,
}

impl<E: Scalar> LayerVisitor<E> for Initializer<'_> {
    fn conv(&mut self, layer: &Conv2d<E>) {
        // Kaiming-normal over fan-out with ReLU gain sqrt(2)
        let shape = layer.weight.shape();
        let fan_out = shape[0] * shape[2] * shape[3];
        fill_normal(&layer.weight, (2.0 / fan_out as f64).sqrt(), self.rng);
    }

    fn product_unit(&mut self, layer: &ProductUnitConv2d<E>) {
        let shape = layer.weight.shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        let bound = kaiming_uniform_bound(fan_in, PRODUCT_UNIT_SLOPE);
        fill_uniform(&layer.weight, bound, self.rng);
        layer.theta.set_value(Tensor::scalar(E::zero()));
    }

    fn bn(&mut self, layer: &BatchNorm2d<E>) {
        let c = layer.gamma.numel();
        layer.gamma.set_value(Tensor::ones(&[c]));
        layer.beta.set_value(Tensor::zeros(&[c]));
        *layer.running_mean.borrow_mut() = Tensor::zeros(&[c]);
        *layer.running_var.borrow_mut() = Tensor::ones(&[c]);
    }

    fn linear(&mut self, layer: &Linear<E>) {
        let fan_in = layer.weight.shape()[1];
        let bound = 1.0 / (fan_in as f64).sqrt();
        fill_uniform(&layer.weight, bound, self.rng);
        fill_uniform(&layer.bias, bound, self.rng);
    }
}

pub(crate) fn init_network<E: Scalar>(network: &Network<E>, seed: u64) {
    let mut rng = rng_from(seed);
    network.visit_layers(&mut Initializer { rng: &mut rng });
}
