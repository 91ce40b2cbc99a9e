//! Parameter-holding layer containers.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::Result;
use crate::ops;
use crate::scalar::Scalar;
use crate::tape::{Parameter, Tape, Var};
use crate::tensor::Tensor;

/// Plain convolution layer (no bias; batch norm always follows).
pub struct Conv2d<E: Scalar> {
    pub weight: Rc<Parameter<E>>,
    pub stride: usize,
    pub padding: usize,
}

impl<E: Scalar> Conv2d<E> {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, padding: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[cout, cin, k, k])),
            stride,
            padding,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let w = tape.param(&self.weight);
        ops::conv2d(x, w, self.stride, self.padding)
    }
}

/// Batch normalization layer with running statistics.
pub struct BatchNorm2d<E: Scalar> {
    pub gamma: Rc<Parameter<E>>,
    pub beta: Rc<Parameter<E>>,
    pub running_mean: RefCell<Tensor<E>>,
    pub running_var: RefCell<Tensor<E>>,
    /// Fraction of the batch statistic folded into the running estimate.
    pub momentum: f64,
}

impl<E: Scalar> BatchNorm2d<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::ones(&[channels])),
            beta: Parameter::new(Tensor::zeros(&[channels])),
            running_mean: RefCell::new(Tensor::zeros(&[channels])),
            running_var: RefCell::new(Tensor::ones(&[channels])),
            momentum: 0.1,
        }
    }

    /// Training mode normalizes by batch statistics and updates the running
    /// estimates; eval mode uses the stored running statistics.
    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>, training: bool) -> Result<Var<'t, E>> {
        let gamma = tape.param(&self.gamma);
        let beta = tape.param(&self.beta);
        if training {
            let (out, stats) = ops::batchnorm2d_train(x, gamma, beta)?;
            let momentum = E::from_f64(self.momentum);
            let keep = E::one() - momentum;
            {
                let mut rm = self.running_mean.borrow_mut();
                let updated: Vec<E> = rm
                    .data()
                    .iter()
                    .zip(stats.mean.iter())
                    .map(|(&r, &b)| keep * r + momentum * b)
                    .collect();
                *rm = Tensor::new(rm.shape().to_vec(), updated)?;
            }
            {
                let mut rv = self.running_var.borrow_mut();
                let updated: Vec<E> = rv
                    .data()
                    .iter()
                    .zip(stats.var_unbiased.iter())
                    .map(|(&r, &b)| keep * r + momentum * b)
                    .collect();
                *rv = Tensor::new(rv.shape().to_vec(), updated)?;
            }
            Ok(out)
        } else {
            let rm = self.running_mean.borrow().clone();
            let rv = self.running_var.borrow().clone();
            ops::batchnorm2d_eval(x, gamma, beta, &rm, &rv)
        }
    }
}

/// Fully connected layer with bias.
pub struct Linear<E: Scalar> {
    pub weight: Rc<Parameter<E>>,
    pub bias: Rc<Parameter<E>>,
}

impl<E: Scalar> Linear<E> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self {
            weight: Parameter::new(Tensor::zeros(&[out_features, in_features])),
            bias: Parameter::new(Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<E>, x: Var<'t, E>) -> Result<Var<'t, E>> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        ops::linear(x, w, b)
    }
}
