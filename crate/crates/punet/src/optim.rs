//! SGD with momentum and weight decay, plus the two learning-rate schedules.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::Parameter;
use crate::tensor::Tensor;

/// Optimizer settings. Velocity buffers live in [`Sgd`], created lazily as
/// zeros per parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Plain SGD: `g <- grad + wd * p; v <- momentum * v + g; p <- p - lr * v`.
pub struct Sgd<E: Scalar> {
    params: Vec<Rc<Parameter<E>>>,
    velocity: Vec<Option<Tensor<E>>>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
}

impl<E: Scalar> Sgd<E> {
    pub fn new(params: Vec<Rc<Parameter<E>>>, cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        let velocity = vec![None; params.len()];
        Ok(Self {
            params,
            velocity,
            lr: cfg.lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Applies one update from the gradients currently stored on the
    /// parameters. Parameters without a gradient are left untouched.
    /// Fails with `NumericalOverflow` when a gradient or an updated value is
    /// non-finite.
    pub fn step(&mut self) -> Result<()> {
        let lr = E::from_f64(self.lr);
        let momentum = E::from_f64(self.momentum);
        let wd = E::from_f64(self.weight_decay);
        for (idx, param) in self.params.iter().enumerate() {
            let Some(grad) = param.grad() else { continue };
            let mut value = param.value();
            let slot = &mut self.velocity[idx];
            if slot.is_none() {
                *slot = Some(Tensor::zeros(&value.shape().to_vec()));
            }
            let velocity = slot.as_mut().expect("just filled");
            let vdata = velocity.make_mut();
            let pdata = value.make_mut();
            for ((p, v), &g) in pdata.iter_mut().zip(vdata.iter_mut()).zip(grad.data()) {
                if !g.is_finite() {
                    return Err(Error::NumericalOverflow(format!(
                        "non-finite gradient {g} in sgd_step"
                    )));
                }
                let adjusted = g + wd * *p;
                *v = momentum * *v + adjusted;
                *p = *p - lr * *v;
                if !p.is_finite() {
                    return Err(Error::NumericalOverflow(format!(
                        "parameter became non-finite ({p}) in sgd_step"
                    )));
                }
            }
            param.set_value(value);
        }
        Ok(())
    }

    pub fn zero_grads(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }
}

/// Scales all gradients so their global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<E: Scalar>(params: &[Rc<Parameter<E>>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for p in params {
        if let Some(g) = p.grad() {
            for v in g.data() {
                let v = v.as_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.map(|v| v * scale));
            }
        }
    }
    norm
}

/// Learning-rate schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScheduleSpec {
    /// Multiply by `factor` after each milestone epoch.
    Multistep { milestones: Vec<usize>, factor: f64 },
    /// Multiply by `factor` when the monitored validation loss has not
    /// strictly improved for `patience` consecutive epochs.
    Plateau { factor: f64, patience: usize },
}

impl ScheduleSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ScheduleSpec::Multistep { milestones, factor } => {
                if !milestones.windows(2).all(|w| w[0] < w[1]) {
                    return Err(Error::InvalidConfig(
                        "multistep milestones must be strictly increasing".into(),
                    ));
                }
                if !(0.0..1.0).contains(factor) || *factor <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "schedule factor must lie in (0, 1), got {factor}"
                    )));
                }
            }
            ScheduleSpec::Plateau { factor, patience } => {
                if !(0.0..1.0).contains(factor) || *factor <= 0.0 {
                    return Err(Error::InvalidConfig(format!(
                        "schedule factor must lie in (0, 1), got {factor}"
                    )));
                }
                if *patience == 0 {
                    return Err(Error::InvalidConfig("plateau patience must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// Stateful scheduler stepped once at the end of each epoch.
pub struct Scheduler {
    spec: ScheduleSpec,
    best: Option<f64>,
    stale_epochs: usize,
}

impl Scheduler {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            best: None,
            stale_epochs: 0,
        })
    }

    /// Computes the learning rate for the next epoch given the 1-based epoch
    /// that just finished and its validation loss.
    pub fn step(&mut self, finished_epoch: usize, val_loss: f64, current_lr: f64) -> f64 {
        match &self.spec {
            ScheduleSpec::Multistep { milestones, factor } => {
                if milestones.contains(&finished_epoch) {
                    current_lr * factor
                } else {
                    current_lr
                }
            }
            ScheduleSpec::Plateau { factor, patience } => {
                let improved = match self.best {
                    None => true,
                    Some(best) => val_loss < best,
                };
                if improved {
                    self.best = Some(val_loss);
                    self.stale_epochs = 0;
                    current_lr
                } else {
                    self.stale_epochs += 1;
                    if self.stale_epochs >= *patience {
                        self.stale_epochs = 0;
                        current_lr * factor
                    } else {
                        current_lr
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64) -> Rc<Parameter<f64>> {
        Parameter::new(Tensor::scalar(v))
    }

    fn set_grad(p: &Rc<Parameter<f64>>, g: f64) {
        p.set_grad(Tensor::scalar(g));
    }

    #[test]
    fn plain_step_matches_hand_arithmetic() {
        // w = 1, g = 0.5, lr = 0.1 => w' = 0.95
        let p = param(1.0);
        set_grad(&p, 0.5);
        let mut sgd = Sgd::new(
            vec![Rc::clone(&p)],
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
        )
        .unwrap();
        sgd.step().unwrap();
        assert!((p.value().item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn decay_only_step() {
        // w = 1, g = 0, wd = 0.01, lr = 0.1 => w' = 0.999
        let p = param(1.0);
        set_grad(&p, 0.0);
        let mut sgd = Sgd::new(
            vec![Rc::clone(&p)],
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.01 },
        )
        .unwrap();
        sgd.step().unwrap();
        assert!((p.value().item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_rejected() {
        assert!(Sgd::<f64>::new(vec![], SgdConfig { lr: 0.0, momentum: 0.0, weight_decay: 0.0 })
            .is_err());
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let p = param(0.0);
        let mut sgd = Sgd::new(
            vec![Rc::clone(&p)],
            SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.0 },
        )
        .unwrap();
        set_grad(&p, 1.0);
        sgd.step().unwrap(); // v=1, p=-1
        set_grad(&p, 1.0);
        sgd.step().unwrap(); // v=1.5, p=-2.5
        assert!((p.value().item() + 2.5).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_overflow() {
        let p = param(1.0);
        set_grad(&p, f64::NAN);
        let mut sgd = Sgd::new(
            vec![Rc::clone(&p)],
            SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 },
        )
        .unwrap();
        assert!(matches!(sgd.step(), Err(Error::NumericalOverflow(_))));
    }

    #[test]
    fn optimizers_do_not_share_velocity() {
        let (pa, pb) = (param(0.0), param(0.0));
        let cfg = SgdConfig { lr: 1.0, momentum: 0.9, weight_decay: 0.0 };
        let mut sa = Sgd::new(vec![Rc::clone(&pa)], cfg).unwrap();
        let mut sb = Sgd::new(vec![Rc::clone(&pb)], cfg).unwrap();
        set_grad(&pa, 1.0);
        sa.step().unwrap();
        set_grad(&pb, 0.0);
        sb.step().unwrap();
        assert_eq!(pb.value().item(), 0.0, "b's velocity untouched by a");
    }

    #[test]
    fn multistep_drops_at_milestones() {
        let mut sched = Scheduler::new(ScheduleSpec::Multistep {
            milestones: vec![80, 120],
            factor: 0.1,
        })
        .unwrap();
        let mut lr = 0.01;
        let mut trace = Vec::new();
        for epoch in 1..=130 {
            trace.push(lr);
            lr = sched.step(epoch, 1.0, lr);
        }
        // lr used at epoch 81 and 121
        assert!((trace[80] - 0.001).abs() < 1e-12);
        assert!((trace[120] - 0.0001).abs() < 1e-12);
        // exactly two drops
        let drops = trace.windows(2).filter(|w| w[1] < w[0]).count();
        assert_eq!(drops, 2);
    }

    #[test]
    fn plateau_never_fires_when_improving() {
        let mut sched =
            Scheduler::new(ScheduleSpec::Plateau { factor: 0.1, patience: 3 }).unwrap();
        let mut lr = 0.1;
        for (epoch, loss) in [1.0, 0.9, 0.8, 0.7, 0.6].iter().enumerate() {
            lr = sched.step(epoch + 1, *loss, lr);
        }
        assert_eq!(lr, 0.1);
    }

    #[test]
    fn plateau_fires_after_patience_stale_epochs() {
        // losses 1.0, 1.1, 1.1, 1.1 with patience 3: reduction after the
        // third consecutive non-improving epoch
        let mut sched =
            Scheduler::new(ScheduleSpec::Plateau { factor: 0.1, patience: 3 }).unwrap();
        let mut lr = 0.1;
        lr = sched.step(1, 1.0, lr);
        assert_eq!(lr, 0.1);
        lr = sched.step(2, 1.1, lr);
        assert_eq!(lr, 0.1);
        lr = sched.step(3, 1.1, lr);
        assert_eq!(lr, 0.1);
        lr = sched.step(4, 1.1, lr);
        assert!((lr - 0.01).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(Scheduler::new(ScheduleSpec::Multistep {
            milestones: vec![80, 80],
            factor: 0.1
        })
        .is_err());
        assert!(Scheduler::new(ScheduleSpec::Plateau { factor: 1.5, patience: 3 }).is_err());
    }
}
