//! Gradient checking, oracle kernels, and parameter audits.
//!
//! [`check_op`] matches exhaustively over [`OpKind`], so adding an operation
//! without a gradient-check case refuses to compile. All checks run in f64
//! with central differences of step 1e-5; sample points sit away from clamp
//! and pooling kinks so the subgradient convention stays testable.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::arch::Network;
use crate::error::{Error, Result};
use crate::ops::{self, OpKind};
use crate::pu::EPSILON_SHIFT;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::util::{derive_seed, rng_from};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance every differentiable operation must meet.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Sample points keep at least this distance from clamp boundaries.
pub const KINK_MARGIN: f64 = 1e-3;

/// Outcome of one gradient comparison for one input tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Operation or composite under test.
    pub case: String,
    /// Which input's gradient was checked.
    pub input: String,
    pub shape: Vec<usize>,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Linear index of the worst coordinate when the check failed.
    pub failing_index: Option<usize>,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{} {:28} input={:8} shape={:?} max_rel={:.3e} max_abs={:.3e} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.case,
            self.input,
            self.shape,
            self.max_rel_err,
            self.max_abs_err,
            self.tolerance,
        )
    }
}

pub fn reports_to_text(reports: &[GradCheckReport]) -> String {
    reports.iter().map(|r| r.line() + "\n").collect()
}

pub fn reports_to_csv(reports: &[GradCheckReport]) -> String {
    let mut out = String::from("case,input,shape,max_rel_err,max_abs_err,tolerance,passed\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.case,
            r.input,
            r.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"),
            r.max_rel_err,
            r.max_abs_err,
            r.tolerance,
            r.passed
        ));
    }
    out
}

type BuildFn = dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

fn loss_value(inputs: &[Tensor<f64>], build: &BuildFn) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    Ok(loss.value().item())
}

/// Compares tape gradients of a scalar-valued graph against central finite
/// differences, one report per input tensor.
pub fn gradcheck(
    case: &str,
    input_names: &[&str],
    inputs: &[Tensor<f64>],
    build: &BuildFn,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    assert_eq!(input_names.len(), inputs.len());
    // analytic gradients from one recorded pass
    let tape = Tape::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(&t.shape().to_vec())))
        .collect();

    let mut reports = Vec::with_capacity(inputs.len());
    for (idx, name) in input_names.iter().enumerate() {
        let mut max_rel = 0.0f64;
        let mut max_abs = 0.0f64;
        let mut failing = None;
        for coord in 0..inputs[idx].numel() {
            let mut plus = inputs.to_vec();
            let mut t = plus[idx].clone();
            t.make_mut()[coord] += FD_STEP;
            plus[idx] = t;
            let mut minus = inputs.to_vec();
            let mut t = minus[idx].clone();
            t.make_mut()[coord] -= FD_STEP;
            minus[idx] = t;
            let numeric = (loss_value(&plus, build)? - loss_value(&minus, build)?) / (2.0 * FD_STEP);
            let a = analytic[idx].data()[coord];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-12);
            if abs > max_abs {
                max_abs = abs;
            }
            if rel > max_rel {
                max_rel = rel;
                if rel > tolerance {
                    failing = Some(coord);
                }
            }
        }
        reports.push(GradCheckReport {
            case: case.to_string(),
            input: name.to_string(),
            shape: inputs[idx].shape().to_vec(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            tolerance,
            passed: max_rel <= tolerance,
            failing_index: failing,
        });
    }
    Ok(reports)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut rand::rngs::StdRng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Uniform sample that stays `KINK_MARGIN` away from `boundary`.
fn uniform_off_boundary(
    shape: &[usize],
    lo: f64,
    hi: f64,
    boundary: f64,
    rng: &mut rand::rngs::StdRng,
) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| loop {
        let v = rng.random_range(lo..hi);
        if (v - boundary).abs() >= KINK_MARGIN {
            break v;
        }
    })
}

/// Distinct-valued tensor (gaps of at least 0.01) in shuffled order, so
/// max-pooling argmaxes cannot flip under the FD step.
fn distinct_values(shape: &[usize], rng: &mut rand::rngs::StdRng) -> Tensor<f64> {
    let numel: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..numel).map(|i| -1.0 + 0.01 * i as f64).collect();
    values.shuffle(rng);
    Tensor::new(shape.to_vec(), values).expect("distinct grid")
}

/// Scalar loss from an op output: a fixed random weighting makes every
/// output coordinate matter.
fn weighted_loss<'t>(
    tape: &'t Tape<f64>,
    out: Var<'t, f64>,
    rng_seed: u64,
) -> Result<Var<'t, f64>> {
    let shape = out.shape();
    let mut rng = rng_from(rng_seed);
    let weights = tape.input(uniform(&shape, 0.5, 1.5, &mut rng));
    ops::sum(ops::mul(out, weights)?)
}

/// Gradient-check cases for one operation kind. The match is exhaustive: a
/// new `OpKind` cannot ship without a case here.
pub fn check_op(kind: OpKind, seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = rng_from(derive_seed(seed, kind as u64, 0));
    let w_seed = derive_seed(seed, kind as u64, 1);
    let tol = DEFAULT_TOLERANCE;
    match kind {
        OpKind::Leaf => Ok(Vec::new()),
        OpKind::Add => {
            let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let b = uniform(&[3], -1.0, 1.0, &mut rng);
            gradcheck(
                "add",
                &["a", "b"],
                &[a, b],
                &move |tape, v| weighted_loss(tape, ops::add(v[0], v[1])?, w_seed),
                tol,
            )
        }
        OpKind::Sub => {
            let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let b = uniform(&[2, 3], -1.0, 1.0, &mut rng);
            gradcheck(
                "sub",
                &["a", "b"],
                &[a, b],
                &move |tape, v| weighted_loss(tape, ops::sub(v[0], v[1])?, w_seed),
                tol,
            )
        }
        OpKind::Mul => {
            let a = uniform(&[2, 3], -1.0, 1.0, &mut rng);
            let b = uniform(&[2, 1], -1.0, 1.0, &mut rng);
            gradcheck(
                "mul",
                &["a", "b"],
                &[a, b],
                &move |tape, v| weighted_loss(tape, ops::mul(v[0], v[1])?, w_seed),
                tol,
            )
        }
        OpKind::Sum => {
            let x = uniform(&[3, 4], -1.0, 1.0, &mut rng);
            gradcheck("sum", &["x"], &[x], &|_, v| ops::sum(v[0]), tol)
        }
        OpKind::Log => {
            let x = uniform(&[2, 4], 0.4, 2.0, &mut rng);
            gradcheck(
                "log",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::log(v[0])?, w_seed),
                tol,
            )
        }
        OpKind::Exp => {
            let x = uniform(&[2, 4], -1.0, 1.0, &mut rng);
            gradcheck(
                "exp",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::exp(v[0])?, w_seed),
                tol,
            )
        }
        OpKind::Softplus => {
            let x = uniform(&[2, 4], -2.0, 2.0, &mut rng);
            gradcheck(
                "softplus",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::softplus(v[0])?, w_seed),
                tol,
            )
        }
        OpKind::ClampMin => {
            let x = uniform_off_boundary(&[3, 3], -1.0, 1.0, 0.1, &mut rng);
            gradcheck(
                "clamp_min",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::clamp_min(v[0], 0.1)?, w_seed),
                tol,
            )
        }
        OpKind::MaxScalar => {
            let threshold = 0.55;
            let x = uniform_off_boundary(&[3, 3], 0.0, 1.0, threshold, &mut rng);
            let t = Tensor::scalar(threshold);
            gradcheck(
                "max_scalar",
                &["x", "threshold"],
                &[x, t],
                &move |tape, v| weighted_loss(tape, ops::max_scalar(v[0], v[1])?, w_seed),
                tol,
            )
        }
        OpKind::Relu => {
            let x = uniform_off_boundary(&[3, 4], -1.0, 1.0, 0.0, &mut rng);
            gradcheck(
                "relu",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::relu(v[0])?, w_seed),
                tol,
            )
        }
        OpKind::Conv2d => {
            let x = uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut rng);
            let w = uniform(&[3, 2, 3, 3], -0.7, 0.7, &mut rng);
            let mut reports = gradcheck(
                "conv2d(s1,p1)",
                &["x", "weight"],
                &[x, w],
                &move |tape, v| weighted_loss(tape, ops::conv2d(v[0], v[1], 1, 1)?, w_seed),
                tol,
            )?;
            let x = uniform(&[1, 2, 6, 6], -1.0, 1.0, &mut rng);
            let w = uniform(&[2, 2, 2, 2], -0.7, 0.7, &mut rng);
            reports.extend(gradcheck(
                "conv2d(s2,p0)",
                &["x", "weight"],
                &[x, w],
                &move |tape, v| weighted_loss(tape, ops::conv2d(v[0], v[1], 2, 0)?, w_seed),
                tol,
            )?);
            Ok(reports)
        }
        OpKind::BatchNorm2d => {
            let x = uniform(&[2, 3, 4, 4], -1.5, 1.5, &mut rng);
            let gamma = uniform(&[3], 0.5, 1.5, &mut rng);
            let beta = uniform(&[3], -0.5, 0.5, &mut rng);
            gradcheck(
                "batchnorm2d",
                &["x", "gamma", "beta"],
                &[x, gamma, beta],
                &move |tape, v| {
                    let (out, _) = ops::batchnorm2d_train(v[0], v[1], v[2])?;
                    weighted_loss(tape, out, w_seed)
                },
                tol,
            )
        }
        OpKind::MaxPool2d => {
            let x = distinct_values(&[1, 2, 6, 6], &mut rng);
            gradcheck(
                "maxpool2d",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::maxpool2d(v[0], 3, 2, 1)?, w_seed),
                tol,
            )
        }
        OpKind::GlobalAvgPool => {
            let x = uniform(&[2, 3, 4, 4], -1.0, 1.0, &mut rng);
            gradcheck(
                "global_avg_pool",
                &["x"],
                &[x],
                &move |tape, v| weighted_loss(tape, ops::global_avg_pool(v[0])?, w_seed),
                tol,
            )
        }
        OpKind::Linear => {
            let x = uniform(&[4, 6], -1.0, 1.0, &mut rng);
            let w = uniform(&[3, 6], -1.0, 1.0, &mut rng);
            let b = uniform(&[3], -0.5, 0.5, &mut rng);
            gradcheck(
                "linear",
                &["x", "weight", "bias"],
                &[x, w, b],
                &move |tape, v| weighted_loss(tape, ops::linear(v[0], v[1], v[2])?, w_seed),
                tol,
            )
        }
        OpKind::CrossEntropy => {
            let logits = uniform(&[4, 5], -2.0, 2.0, &mut rng);
            let labels = vec![0usize, 2, 4, 1];
            gradcheck(
                "cross_entropy",
                &["logits"],
                &[logits],
                &move |_, v| ops::cross_entropy(v[0], &labels),
                tol,
            )
        }
    }
}

/// Gradient check of the full product-unit pipeline against its inputs, the
/// exponent weights, and theta, with a mixed clamped/unclamped input.
pub fn check_product_unit(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = rng_from(derive_seed(seed, 0x9_0, 0));
    let w_seed = derive_seed(seed, 0x9_0, 1);
    let theta = 0.3f64;
    let threshold = (1.0 + theta.exp()).ln() + EPSILON_SHIFT;
    // half the pixels below the threshold, half above, all off the kink
    let x = Tensor::from_fn(&[1, 2, 4, 4], |i| {
        if i % 2 == 0 {
            rng.random_range(0.2..threshold - 0.05)
        } else {
            rng.random_range(threshold + 0.05..1.8)
        }
    });
    let w = uniform(&[2, 2, 2, 2], -0.6, 0.6, &mut rng);
    let t = Tensor::scalar(theta);
    gradcheck(
        "pu_forward",
        &["x", "weight", "theta"],
        &[x, w, t],
        &move |tape, v| {
            let shift = tape.input(Tensor::scalar(EPSILON_SHIFT));
            let thr = ops::add(ops::softplus(v[2])?, shift)?;
            let clamped = ops::max_scalar(v[0], thr)?;
            let z = ops::log(clamped)?;
            let pre = ops::conv2d(z, v[1], 1, 0)?;
            weighted_loss(tape, ops::exp_checked(pre)?, w_seed)
        },
        DEFAULT_TOLERANCE,
    )
}

/// Runs the complete registry: every differentiable op plus the product-unit
/// composite.
pub fn run_registry(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for &kind in OpKind::DIFFERENTIABLE {
        reports.extend(check_op(kind, seed)?);
    }
    reports.extend(check_product_unit(seed)?);
    Ok(reports)
}

/// Plain sextuple-loop convolution, the independent reference for the
/// im2col path.
pub fn naive_conv2d<E: Scalar>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
        return Err(Error::ShapeMismatch(format!(
            "naive_conv2d shapes: {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = ops::conv_output_hw(h, wd, kh, kw, stride, padding)?;
    let xd = x.data();
    let wv = w.data();
    let mut out = vec![E::zero(); n * cout * oh * ow];
    for img in 0..n {
        for co in 0..cout {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = E::zero();
                    for ci in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ii = (oi * stride + ki) as isize - padding as isize;
                                let jj = (oj * stride + kj) as isize - padding as isize;
                                if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                    continue;
                                }
                                acc += xd[((img * cin + ci) * h + ii as usize) * wd + jj as usize]
                                    * wv[((co * cin + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((img * cout + co) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// One row of a parameter audit.
#[derive(Debug, Clone)]
pub struct AuditEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ParamAudit {
    pub entries: Vec<AuditEntry>,
    pub total: usize,
}

impl ParamAudit {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let shape = if e.shape.is_empty() {
                "[]".to_string()
            } else {
                format!("{:?}", e.shape)
            };
            out.push_str(&format!("{:<44} {:<16} {}\n", e.name, shape, e.count));
        }
        out.push_str(&format!("total trainable parameters: {}\n", self.total));
        out
    }
}

/// Deterministic manifest of every trainable parameter.
pub fn audit_params<E: Scalar>(net: &Network<E>) -> ParamAudit {
    let entries: Vec<AuditEntry> = net
        .parameters()
        .into_iter()
        .map(|(name, p)| AuditEntry {
            shape: p.shape(),
            count: p.numel(),
            name,
        })
        .collect();
    let total = entries.iter().map(|e| e.count).sum();
    ParamAudit { entries, total }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradcheck_passes() {
        let reports = check_op(OpKind::Linear, 7).unwrap();
        assert_eq!(reports.len(), 3);
        for r in &reports {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn product_unit_gradcheck_passes() {
        for r in check_product_unit(3).unwrap() {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn corrupted_backward_is_caught() {
        // an op whose backward is deliberately scaled by 1.01 must fail
        let x = Tensor::from_fn(&[2, 2], |i| 0.3 + 0.2 * i as f64);
        let reports = gradcheck(
            "corrupted_exp",
            &["x"],
            &[x],
            &|tape, v| {
                let xv = v[0].value();
                let out = xv.map(|t| t.exp());
                let outc = out.clone();
                let xid = crate::tape::Var::id(&v[0]);
                let rg = v[0].requires_grad();
                let bad = tape.push(
                    OpKind::Exp,
                    out,
                    rg,
                    Some(Box::new(move |g: &Tensor<f64>| {
                        vec![(
                            xid,
                            g.zip_map(&outc, |gv, y| gv * y * 1.01).expect("shape"),
                        )]
                    })),
                    None,
                );
                ops::sum(bad)
            },
            DEFAULT_TOLERANCE,
        )
        .unwrap();
        assert!(!reports[0].passed);
        assert!(reports[0].failing_index.is_some());
    }

    #[test]
    fn naive_conv_matches_identity_kernel() {
        let x = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64);
        let w = Tensor::ones(&[1, 1, 1, 1]);
        let y = naive_conv2d(&x, &w, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn audit_totals_match_count_params() {
        let spec = crate::arch::ArchitectureSpec::by_name("pure20", 10).unwrap();
        let net: Network<f32> = crate::arch::build_network(&spec).unwrap();
        let audit = audit_params(&net);
        assert_eq!(audit.total, net.count_params());
        let thetas: Vec<_> = audit
            .entries
            .iter()
            .filter(|e| e.name.ends_with(".theta"))
            .collect();
        assert_eq!(thetas.len(), 9);
        assert!(thetas.iter().all(|e| e.shape.is_empty() && e.count == 1));
    }
}
