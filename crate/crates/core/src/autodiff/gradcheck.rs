//! Finite-difference verification of analytic gradients.
//!
//! A [`GradCase`] is a function of one or more input tensors. The checker
//! reduces its output to a scalar with a fixed random projection, runs the
//! tape backward and compares every input coordinate (or a random sample of
//! them) against central differences.

use serde::Serialize;

use super::tape::{Conv2dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub type Builder = Box<dyn Fn(&Tape, &[Var]) -> Result<Var>>;

pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
    /// Check only this many randomly sampled coordinates instead of all.
    pub sample_coords: Option<usize>,
}

impl GradCase {
    pub fn new(inputs: Vec<Tensor>, build: Builder) -> Self {
        Self { inputs, build, sample_coords: None }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub op: String,
    /// Max relative error of each trial.
    pub max_rel_errors: Vec<f64>,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn projected(tape: &Tape, out: Var, proj: &[f64]) -> f64 {
    tape.value(out).data().iter().zip(proj).map(|(a, b)| a * b).sum()
}

/// Largest relative error between analytic and central-difference gradients.
pub fn check_case(case: &GradCase, step: f64, rng: &mut Rng) -> Result<f64> {
    let tape = Tape::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = (case.build)(&tape, &vars)?;
    let n_out = tape.value(out).numel();
    let proj = rng.uniform_vec(n_out, -1.0, 1.0);
    let proj_var = tape.constant(Tensor::from_parts(tape.shape(out), proj.clone()));
    let weighted = tape.mul(out, proj_var)?;
    let loss = tape.sum_all(weighted)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(&case.inputs)
        .map(|(v, t)| tape.grad(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = (case.build)(&tape, &vars)?;
        Ok(projected(&tape, out, &proj))
    };

    let mut coords: Vec<(usize, usize)> = case
        .inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if let Some(k) = case.sample_coords {
        rng.shuffle(&mut coords);
        coords.truncate(k);
    }
    let mut inputs = case.inputs.clone();
    let mut worst = 0.0f64;
    for (i, j) in coords {
        let orig = inputs[i].data()[j];
        inputs[i].data_mut()[j] = orig + step;
        let plus = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig - step;
        let minus = eval(&inputs)?;
        inputs[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i].data()[j], numeric));
    }
    Ok(worst)
}

pub fn run_trials(
    name: &str,
    make: &dyn Fn(&mut Rng) -> Result<GradCase>,
    trials: usize,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<CheckReport> {
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut rng = Rng::new(seed);
    let mut errs = Vec::with_capacity(trials);
    for _ in 0..trials {
        let case = make(&mut rng)?;
        errs.push(check_case(&case, step, &mut rng)?);
    }
    let passed = errs.iter().all(|&e| e <= tol);
    Ok(CheckReport { op: name.to_string(), max_rel_errors: errs, tolerance: tol, passed })
}

fn rand_t(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), rng.uniform_vec(n, lo, hi))
}

/// Values bounded away from zero (sign random).
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.range(0.1, 1.0);
            if rng.bernoulli(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Distinct values spaced at least 0.05 apart, randomly ordered.
fn distinct(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - 0.5 + rng.range(0.0, 0.01)).collect();
    rng.shuffle(&mut vals);
    Tensor::from_parts(shape.to_vec(), vals)
}

fn random_mask(rng: &mut Rng, rows: usize, cols: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let keep = rng.below(cols);
        m.extend((0..cols).map(|c| c == keep || rng.bernoulli(0.6)));
    }
    m
}

macro_rules! case {
    ($inputs:expr, |$t:ident, $v:ident| $body:expr) => {
        Ok(GradCase::new($inputs, Box::new(move |$t: &Tape, $v: &[Var]| Ok($body?))))
    };
}

/// Cases for every primitive on the tape, keyed by op name.
pub fn op_case(name: &str, rng: &mut Rng) -> Option<Result<GradCase>> {
    let c: Result<GradCase> = match name {
        "add" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.add(v[0], v[1])),
        "sub" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.sub(v[0], v[1])),
        "mul" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.mul(v[0], v[1])),
        "scale" => {
            let f = rng.range(-2.0, 2.0);
            case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.scale(v[0], f))
        }
        "add_scalar" => case!(vec![rand_t(rng, &[5], -1.0, 1.0)], |t, v| t.add_scalar(v[0], 0.3)),
        "add_bias" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[4], -1.0, 1.0)], |t, v| t.add_bias(v[0], v[1])),
        "matmul" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0), rand_t(rng, &[4, 5], -1.0, 1.0)], |t, v| t.matmul(v[0], v[1])),
        "bmm" => case!(vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0), rand_t(rng, &[2, 4, 2], -1.0, 1.0)], |t, v| t.bmm(v[0], v[1])),
        "concat" => case!(vec![rand_t(rng, &[2, 3], -1.0, 1.0), rand_t(rng, &[2, 2], -1.0, 1.0)], |t, v| t.concat(&[v[0], v[1]], 1)),
        "slice" => case!(vec![rand_t(rng, &[3, 5], -1.0, 1.0)], |t, v| t.slice(v[0], 1, 1, 4)),
        "reshape" => case!(vec![rand_t(rng, &[2, 6], -1.0, 1.0)], |t, v| t.reshape(v[0], &[3, 4])),
        "permute" => case!(vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0)], |t, v| t.permute(v[0], &[2, 0, 1])),
        "broadcast" => case!(vec![rand_t(rng, &[2, 3], -1.0, 1.0)], |t, v| t.broadcast(v[0], 3)),
        "sum" => case!(vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0)], |t, v| t.sum(v[0], 1)),
        "mean" => case!(vec![rand_t(rng, &[2, 3, 4], -1.0, 1.0)], |t, v| t.mean(v[0], 0)),
        "sum_all" => case!(vec![rand_t(rng, &[2, 3], -1.0, 1.0)], |t, v| t.sum_all(v[0])),
        "exp" => case!(vec![rand_t(rng, &[6], -2.0, 2.0)], |t, v| t.exp(v[0])),
        "log" => case!(vec![rand_t(rng, &[6], 0.5, 2.0)], |t, v| t.log(v[0])),
        "tanh" => case!(vec![rand_t(rng, &[6], -2.0, 2.0)], |t, v| t.tanh(v[0])),
        "sigmoid" => case!(vec![rand_t(rng, &[6], -3.0, 3.0)], |t, v| t.sigmoid(v[0])),
        "relu" => case!(vec![away_from_zero(rng, &[8])], |t, v| t.relu(v[0])),
        "softmax" => case!(vec![rand_t(rng, &[3, 5], -2.0, 2.0)], |t, v| t.softmax(v[0], 1)),
        "masked_softmax" => {
            let mask = random_mask(rng, 3, 5);
            case!(vec![rand_t(rng, &[3, 5], -2.0, 2.0)], |t, v| t.masked_softmax(v[0], 1, Some(&mask)))
        }
        "log_softmax" => case!(vec![rand_t(rng, &[3, 5], -3.0, 3.0)], |t, v| t.log_softmax(v[0])),
        "l2_norm" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.l2_norm(v[0], 1)),
        "normalize" => case!(vec![rand_t(rng, &[3, 4], -1.0, 1.0)], |t, v| t.normalize(v[0])),
        "cosine" => case!(vec![rand_t(rng, &[4, 5], -1.0, 1.0), rand_t(rng, &[4, 5], -1.0, 1.0)], |t, v| t.cosine(v[0], v[1])),
        "conv2d" => case!(
            vec![rand_t(rng, &[2, 3, 6, 5], -1.0, 1.0), rand_t(rng, &[4, 3, 3, 3], -1.0, 1.0), rand_t(rng, &[4], -1.0, 1.0)],
            |t, v| t.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 2, padding: 1 })
        ),
        "max_pool2d" => case!(vec![distinct(rng, &[2, 2, 4, 4])], |t, v| t.max_pool2d(v[0], 2, 2)),
        "avg_pool2d" => case!(vec![rand_t(rng, &[2, 2, 5, 5], -1.0, 1.0)], |t, v| t.avg_pool2d(v[0], 3, 2)),
        "embedding" => {
            let ids: Vec<usize> = (0..7).map(|_| rng.below(6)).collect();
            case!(vec![rand_t(rng, &[6, 4], -1.0, 1.0)], |t, v| t.gather(v[0], &ids))
        }
        "pick" => {
            let idx: Vec<usize> = (0..4).map(|_| rng.below(5)).collect();
            case!(vec![rand_t(rng, &[4, 5], -1.0, 1.0)], |t, v| t.pick(v[0], &idx))
        }
        "masked_max" => {
            let mask = random_mask(rng, 3, 6);
            case!(vec![distinct(rng, &[3, 6])], |t, v| t.masked_max(v[0], Some(&mask)))
        }
        _ => return None,
    };
    Some(c)
}

pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_bias",
    "matmul",
    "bmm",
    "concat",
    "slice",
    "reshape",
    "permute",
    "broadcast",
    "sum",
    "mean",
    "sum_all",
    "exp",
    "log",
    "tanh",
    "sigmoid",
    "relu",
    "softmax",
    "masked_softmax",
    "log_softmax",
    "l2_norm",
    "normalize",
    "cosine",
    "conv2d",
    "max_pool2d",
    "avg_pool2d",
    "embedding",
    "pick",
    "masked_max",
];

#[cfg(test)]
mod tests {
    use super::*;

    fn check(name: &str) -> CheckReport {
        run_trials(name, &|rng| op_case(name, rng).unwrap(), 100, 1e-5, 1e-4, 11).unwrap()
    }

    #[test]
    fn every_registered_op_has_a_case() {
        let mut rng = Rng::new(0);
        for name in OP_NAMES {
            assert!(op_case(name, &mut rng).is_some(), "{name}");
        }
        assert!(op_case("nope", &mut rng).is_none());
    }

    #[test]
    fn softmax_matmul_relu_pass() {
        for name in ["softmax", "matmul", "relu"] {
            let r = check(name);
            assert!(r.passed, "{name}: worst {}", r.worst());
        }
    }

    #[test]
    fn all_ops_pass_a_short_run() {
        for name in OP_NAMES {
            let r = run_trials(name, &|rng| op_case(name, rng).unwrap(), 20, 1e-5, 1e-4, 3).unwrap();
            assert!(r.passed, "{name}: worst {}", r.worst());
        }
    }

    #[test]
    fn relative_error_uses_unit_floor() {
        assert_eq!(relative_error(1e-6, 0.0), 1e-6);
        assert_eq!(relative_error(10.0, 9.0), 0.1);
    }

    #[test]
    fn random_three_op_chains_match_finite_differences() {
        let make = |rng: &mut Rng| -> Result<GradCase> {
            let ops = [rng.below(4), rng.below(4), rng.below(4)];
            let inputs = vec![rand_t(rng, &[3, 3], -1.0, 1.0), rand_t(rng, &[3, 3], -1.0, 1.0)];
            Ok(GradCase::new(
                inputs,
                Box::new(move |t: &Tape, v: &[Var]| {
                    let mut x = v[0];
                    for op in ops {
                        x = match op {
                            0 => t.matmul(x, v[1])?,
                            1 => t.tanh(x)?,
                            2 => t.mul(x, v[1])?,
                            _ => t.softmax(x, 1)?,
                        };
                    }
                    Ok(x)
                }),
            ))
        };
        let r = run_trials("chain", &make, 100, 1e-5, 1e-4, 5).unwrap();
        assert!(r.passed, "worst {}", r.worst());
    }
}
