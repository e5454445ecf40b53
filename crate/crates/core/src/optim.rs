//! Shared first-order optimizer with manifold-aware parameter blocks.
//!
//! One solver serves every stage: adaptive-moment updates on a flat
//! parameter vector, with quaternion blocks renormalized after each step
//! and frozen entries left untouched. The step size ramps up over a short
//! warmup, follows a cosine decay, and is halved by a trailing-window
//! watchdog when the loss average clearly rises; the best-seen parameters
//! are what the caller gets back.

use serde_json::json;
use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("non-finite objective at iteration {iteration} (first bad parameter/gradient index: {param_index:?})")]
    NonFiniteObjective {
        iteration: usize,
        param_index: Option<usize>,
    },
    #[error("convergence log: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Manifold {
    Euclidean,
    /// Values are consecutive (w, x, y, z) 4-tuples, renormalized to unit
    /// length after every step that changes them.
    UnitQuaternion,
}

#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub values: Vec<f64>,
    pub manifold: Manifold,
    pub frozen: Vec<bool>,
    /// Per-block multiplier on the schedule's step size, for parameters
    /// that should adapt slower (or faster) than the rest.
    pub lr_scale: f64,
}

impl ParamBlock {
    pub fn euclidean(values: Vec<f64>) -> Self {
        let n = values.len();
        Self {
            values,
            manifold: Manifold::Euclidean,
            frozen: vec![false; n],
            lr_scale: 1.0,
        }
    }

    pub fn unit_quaternions(values: Vec<f64>) -> Self {
        assert!(values.len() % 4 == 0, "quaternion block length must be 4k");
        let n = values.len();
        Self {
            values,
            manifold: Manifold::UnitQuaternion,
            frozen: vec![false; n],
            lr_scale: 1.0,
        }
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn freeze_range(&mut self, range: std::ops::Range<usize>) {
        self.frozen[range].iter_mut().for_each(|f| *f = true);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Ordered set of parameter blocks; the flat vector seen by objectives is
/// their concatenation in block order.
#[derive(Clone, Debug, Default)]
pub struct Params {
    pub blocks: Vec<ParamBlock>,
}

impl Params {
    pub fn new(blocks: Vec<ParamBlock>) -> Self {
        Self { blocks }
    }

    pub fn total_len(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for b in &self.blocks {
            out.extend_from_slice(&b.values);
        }
        out
    }

    pub fn unflatten(&mut self, x: &[f64]) {
        let mut off = 0;
        for b in &mut self.blocks {
            let len = b.values.len();
            b.values.copy_from_slice(&x[off..off + len]);
            off += len;
        }
        assert_eq!(off, x.len());
    }

    /// Offset of block `i` in the flat vector.
    pub fn offset(&self, i: usize) -> usize {
        self.blocks[..i].iter().map(|b| b.len()).sum()
    }

    /// Freezes every entry of block `i`; returns self for call chaining.
    pub fn freeze_block(&mut self, i: usize) -> &mut Self {
        self.blocks[i].freeze_all();
        self
    }

    /// Unfreezes every entry of block `i`.
    pub fn thaw_block(&mut self, i: usize) {
        self.blocks[i].frozen.iter_mut().for_each(|f| *f = false);
    }
}

/// A differentiable objective over a flat parameter vector. When a gradient
/// buffer is passed it arrives zero-filled and must be accumulated into.
pub trait Objective {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64;

    /// Named loss terms of the most recent evaluation, for logging.
    fn loss_terms(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
}

impl<F: FnMut(&[f64], Option<&mut [f64]>) -> f64> Objective for F {
    fn eval(&mut self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        self(x, grad)
    }
}

#[derive(Clone, Debug)]
pub struct Schedule {
    pub iterations: usize,
    pub learning_rate: f64,
    pub cosine_decay: bool,
    /// Search for the productive step size instead of following a fixed
    /// decay: start two orders below `learning_rate`, grow the rate while
    /// trailing windows keep improving, and halve it when they stall.
    /// Suits problems whose productive step size cannot be known in
    /// advance and shrinks as the solve tightens.
    pub adaptive_rate: bool,
    /// Steps to ramp the rate from zero after every moment reset. Without
    /// this the very first steps move every coordinate at the full rate
    /// (the moment ratio is +-1 regardless of gradient size), which can
    /// throw a good initialization far out of its basin.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Optional line-delimited JSON convergence log.
    pub log: Option<PathBuf>,
    pub log_every: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            iterations: 2000,
            learning_rate: 1e-3,
            cosine_decay: true,
            adaptive_rate: false,
            warmup: 100,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            log: None,
            log_every: 50,
        }
    }
}

impl Schedule {
    pub fn new(iterations: usize, learning_rate: f64) -> Self {
        Self {
            iterations,
            learning_rate,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MinimizeResult {
    pub initial_value: f64,
    pub value: f64,
    pub iterations: usize,
}

const WINDOW: usize = 25;
const GRAD_TOL: f64 = 1e-12;

pub fn minimize(
    objective: &mut dyn Objective,
    params: &mut Params,
    schedule: &Schedule,
) -> Result<MinimizeResult, OptimError> {
    let n = params.total_len();
    let mut x = params.flatten();
    let frozen: Vec<bool> = params.blocks.iter().flat_map(|b| b.frozen.clone()).collect();
    let lr_scale: Vec<f64> = params
        .blocks
        .iter()
        .flat_map(|b| std::iter::repeat(b.lr_scale).take(b.len()))
        .collect();
    // (start, len) of every quaternion 4-tuple with no frozen entry.
    let mut quat_tuples = Vec::new();
    {
        let mut off = 0;
        for b in &params.blocks {
            if b.manifold == Manifold::UnitQuaternion {
                for k in (0..b.len()).step_by(4) {
                    if !b.frozen[k..k + 4].iter().any(|f| *f) {
                        quat_tuples.push(off + k);
                    }
                }
            }
            off += b.len();
        }
    }

    let mut log = match &schedule.log {
        Some(path) => Some(BufWriter::new(File::create(path)?)),
        None => None,
    };

    let mut grad = vec![0.0; n];
    let mut m = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut adam_t = 0u32;
    let mut backoff: f64 = if schedule.adaptive_rate { 0.01 } else { 1.0 };
    let mut best_x = x.clone();
    let mut best_val = f64::INFINITY;
    let mut initial_value = f64::NAN;
    let mut window: VecDeque<f64> = VecDeque::with_capacity(2 * WINDOW);
    let mut iterations_run = 0;

    for iter in 0..schedule.iterations {
        grad.fill(0.0);
        let value = objective.eval(&x, Some(&mut grad));
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(OptimError::NonFiniteObjective {
                iteration: iter,
                param_index: grad.iter().position(|g| !g.is_finite()),
            });
        }
        if iter == 0 {
            initial_value = value;
        }
        if value < best_val {
            best_val = value;
            best_x.copy_from_slice(&x);
        }

        let warmup = schedule.warmup.min(schedule.iterations / 5).max(1);
        if schedule.adaptive_rate || iter as u32 >= warmup as u32 {
            window.push_back(value);
        }
        if window.len() == 2 * WINDOW {
            let prev: f64 = window.iter().take(WINDOW).sum::<f64>() / WINDOW as f64;
            let recent: f64 = window.iter().skip(WINDOW).sum::<f64>() / WINDOW as f64;
            // Adaptive steps on kinked losses are never monotone, so only a
            // clearly rising trend cuts the rate; the loss is not sampled
            // during a fixed-schedule warmup, where the rising step size
            // inflates the jitter floor and would read as divergence.
            // Moments are kept and the trajectory is not rewound, since
            // the best parameters are returned regardless.
            let improvement = prev - recent;
            if schedule.adaptive_rate {
                if improvement < 1e-3 * prev.abs() + 1e-12 {
                    backoff *= 0.5;
                } else {
                    backoff = (backoff * 1.3).min(1.0);
                }
            } else if recent > prev + 0.05 * prev.abs() {
                backoff *= 0.5;
            }
            window.clear();
        }
        if backoff < 1e-10 {
            iterations_run = iter;
            break;
        }

        let grad_inf = grad
            .iter()
            .zip(&frozen)
            .filter(|(_, f)| !**f)
            .map(|(g, _)| g.abs())
            .fold(0.0f64, f64::max);
        if grad_inf < GRAD_TOL {
            iterations_run = iter;
            break;
        }

        let decay = if schedule.cosine_decay {
            0.5 * (1.0 + (std::f64::consts::PI * iter as f64 / schedule.iterations as f64).cos())
        } else {
            1.0
        };
        adam_t += 1;
        // The low starting rate serves as the warmup in adaptive mode.
        let ramp = if schedule.adaptive_rate {
            1.0
        } else {
            (adam_t as f64 / warmup as f64).min(1.0)
        };
        let lr = schedule.learning_rate * decay * backoff * ramp;

        let bc1 = 1.0 - schedule.beta1.powi(adam_t as i32);
        let bc2 = 1.0 - schedule.beta2.powi(adam_t as i32);
        let mut step_sq = 0.0;
        let mut stepped = vec![false; n];
        for i in 0..n {
            if frozen[i] {
                continue;
            }
            let g = grad[i];
            m[i] = schedule.beta1 * m[i] + (1.0 - schedule.beta1) * g;
            v[i] = schedule.beta2 * v[i] + (1.0 - schedule.beta2) * g * g;
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            let dx = lr * lr_scale[i] * mh / (vh.sqrt() + schedule.epsilon);
            if dx != 0.0 {
                x[i] -= dx;
                stepped[i] = true;
                step_sq += dx * dx;
            }
        }
        // Retract only tuples that actually moved, so an untouched
        // quaternion stays bit-identical.
        for &k in &quat_tuples {
            if stepped[k..k + 4].iter().any(|s| *s) {
                let norm = (x[k] * x[k] + x[k + 1] * x[k + 1] + x[k + 2] * x[k + 2]
                    + x[k + 3] * x[k + 3])
                    .sqrt();
                if norm > 0.0 {
                    for j in 0..4 {
                        x[k + j] /= norm;
                    }
                }
            }
        }
        iterations_run = iter + 1;

        if let Some(w) = &mut log {
            if iter % schedule.log_every == 0 || iter + 1 == schedule.iterations {
                let mut record = json!({
                    "iter": iter,
                    "value": value,
                    "step_norm": step_sq.sqrt(),
                    "lr": lr,
                });
                for (name, term) in objective.loss_terms() {
                    record[name] = json!(term);
                }
                writeln!(w, "{record}")?;
            }
        }
    }

    let final_value = objective.eval(&x, None);
    let (value, chosen) = if best_val <= final_value {
        (best_val, &best_x)
    } else {
        (final_value, &x)
    };
    params.unflatten(chosen);
    if let Some(w) = &mut log {
        w.flush()?;
    }
    Ok(MinimizeResult {
        initial_value: if initial_value.is_nan() { value } else { initial_value },
        value,
        iterations: iterations_run,
    })
}

/// Max over coordinates of the relative error between the analytic gradient
/// and central finite differences with step `epsilon`.
pub fn check_gradient(objective: &mut dyn Objective, point: &[f64], epsilon: f64) -> f64 {
    let mut grad = vec![0.0; point.len()];
    objective.eval(point, Some(&mut grad));
    let mut x = point.to_vec();
    let mut max_rel = 0.0f64;
    for i in 0..point.len() {
        x[i] = point[i] + epsilon;
        let fp = objective.eval(&x, None);
        x[i] = point[i] - epsilon;
        let fm = objective.eval(&x, None);
        x[i] = point[i];
        let fd = (fp - fm) / (2.0 * epsilon);
        let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    max_rel
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_converges() {
        let target = [0.3, -0.2, 0.5];
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            let mut val = 0.0;
            if let Some(g) = grad {
                for i in 0..3 {
                    g[i] += 2.0 * (x[i] - target[i]);
                }
            }
            for i in 0..3 {
                val += (x[i] - target[i]).powi(2);
            }
            val
        };
        let mut params = Params::new(vec![ParamBlock::euclidean(vec![0.0; 3])]);
        let res = minimize(&mut obj, &mut params, &Schedule::new(2000, 0.05)).unwrap();
        for i in 0..3 {
            assert!((params.blocks[0].values[i] - target[i]).abs() < 1e-6);
        }
        assert!(res.value <= res.initial_value);
    }

    #[test]
    fn frozen_entries_stay_bit_identical() {
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                for i in 0..x.len() {
                    g[i] += 2.0 * x[i] + 1.0;
                }
            }
            x.iter().map(|v| v * v + v).sum()
        };
        let mut block = ParamBlock::euclidean(vec![0.125, 0.25, 0.5]);
        block.freeze_range(1..2);
        let mut params = Params::new(vec![block]);
        minimize(&mut obj, &mut params, &Schedule::new(200, 0.01)).unwrap();
        assert_eq!(params.blocks[0].values[1].to_bits(), 0.25f64.to_bits());
        assert_ne!(params.blocks[0].values[0], 0.125);
    }

    #[test]
    fn quaternion_block_stays_unit() {
        // Pull the quaternion toward a non-unit target; the retraction must
        // keep it unit at every evaluation the objective sees.
        let mut norms: Vec<f64> = Vec::new();
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            let n = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2] + x[3] * x[3]).sqrt();
            norms.push(n);
            let target = [0.2, 0.9, -0.1, 0.4];
            if let Some(g) = grad {
                for i in 0..4 {
                    g[i] += 2.0 * (x[i] - target[i]);
                }
            }
            (0..4).map(|i| (x[i] - target[i]).powi(2)).sum()
        };
        let mut params = Params::new(vec![ParamBlock::unit_quaternions(vec![
            1.0, 0.0, 0.0, 0.0,
        ])]);
        minimize(&mut obj, &mut params, &Schedule::new(300, 0.02)).unwrap();
        for n in norms.iter().skip(1) {
            assert!((n - 1.0).abs() < 1e-9, "norm drifted to {n}");
        }
    }

    #[test]
    fn at_optimum_returns_unchanged() {
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                for i in 0..x.len() {
                    g[i] += 2.0 * x[i];
                }
            }
            x.iter().map(|v| v * v).sum()
        };
        let mut params = Params::new(vec![ParamBlock::euclidean(vec![0.0, 0.0])]);
        let res = minimize(&mut obj, &mut params, &Schedule::new(500, 0.1)).unwrap();
        assert_eq!(res.iterations, 0);
        assert!(res.initial_value - res.value < 1e-10);
        assert_eq!(params.blocks[0].values, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_objective_reports_index() {
        let mut obj = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                g[0] += 1.0;
                g[1] += f64::NAN;
            }
            x[0]
        };
        let mut params = Params::new(vec![ParamBlock::euclidean(vec![0.0, 0.0])]);
        match minimize(&mut obj, &mut params, &Schedule::new(10, 0.1)) {
            Err(OptimError::NonFiniteObjective { param_index, .. }) => {
                assert_eq!(param_index, Some(1));
            }
            other => panic!("expected NonFiniteObjective, got {other:?}"),
        }
    }

    #[test]
    fn gradient_checker_accepts_exact_and_rejects_wrong() {
        let mut good = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                g[0] += x[1] * x[0].cos();
                g[1] += x[0].sin();
            }
            x[1] * x[0].sin()
        };
        let err = check_gradient(&mut good, &[0.7, 1.3], 1e-5);
        assert!(err < 1e-7, "exact gradient flagged: {err}");

        let mut bad = |x: &[f64], grad: Option<&mut [f64]>| {
            if let Some(g) = grad {
                g[0] += 1.5 * x[0];
            }
            x[0] * x[0]
        };
        let err = check_gradient(&mut bad, &[0.7], 1e-5);
        assert!(err > 1e-2, "wrong gradient accepted: {err}");
    }

    #[test]
    fn constant_objective_zero_gradient_both_ways() {
        let mut obj = |_: &[f64], _: Option<&mut [f64]>| 3.25;
        let err = check_gradient(&mut obj, &[0.1, -0.4], 1e-5);
        assert_eq!(err, 0.0);
    }
}
