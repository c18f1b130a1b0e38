//! Box-constrained limited-memory quasi-Newton ascent in log-space.
//!
//! Directions come from the L-BFGS two-loop recursion with components that
//! would leave the box removed; steps are projected back onto the box and
//! accepted by a backtracking Armijo test. Iteration stops when the
//! projected-gradient ∞-norm falls below the tolerance, at the iteration cap,
//! or when the line search cannot make progress.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::kernel::{Hyperparameters, N_THETA};
use super::Evaluation;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    pub max_iterations: usize,
    /// Tolerance on the projected-gradient ∞-norm in log-space.
    pub gradient_tolerance: f64,
    pub memory: usize,
    /// Box in log-space, order `[s², ϱ, λ_1..4]`.
    pub lower: [f64; N_THETA],
    pub upper: [f64; N_THETA],
    /// Largest ∞-norm of a single log-space step.
    pub max_step: f64,
    /// Stop when an accepted step improves the objective by less than this
    /// fraction of `max(1, |f|)`.
    pub function_tolerance: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        let ln = f64::ln;
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-6,
            memory: 10,
            lower: [ln(1e-8), ln(1e-3), ln(1e-3), ln(1e-3), ln(1e-3), ln(1e-3)],
            upper: [ln(10.0), ln(2.0), ln(1e2), ln(1e2), ln(1e2), ln(1e2)],
            max_step: 2.0,
            function_tolerance: 1e-12,
            max_backtracks: 20,
        }
    }
}

impl OptimizerOptions {
    fn project(&self, x: &mut [f64; N_THETA]) {
        for i in 0..N_THETA {
            x[i] = x[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    fn validate(&self) -> Result<()> {
        if (0..N_THETA).any(|i| !(self.lower[i] < self.upper[i])) {
            return Err(invalid("optimizer box has an empty side"));
        }
        if self.memory == 0 || !(self.gradient_tolerance > 0.0) || !(self.max_step > 0.0) {
            return Err(invalid("invalid optimizer options"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchStall,
    /// Objective change below the relative function tolerance.
    FunctionTolerance,
}

/// One optimizer run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub start: Hyperparameters,
    pub end: Hyperparameters,
    /// Objective value at `end`.
    pub value: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    /// Projected-gradient ∞-norm at `end`.
    pub projected_gradient: f64,
}

fn dot(a: &[f64; N_THETA], b: &[f64; N_THETA]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximizes `f` from `start`. Fails only if `f` fails at the start point.
///
/// `f(θ, true)` must return the value and gradient; `f(θ, false)` may leave
/// the gradient at zero and is used for line-search trials.
pub fn maximize<F>(mut f: F, start: Hyperparameters, options: &OptimizerOptions) -> Result<Trajectory>
where
    F: FnMut(&Hyperparameters, bool) -> Result<Evaluation>,
{
    options.validate()?;
    let mut x = start.to_log();
    options.project(&mut x);
    // internally minimize the negated objective
    let mut eval = |x: &[f64; N_THETA], grad: bool| -> Result<(f64, [f64; N_THETA])> {
        let e = f(&Hyperparameters::from_log(x), grad)?;
        if !e.value.is_finite() || e.gradient.iter().any(|g| !g.is_finite()) {
            return Err(crate::RomError::Numerical("non-finite objective".into()));
        }
        Ok((-e.value, e.gradient.map(|g| -g)))
    };
    let (mut fx, mut gx) = eval(&x, true)?;
    let mut evaluations = 1;
    let mut history: VecDeque<([f64; N_THETA], [f64; N_THETA])> = VecDeque::new();
    let mut iterations = 0;

    let projected_gradient = |x: &[f64; N_THETA], g: &[f64; N_THETA]| -> f64 {
        (0..N_THETA)
            .map(|i| ((x[i] - g[i]).clamp(options.lower[i], options.upper[i]) - x[i]).abs())
            .fold(0.0, f64::max)
    };

    let termination = loop {
        if projected_gradient(&x, &gx) < options.gradient_tolerance {
            break Termination::Converged;
        }
        if iterations >= options.max_iterations {
            break Termination::MaxIterations;
        }
        // variables held at a bound by the gradient are fixed for this step
        let free: [bool; N_THETA] = std::array::from_fn(|i| {
            !((x[i] <= options.lower[i] && gx[i] > 0.0) || (x[i] >= options.upper[i] && gx[i] < 0.0))
        });
        let masked = |v: &[f64; N_THETA]| -> [f64; N_THETA] {
            std::array::from_fn(|i| if free[i] { v[i] } else { 0.0 })
        };
        // two-loop recursion on the free subspace
        let mut q = masked(&gx);
        let mut alphas = Vec::with_capacity(history.len());
        let mut curvature_ok = true;
        for (s, y) in history.iter().rev() {
            let (s, y) = (masked(s), masked(y));
            let sy = dot(&s, &y);
            if !(sy > 0.0) {
                curvature_ok = false;
                alphas.push(0.0);
                continue;
            }
            let a = dot(&s, &q) / sy;
            for i in 0..N_THETA {
                q[i] -= a * y[i];
            }
            alphas.push(a);
        }
        if let Some((s, y)) = history.back() {
            let (s, y) = (masked(s), masked(y));
            let (sy, yy) = (dot(&s, &y), dot(&y, &y));
            if sy > 0.0 && yy > 0.0 {
                q.iter_mut().for_each(|v| *v *= sy / yy);
            }
        }
        for ((s, y), a) in history.iter().zip(alphas.iter().rev()) {
            let (s, y) = (masked(s), masked(y));
            let sy = dot(&s, &y);
            if !(sy > 0.0) {
                continue;
            }
            let b = dot(&y, &q) / sy;
            for i in 0..N_THETA {
                q[i] += (a - b) * s[i];
            }
        }
        let mut d = masked(&q.map(|v| -v));
        if !curvature_ok || dot(&gx, &d) >= 0.0 {
            history.clear();
            d = masked(&gx.map(|v| -v));
        }
        let norm = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if norm == 0.0 {
            break Termination::Converged;
        }
        let mut t = if history.is_empty() { (1.0 / norm).min(1.0) } else { 1.0 };
        t = t.min(options.max_step / norm);

        let mut accepted = None;
        for _ in 0..=options.max_backtracks {
            let mut xn = x;
            for i in 0..N_THETA {
                xn[i] += t * d[i];
            }
            options.project(&mut xn);
            let step: [f64; N_THETA] = std::array::from_fn(|i| xn[i] - x[i]);
            if step.iter().all(|s| *s == 0.0) {
                break;
            }
            evaluations += 1;
            if let Ok((fnew, _)) = eval(&xn, false) {
                if fnew <= fx + 1e-4 * dot(&gx, &step) {
                    accepted = Some((xn, fnew, step));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((xn, fnew, s)) = accepted else {
            break Termination::LineSearchStall;
        };
        let Ok((_, gnew)) = eval(&xn, true) else {
            break Termination::LineSearchStall;
        };
        let y: [f64; N_THETA] = std::array::from_fn(|i| gnew[i] - gx[i]);
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y));
        }
        let improvement = fx - fnew;
        x = xn;
        gx = gnew;
        iterations += 1;
        if improvement <= options.function_tolerance * fx.abs().max(fnew.abs()).max(1.0) {
            fx = fnew;
            break Termination::FunctionTolerance;
        }
        fx = fnew;
    };
    Ok(Trajectory {
        start,
        end: Hyperparameters::from_log(&x),
        value: -fx,
        iterations,
        evaluations,
        termination,
        projected_gradient: projected_gradient(&x, &gx),
    })
}
