//! Projected L-BFGS with a backtracking Armijo line search.
//!
//! Feasibility is maintained by a projection applied to every trial point.
//! When the quasi-Newton direction fails to produce sufficient decrease the
//! memory is dropped and the step falls back to steepest descent with step
//! halving. Accepted steps never increase the objective.

use std::collections::VecDeque;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop once the projected-gradient infinity norm drops below this.
    pub gradient_tolerance: f64,
    /// Stop once `|f_k - f_{k+1}| / max(|f_k|, 1e-300)` drops below this.
    pub relative_tolerance: f64,
    pub armijo: f64,
    pub max_backtracks: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            gradient_tolerance: 1e-7,
            relative_tolerance: 1e-10,
            armijo: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
}

struct CurvaturePair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `|x - P(x - g)|_inf`, zero exactly at a stationary point of the projected problem.
fn projected_gradient_norm<P: Fn(&mut [f64])>(x: &[f64], g: &[f64], project: &P) -> f64 {
    let mut probe: Vec<f64> = x.iter().zip(g).map(|(xi, gi)| xi - gi).collect();
    project(&mut probe);
    x.iter().zip(&probe).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
}

fn two_loop(g: &[f64], history: &VecDeque<CurvaturePair>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for pair in history.iter().rev() {
        let a = pair.rho * dot(&pair.s, &q);
        for (qi, yi) in q.iter_mut().zip(&pair.y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(last) = history.back() {
        let gamma = dot(&last.s, &last.y) / dot(&last.y, &last.y);
        for qi in q.iter_mut() {
            *qi *= gamma;
        }
    }
    for (pair, a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = pair.rho * dot(&pair.y, &q);
        for (qi, si) in q.iter_mut().zip(&pair.s) {
            *qi += (a - b) * si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

struct Trial {
    x: Vec<f64>,
    f: f64,
    g: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn backtrack<F, P>(
    objective: &mut F,
    project: &P,
    x: &[f64],
    f: f64,
    g: &[f64],
    dir: &[f64],
    initial_step: f64,
    config: &LbfgsConfig,
) -> Option<Trial>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let mut step = initial_step;
    let mut gt = vec![0.0; x.len()];
    for _ in 0..config.max_backtracks {
        let mut xt: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + step * di).collect();
        project(&mut xt);
        let dx: Vec<f64> = xt.iter().zip(x).map(|(a, b)| a - b).collect();
        let decrease = dot(g, &dx);
        if decrease < 0.0 {
            let ft = objective(&xt, &mut gt);
            if ft.is_finite() && ft <= f + config.armijo * decrease {
                return Some(Trial { x: xt, f: ft, g: gt });
            }
        } else if inf_norm(&dx) == 0.0 {
            return None;
        }
        step *= 0.5;
    }
    None
}

/// Minimises `objective` from `x0`. The objective writes its gradient into
/// the second argument and returns the value.
pub fn minimize<F, P>(mut objective: F, project: P, x0: Vec<f64>, config: &LbfgsConfig) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let mut x = x0;
    project(&mut x);
    let mut g = vec![0.0; x.len()];
    let mut f = objective(&x, &mut g);
    let initial_value = f;
    let mut history: VecDeque<CurvaturePair> = VecDeque::with_capacity(config.memory);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_iterations {
        let pg = projected_gradient_norm(&x, &g, &project);
        if pg < config.gradient_tolerance {
            converged = true;
            break;
        }

        let mut trial = None;
        if !history.is_empty() {
            let dir = two_loop(&g, &history);
            if dot(&g, &dir) < 0.0 {
                trial = backtrack(&mut objective, &project, &x, f, &g, &dir, 1.0, config);
            }
        }
        if trial.is_none() {
            history.clear();
            let dir: Vec<f64> = g.iter().map(|v| -v).collect();
            let step = (1.0 / inf_norm(&g)).min(1.0);
            trial = backtrack(&mut objective, &project, &x, f, &g, &dir, step, config);
        }
        let Some(trial) = trial else {
            // No representable decrease along steepest descent: we are at the
            // floating-point floor of this objective.
            log::debug!("line search exhausted at iteration {iterations}, |pg| = {pg:e}");
            converged = pg < config.gradient_tolerance.sqrt();
            break;
        };

        let s: Vec<f64> = trial.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back(CurvaturePair { s, y, rho: 1.0 / sy });
        }

        let rel = (f - trial.f).abs() / f.abs().max(1e-300);
        x = trial.x;
        f = trial.f;
        g = trial.g;
        iterations += 1;
        if rel < config.relative_tolerance {
            converged = true;
            break;
        }
    }

    let gradient_norm = projected_gradient_norm(&x, &g, &project);
    if !converged && gradient_norm < config.gradient_tolerance {
        converged = true;
    }
    Minimum {
        point: x,
        value: f,
        initial_value,
        iterations,
        converged,
        gradient_norm,
    }
}
