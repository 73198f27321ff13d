//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective is a callback filling a gradient buffer and returning the
//! value. Accepted iterates always satisfy sufficient decrease, so the
//! recorded objective trace is non-increasing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the gradient sup-norm falls to this value.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease stays below this value
    /// for `patience` consecutive iterations.
    pub rel_tol: f64,
    pub patience: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-10,
            patience: 5,
            c1: 1e-4,
            c2: 0.9,
            max_line_search: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// No acceptable step could be found; the best point so far is returned.
    LineSearchFailed,
}

impl Termination {
    pub fn is_degraded(self) -> bool {
        matches!(self, Termination::LineSearchFailed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub step_size: f64,
}

#[derive(Debug, Clone)]
pub struct Minimum<T> {
    pub x: Vec<T>,
    pub value: T,
    pub grad: Vec<T>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub trace: Vec<IterRecord>,
}

fn sup_norm<T: Real>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, x| m.max(x.abs()))
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

struct Point<T> {
    x: Vec<T>,
    f: T,
    g: Vec<T>,
}

struct Search<'a, T, F> {
    f: &'a mut F,
    evaluations: usize,
    _t: std::marker::PhantomData<T>,
}

impl<T: Real, F, E> Search<'_, T, F>
where
    F: FnMut(&[T], &mut [T]) -> Result<T, E>,
{
    fn eval(&mut self, x: Vec<T>) -> Result<Point<T>, E> {
        let mut g = vec![T::zero(); x.len()];
        let f = (self.f)(&x, &mut g)?;
        self.evaluations += 1;
        Ok(Point { x, f, g })
    }

    fn probe(&mut self, base: &Point<T>, d: &[T], alpha: T) -> Result<(Point<T>, T), E> {
        let x: Vec<T> = base.x.iter().zip(d).map(|(x, d)| *x + alpha * *d).collect();
        let p = self.eval(x)?;
        let slope = dot(&p.g, d);
        Ok((p, slope))
    }

    /// Strong-Wolfe search along `d`; falls back to the best
    /// sufficient-decrease point seen when the curvature condition cannot
    /// be met.
    fn line_search(
        &mut self,
        base: &Point<T>,
        d: &[T],
        alpha0: T,
        cfg: &LbfgsConfig,
    ) -> Result<Option<(Point<T>, T)>, E> {
        let c1 = T::lit(cfg.c1);
        let c2 = T::lit(cfg.c2);
        let phi0 = base.f;
        let dphi0 = dot(&base.g, d);
        if !(dphi0 < T::zero()) {
            return Ok(None);
        }
        let armijo = |a: T, phi: T| phi <= phi0 + c1 * a * dphi0 && phi.is_finite();
        let curvature = |dphi: T| dphi.abs() <= -c2 * dphi0;

        let mut best: Option<(Point<T>, T)> = None;
        let keep_best = |p: Point<T>, a: T, best: &mut Option<(Point<T>, T)>| {
            if best.as_ref().is_none_or(|(b, _)| p.f < b.f) {
                *best = Some((p, a));
            }
        };

        let mut a_prev = T::zero();
        let mut phi_prev = phi0;
        let mut dphi_prev = dphi0;
        let mut alpha = alpha0;
        let mut bracket: Option<(T, T, T, T, T, T)> = None;
        let mut used = 0;
        while used < cfg.max_line_search {
            used += 1;
            let (p, dphi) = self.probe(base, d, alpha)?;
            let phi = p.f;
            if !armijo(alpha, phi) || (used > 1 && phi >= phi_prev) {
                bracket = Some((a_prev, phi_prev, dphi_prev, alpha, phi, dphi));
                break;
            }
            if curvature(dphi) {
                return Ok(Some((p, alpha)));
            }
            if dphi >= T::zero() {
                bracket = Some((alpha, phi, dphi, a_prev, phi_prev, dphi_prev));
                keep_best(p, alpha, &mut best);
                break;
            }
            keep_best(p, alpha, &mut best);
            a_prev = alpha;
            phi_prev = phi;
            dphi_prev = dphi;
            alpha = alpha * T::lit(2.0);
        }

        if let Some((mut lo, mut phi_lo, mut dphi_lo, mut hi, mut phi_hi, mut dphi_hi)) = bracket {
            while used < cfg.max_line_search {
                used += 1;
                let width = hi - lo;
                if width.abs() <= T::epsilon() * lo.abs().max(T::one()) {
                    break;
                }
                let a = interpolate(lo, phi_lo, dphi_lo, hi, phi_hi, dphi_hi);
                let (p, dphi) = self.probe(base, d, a)?;
                let phi = p.f;
                if !armijo(a, phi) || phi >= phi_lo {
                    hi = a;
                    phi_hi = phi;
                    dphi_hi = dphi;
                } else {
                    if curvature(dphi) {
                        return Ok(Some((p, a)));
                    }
                    if dphi * (hi - lo) >= T::zero() {
                        hi = lo;
                        phi_hi = phi_lo;
                        dphi_hi = dphi_lo;
                    }
                    lo = a;
                    phi_lo = phi;
                    dphi_lo = dphi;
                    keep_best(p, a, &mut best);
                }
            }
        }
        Ok(best.filter(|(p, _)| p.f < phi0))
    }
}

/// Safeguarded cubic interpolation inside the bracket, bisection fallback.
fn interpolate<T: Real>(lo: T, f_lo: T, d_lo: T, hi: T, f_hi: T, d_hi: T) -> T {
    let (a, b) = (lo.min(hi), lo.max(hi));
    let w = b - a;
    let margin = T::lit(0.1) * w;
    let mid = T::lit(0.5) * (lo + hi);
    let h = hi - lo;
    let d1 = d_lo + d_hi - T::lit(3.0) * (f_lo - f_hi) / (lo - hi);
    let disc = d1 * d1 - d_lo * d_hi;
    if !(disc >= T::zero()) || !h.is_finite() {
        return mid;
    }
    let d2 = h.signum() * disc.sqrt();
    let denom = d_hi - d_lo + T::lit(2.0) * d2;
    if denom == T::zero() {
        return mid;
    }
    let t = hi - h * (d_hi + d2 - d1) / denom;
    if t.is_finite() && t >= a + margin && t <= b - margin {
        t
    } else {
        mid
    }
}

/// Minimizes `f` from `x0`. Errors raised by `f` abort the run.
pub fn minimize<T, F, E>(mut f: F, x0: Vec<T>, cfg: &LbfgsConfig) -> Result<Minimum<T>, E>
where
    T: Real,
    F: FnMut(&[T], &mut [T]) -> Result<T, E>,
{
    let mut search = Search {
        f: &mut f,
        evaluations: 0,
        _t: std::marker::PhantomData,
    };
    let mut cur = search.eval(x0)?;
    let mut trace = vec![IterRecord {
        iter: 0,
        objective: cur.f.to_f64_lossy(),
        grad_norm: sup_norm(&cur.g).to_f64_lossy(),
        step_size: 0.0,
    }];
    let mut hist: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::with_capacity(cfg.memory);
    let grad_tol = T::lit(cfg.grad_tol);
    let rel_tol = T::lit(cfg.rel_tol);
    let mut flat_steps = 0;
    let mut iter = 0;

    let termination = loop {
        if sup_norm(&cur.g) <= grad_tol {
            break Termination::GradientTolerance;
        }
        if iter >= cfg.max_iterations {
            break Termination::MaxIterations;
        }
        iter += 1;

        let d = direction(&cur.g, &hist);
        let alpha0 = if hist.is_empty() {
            T::one() / sup_norm(&cur.g).max(T::one())
        } else {
            T::one()
        };
        let mut step = search.line_search(&cur, &d, alpha0, cfg)?;
        if step.is_none() && !hist.is_empty() {
            hist.clear();
            let sd: Vec<T> = cur.g.iter().map(|g| -*g).collect();
            let a0 = T::one() / sup_norm(&cur.g).max(T::one());
            step = search.line_search(&cur, &sd, a0, cfg)?;
        }
        let Some((next, alpha)) = step else {
            break Termination::LineSearchFailed;
        };

        let s: Vec<T> = next.x.iter().zip(&cur.x).map(|(a, b)| *a - *b).collect();
        let y: Vec<T> = next.g.iter().zip(&cur.g).map(|(a, b)| *a - *b).collect();
        let sy = dot(&s, &y);
        if sy > T::epsilon() * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if hist.len() == cfg.memory {
                hist.pop_front();
            }
            hist.push_back((s, y, sy.recip()));
        }

        let denom = cur.f.abs().max(next.f.abs()).max(T::one());
        let rel = (cur.f - next.f) / denom;
        cur = next;
        trace.push(IterRecord {
            iter,
            objective: cur.f.to_f64_lossy(),
            grad_norm: sup_norm(&cur.g).to_f64_lossy(),
            step_size: alpha.to_f64_lossy(),
        });
        if rel < rel_tol {
            flat_steps += 1;
            if flat_steps >= cfg.patience {
                break Termination::RelativeDecrease;
            }
        } else {
            flat_steps = 0;
        }
    };

    Ok(Minimum {
        value: cur.f,
        x: cur.x,
        grad: cur.g,
        iterations: iter,
        evaluations: search.evaluations,
        termination,
        trace,
    })
}

/// Two-loop recursion producing `-H g`.
fn direction<T: Real>(g: &[T], hist: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let mut q: Vec<T> = g.to_vec();
    let mut alphas = Vec::with_capacity(hist.len());
    for (s, y, rho) in hist.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * *yi;
        }
        alphas.push(a);
    }
    if let Some((s, y, _)) = hist.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in hist.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * *si;
        }
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::convert::Infallible;

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> Result<f64, Infallible> {
        let (a, b) = (1.0, 100.0);
        g[0] = -2.0 * (a - x[0]) - 4.0 * b * (x[1] - x[0] * x[0]) * x[0];
        g[1] = 2.0 * b * (x[1] - x[0] * x[0]);
        Ok((a - x[0]).powi(2) + b * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn solves_rosenbrock() {
        let m = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        assert_eq!(m.termination, Termination::GradientTolerance);
        assert!((m.x[0] - 1.0).abs() < 1e-5 && (m.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn trace_is_monotone() {
        let m = minimize(rosenbrock, vec![-1.2, 1.0], &LbfgsConfig::default()).unwrap();
        for w in m.trace.windows(2) {
            assert!(w[1].objective <= w[0].objective);
        }
        assert_eq!(m.trace.len(), m.iterations + 1);
    }

    #[test]
    fn quadratic_in_f32() {
        let f = |x: &[f32], g: &mut [f32]| -> Result<f32, Infallible> {
            let mut v = 0.0;
            for i in 0..x.len() {
                let c = (i + 1) as f32;
                g[i] = 2.0 * c * (x[i] - 1.0);
                v += c * (x[i] - 1.0).powi(2);
            }
            Ok(v)
        };
        let cfg = LbfgsConfig {
            grad_tol: 1e-4,
            ..Default::default()
        };
        let m = minimize(f, vec![0.0f32; 5], &cfg).unwrap();
        assert!(m.x.iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn max_iterations_is_reported() {
        let cfg = LbfgsConfig {
            max_iterations: 2,
            ..Default::default()
        };
        let m = minimize(rosenbrock, vec![-1.2, 1.0], &cfg).unwrap();
        assert_eq!(m.termination, Termination::MaxIterations);
        assert_eq!(m.iterations, 2);
    }

    #[test]
    fn objective_errors_propagate() {
        let r = minimize(
            |_x: &[f64], _g: &mut [f64]| -> Result<f64, &'static str> { Err("boom") },
            vec![0.0],
            &LbfgsConfig::default(),
        );
        assert_eq!(r.unwrap_err(), "boom");
    }

    #[test]
    fn nonsmooth_kink_returns_best_so_far() {
        // |x| has no stationary point with a nonzero subgradient; the search
        // must still end with a finite value no larger than the start.
        let f = |x: &[f64], g: &mut [f64]| -> Result<f64, Infallible> {
            g[0] = x[0].signum();
            Ok(x[0].abs())
        };
        let m = minimize(f, vec![3.0], &LbfgsConfig::default()).unwrap();
        assert!(m.value <= 3.0 && m.value.is_finite());
    }
}
