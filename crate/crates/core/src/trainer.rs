//! Regularized maximum-likelihood training: mean negative log-likelihood
//! plus a Huber-smoothed L1 penalty and an optional network penalty on the
//! weights, minimized with L-BFGS. Thresholds are never penalized.

use std::collections::BTreeSet;

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lbfgs::{self, IterRecord, LbfgsConfig, Termination};
use crate::model::{dot, nll_terms, Layout, OrdinalModel, Variant};
use crate::network::RegularizerMatrix;
use crate::real::Real;

/// Labeled feature matrix; rows are evaluation points.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    x: Array2<T>,
    y: Vec<usize>,
    n_classes: usize,
    pub patient_ids: Vec<String>,
    pub feature_ids: Vec<String>,
}

impl<T: Real> Dataset<T> {
    pub fn new(
        x: Array2<T>,
        y: Vec<usize>,
        n_classes: usize,
        patient_ids: Vec<String>,
        feature_ids: Vec<String>,
    ) -> Result<Self> {
        if y.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: y.len(),
            });
        }
        if patient_ids.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: patient_ids.len(),
            });
        }
        if feature_ids.len() != x.ncols() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: feature_ids.len(),
            });
        }
        if n_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if let Some(bad) = y.iter().find(|l| !(1..=n_classes).contains(*l)) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside 1..={n_classes}"
            )));
        }
        if let Some((i, _)) = x
            .rows()
            .into_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::NonFinite { instance: i });
        }
        let x = if x.is_standard_layout() {
            x
        } else {
            x.as_standard_layout().to_owned()
        };
        Ok(Self {
            x,
            y,
            n_classes,
            patient_ids,
            feature_ids,
        })
    }

    /// Convenience constructor with generated ids.
    pub fn from_rows(rows: Vec<Vec<T>>, y: Vec<usize>, n_classes: usize) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: r.len(),
            });
        }
        let x = Array2::from_shape_vec((n, d), rows.into_iter().flatten().collect())
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Self::new(
            x,
            y,
            n_classes,
            (0..n).map(|i| format!("p{i}")).collect(),
            (0..d).map(|j| format!("f{j}")).collect(),
        )
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn x(&self) -> &Array2<T> {
        &self.x
    }

    pub fn labels(&self) -> &[usize] {
        &self.y
    }

    pub fn row(&self, i: usize) -> &[T] {
        self.x
            .row(i)
            .to_slice()
            .expect("dataset rows are contiguous")
    }

    pub fn column(&self, j: usize) -> ArrayView1<'_, T> {
        self.x.column(j)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_classes];
        for &y in &self.y {
            c[y - 1] += 1;
        }
        c
    }

    /// Rows in the given order; indices may repeat.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            n_classes: self.n_classes,
            patient_ids: rows.iter().map(|&i| self.patient_ids[i].clone()).collect(),
            feature_ids: self.feature_ids.clone(),
        }
    }

    /// Keeps the listed columns.
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(1), cols),
            y: self.y.clone(),
            n_classes: self.n_classes,
            patient_ids: self.patient_ids.clone(),
            feature_ids: cols.iter().map(|&j| self.feature_ids[j].clone()).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Dataset<U> {
        Dataset {
            x: self.x.mapv(|v| U::lit(v.to_f64_lossy())),
            y: self.y.clone(),
            n_classes: self.n_classes,
            patient_ids: self.patient_ids.clone(),
            feature_ids: self.feature_ids.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// L1 strength.
    pub alpha: f64,
    /// Network penalty strength.
    pub beta: f64,
    /// Huber smoothing width.
    pub epsilon: f64,
    pub selection_threshold: f64,
    pub optimizer: LbfgsConfig,
    /// Solve with a wider smoothing width first and shrink it tenfold per
    /// stage down to `epsilon`, warm-starting each stage.
    pub continuation: bool,
    /// Optional per-class multipliers of the likelihood terms.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            alpha: ALPHA_PREDICTION,
            beta: 0.0,
            epsilon: 1e-4,
            selection_threshold: 1e-3,
            optimizer: LbfgsConfig::default(),
            continuation: true,
            class_weights: None,
        }
    }
}

/// The L1 grid searched for the sparsity hyperparameter.
pub const ALPHA_GRID: [f64; 7] = [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2];

/// L1 strength used for the prediction results; the training default.
pub const ALPHA_PREDICTION: f64 = 3e-4;
/// L1 strength used for the stability rankings.
pub const ALPHA_RANKING: f64 = 3e-3;

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be >= 0");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be >= 0");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.selection_threshold > 0.0) {
            return bad("selection threshold must be > 0");
        }
        if self.optimizer.memory == 0 || self.optimizer.max_iterations == 0 {
            return bad("optimizer memory must be >= 1");
        }
        if let Some(w) = &self.class_weights {
            if w.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return bad("class weights must be finite and >= 0");
            }
        }
        Ok(())
    }
}

/// Widest smoothing width used by continuation.
pub const CONTINUATION_START: f64 = 1e-2;

impl TrainingConfig {
    /// Smoothing widths visited by [`fit`], ending at `epsilon`.
    pub fn epsilon_schedule(&self) -> Vec<f64> {
        let mut out = vec![self.epsilon];
        if self.continuation && self.alpha > 0.0 {
            let mut e = self.epsilon * 10.0;
            while e <= CONTINUATION_START * (1.0 + 1e-9) {
                out.push(e);
                e *= 10.0;
            }
        }
        out.reverse();
        out
    }
}

/// Smooth stand-in for `|w|`: quadratic inside `[-eps, eps]`, linear outside.
#[inline]
pub fn huber<T: Real>(w: T, eps: T) -> T {
    let a = w.abs();
    if a <= eps {
        T::lit(0.5) * w * w / eps
    } else {
        a - T::lit(0.5) * eps
    }
}

#[inline]
pub fn huber_grad<T: Real>(w: T, eps: T) -> T {
    if w.abs() <= eps {
        w / eps
    } else {
        w.signum()
    }
}

/// Training objective over a packed parameter vector.
pub struct Objective<'a, T> {
    data: &'a Dataset<T>,
    layout: Layout,
    reg: Option<&'a RegularizerMatrix<T>>,
    alpha: T,
    beta: T,
    eps: T,
    class_weights: Option<Vec<T>>,
}

impl<'a, T: Real> Objective<'a, T> {
    pub fn new(
        data: &'a Dataset<T>,
        variant: Variant,
        config: &TrainingConfig,
        reg: Option<&'a RegularizerMatrix<T>>,
    ) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(variant, data.n_classes(), data.dim())?;
        let reg = if config.beta > 0.0 {
            let r = reg.ok_or_else(|| {
                Error::InvalidArgument("beta > 0 needs a regularizer matrix".into())
            })?;
            if r.dim() != data.dim() {
                return Err(Error::DimensionMismatch {
                    expected: data.dim(),
                    got: r.dim(),
                });
            }
            Some(r)
        } else {
            None
        };
        let class_weights = match &config.class_weights {
            Some(w) if w.len() != data.n_classes() => {
                return Err(Error::DimensionMismatch {
                    expected: data.n_classes(),
                    got: w.len(),
                })
            }
            Some(w) => Some(w.iter().map(|v| T::lit(*v)).collect()),
            None => None,
        };
        Ok(Self {
            data,
            layout,
            reg,
            alpha: T::lit(config.alpha),
            beta: T::lit(config.beta),
            eps: T::lit(config.epsilon),
            class_weights,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Value and gradient; `grad` is overwritten.
    pub fn evaluate(&self, params: &[T], grad: &mut [T]) -> Result<T> {
        let layout = self.layout;
        let d = layout.dim;
        let nb = layout.n_blocks();
        let nt = layout.n_thresholds();
        grad.iter_mut().for_each(|g| *g = T::zero());
        let tau = layout.thresholds(params);
        let n = self.data.n();
        let inv_n = T::one() / T::lit(n.max(1) as f64);
        let mut scores = vec![T::zero(); nb];
        let mut dscore = vec![T::zero(); nb];
        let mut dtau = vec![T::zero(); nt];
        let mut dtau_sum = vec![T::zero(); nt];
        let mut data_term = T::zero();
        for i in 0..n {
            let x = self.data.row(i);
            let y = self.data.labels()[i];
            for (b, s) in scores.iter_mut().enumerate() {
                *s = dot(layout.block(params, b), x);
            }
            let mut v = nll_terms(layout.variant, &tau, &scores, y, &mut dscore, &mut dtau);
            let cw = self
                .class_weights
                .as_ref()
                .map_or_else(T::one, |w| w[y - 1]);
            v *= cw;
            if !v.is_finite() || dscore.iter().chain(&dtau).any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { instance: i });
            }
            data_term += v;
            for (b, g) in dscore.iter().enumerate() {
                let coef = *g * cw * inv_n;
                if coef != T::zero() {
                    for (gj, xj) in grad[b * d..(b + 1) * d].iter_mut().zip(x) {
                        *gj += coef * *xj;
                    }
                }
            }
            for (acc, g) in dtau_sum.iter_mut().zip(&dtau) {
                *acc += *g * cw * inv_n;
            }
        }
        let nw = layout.n_weights();
        layout.chain_thresholds(params, &dtau_sum, &mut grad[nw..]);
        let mut value = data_term * inv_n;

        if self.alpha > T::zero() {
            let mut l1 = T::zero();
            for (g, w) in grad[..nw].iter_mut().zip(&params[..nw]) {
                l1 += huber(*w, self.eps);
                *g += self.alpha * huber_grad(*w, self.eps);
            }
            value += self.alpha * l1;
        }
        if let Some(reg) = self.reg {
            for b in 0..nb {
                let w = layout.block(params, b);
                value += reg.accumulate(w, self.beta, &mut grad[b * d..(b + 1) * d]);
            }
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { instance: n });
        }
        Ok(value)
    }

    pub fn value(&self, params: &[T]) -> Result<T> {
        let mut g = vec![T::zero(); params.len()];
        self.evaluate(params, &mut g)
    }
}

/// Zero weights and thresholds matching the empirical class frequencies.
///
/// Cumulative thresholds invert the cumulative frequencies; stagewise ones
/// invert the conditional stopping frequencies. Shared stagewise thresholds
/// are then forced apart by at least [`MIN_INITIAL_GAP`].
pub fn initial_params<T: Real>(layout: Layout, class_counts: &[usize]) -> Vec<T> {
    let n: usize = class_counts.iter().sum();
    let logit = |p: f64| {
        let p = p.clamp(1e-6, 1.0 - 1e-6);
        (p / (1.0 - p)).ln()
    };
    let mut tau: Vec<f64> = Vec::with_capacity(layout.n_thresholds());
    let mut below = 0usize;
    for l in 0..layout.n_thresholds() {
        let t = match layout.variant {
            Variant::Cumulative => {
                below += class_counts[l];
                logit(below as f64 / n as f64)
            }
            _ => {
                let at_or_above: usize = class_counts[l..].iter().sum();
                logit(class_counts[l] as f64 / at_or_above.max(1) as f64)
            }
        };
        tau.push(t);
    }
    if layout.variant.shares_weights() {
        for l in 1..tau.len() {
            if tau[l] < tau[l - 1] + MIN_INITIAL_GAP {
                tau[l] = tau[l - 1] + MIN_INITIAL_GAP;
            }
        }
    }
    let tau: Vec<T> = tau.into_iter().map(T::lit).collect();
    let mut params = vec![T::zero(); layout.n_weights()];
    params.extend(
        layout
            .pack_thresholds(&tau)
            .expect("initial thresholds are ordered"),
    );
    params
}

pub const MIN_INITIAL_GAP: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage {
    pub epsilon: f64,
    pub iterations: usize,
    pub objective: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone)]
pub struct FitResult<T> {
    pub model: OrdinalModel<T>,
    /// Objective at the starting point under the final smoothing width.
    pub initial_objective: T,
    pub objective: T,
    /// Iterations over all stages.
    pub iterations: usize,
    pub termination: Termination,
    /// Trace of the last stage; iteration numbers count earlier stages.
    pub trace: Vec<IterRecord>,
    pub stages: Vec<Stage>,
}

impl<T> FitResult<T> {
    pub fn degraded(&self) -> bool {
        self.termination.is_degraded()
    }

    pub fn write_trace(&self, out: impl std::io::Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iter", "objective", "grad_norm", "step_size"])?;
        for r in &self.trace {
            w.write_record([
                r.iter.to_string(),
                r.objective.to_string(),
                r.grad_norm.to_string(),
                r.step_size.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace>", e))?;
        Ok(())
    }
}

/// Fits `variant` on `data`.
///
/// Every class must occur in the training labels. `init` overrides the
/// frequency-matched starting point.
pub fn fit<T: Real>(
    data: &Dataset<T>,
    config: &TrainingConfig,
    variant: Variant,
    reg: Option<&RegularizerMatrix<T>>,
    init: Option<&[T]>,
) -> Result<FitResult<T>> {
    if data.n() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let counts = data.class_counts();
    if let Some(l) = counts.iter().position(|c| *c == 0) {
        return Err(Error::MissingClass { class: l + 1 });
    }
    let objective = Objective::new(data, variant, config, reg)?;
    let layout = objective.layout();
    let x0 = match init {
        Some(p) if p.len() != layout.n_params() => {
            return Err(Error::DimensionMismatch {
                expected: layout.n_params(),
                got: p.len(),
            })
        }
        Some(p) => p.to_vec(),
        None => initial_params(layout, &counts),
    };
    let initial_objective = objective.value(&x0)?;
    let mut x = x0.clone();
    let mut stages = Vec::new();
    let mut offset = 0;
    let mut last = None;
    for eps in config.epsilon_schedule() {
        let stage_cfg = TrainingConfig {
            epsilon: eps,
            ..config.clone()
        };
        let obj = Objective::new(data, variant, &stage_cfg, reg)?;
        let mut min = lbfgs::minimize(|p, g| obj.evaluate(p, g), x, &config.optimizer)?;
        for r in &mut min.trace {
            r.iter += offset;
        }
        offset += min.iterations;
        stages.push(Stage {
            epsilon: eps,
            iterations: min.iterations,
            objective: min.value.to_f64_lossy(),
            termination: min.termination,
        });
        x = min.x.clone();
        last = Some(min);
    }
    let mut min = last.expect("at least one stage");
    if min.value > initial_objective {
        // a warm start from a wider smoothing landed worse than the start
        min = lbfgs::minimize(|p, g| objective.evaluate(p, g), x0, &config.optimizer)?;
    }
    Ok(FitResult {
        model: OrdinalModel::from_params(layout, min.x)?,
        initial_objective,
        objective: min.value,
        iterations: offset,
        termination: min.termination,
        trace: min.trace,
        stages,
    })
}

/// Zeroes every weight with `|w| <= threshold`. Returns the truncated model
/// and the features kept in at least one weight block.
pub fn select_features<T: Real>(
    model: &OrdinalModel<T>,
    threshold: T,
) -> (OrdinalModel<T>, BTreeSet<usize>) {
    let mut out = model.clone();
    let mut selected = BTreeSet::new();
    for b in 0..model.layout().n_blocks() {
        for (j, w) in out.weights_mut(b).iter_mut().enumerate() {
            if w.abs() <= threshold {
                *w = T::zero();
            } else {
                selected.insert(j);
            }
        }
    }
    (out, selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1e-4), 0.0);
        assert_eq!(huber_grad(0.0, 1e-4), 0.0);
        let eps = 1e-4f64;
        let inner = 0.5 * eps * eps / eps;
        let outer = eps - 0.5 * eps;
        assert!((inner - outer).abs() < 1e-20);
        assert!((huber(eps, eps) - 0.5 * eps).abs() < 1e-20);
        assert!((huber(5.0f64, 1e-4) - (5.0 - 5e-5)).abs() < 1e-15);
        assert_eq!(huber_grad(-2.0, 1e-4), -1.0);
        assert!((huber_grad(eps, eps) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn objective_at_half_probability_is_log_two() {
        let d = Dataset::from_rows(vec![vec![1.0]], vec![1], 2).unwrap();
        let cfg = TrainingConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let obj = Objective::new(&d, Variant::Cumulative, &cfg, None).unwrap();
        assert!((obj.value(&[0.0, 0.0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn penalties_vanish_at_zero_weights() {
        let d = Dataset::from_rows(vec![vec![0.2, 0.9], vec![0.5, 0.1]], vec![1, 2], 2).unwrap();
        let with = TrainingConfig {
            alpha: 0.5,
            ..Default::default()
        };
        let without = TrainingConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let p = [0.0, 0.0, 0.3];
        let a = Objective::new(&d, Variant::Cumulative, &with, None).unwrap().value(&p).unwrap();
        let b = Objective::new(&d, Variant::Cumulative, &without, None).unwrap().value(&p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beta_without_matrix_is_rejected() {
        let d = Dataset::from_rows(vec![vec![1.0]], vec![1], 2).unwrap();
        let cfg = TrainingConfig {
            beta: 1.0,
            ..Default::default()
        };
        assert!(Objective::new(&d, Variant::Cumulative, &cfg, None).is_err());
    }

    #[test]
    fn duplicated_row_doubles_its_contribution() {
        let cfg = TrainingConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let one = Dataset::from_rows(vec![vec![0.7f64]], vec![2], 3).unwrap();
        let two = Dataset::from_rows(vec![vec![0.7f64], vec![0.7]], vec![2, 2], 3).unwrap();
        let p = [0.4, -0.2, 0.1];
        let a = Objective::new(&one, Variant::Cumulative, &cfg, None).unwrap().value(&p).unwrap();
        let b = Objective::new(&two, Variant::Cumulative, &cfg, None).unwrap().value(&p).unwrap();
        // the objective is a mean over rows, so an exact duplicate leaves it unchanged
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn missing_class_is_fatal() {
        let d = Dataset::from_rows(vec![vec![1.0], vec![0.0]], vec![1, 1], 2).unwrap();
        assert!(matches!(
            fit(&d, &TrainingConfig::default(), Variant::Cumulative, None, None),
            Err(Error::MissingClass { class: 2 })
        ));
    }

    #[test]
    fn initial_thresholds_match_frequencies() {
        let layout = Layout::new(Variant::Cumulative, 3, 1).unwrap();
        let p: Vec<f64> = initial_params(layout, &[50, 25, 25]);
        let tau = layout.thresholds(&p);
        assert!(tau[0].abs() < 1e-12);
        assert!((tau[1] - 3f64.ln()).abs() < 1e-12);

        let layout = Layout::new(Variant::StagewiseMulti, 3, 1).unwrap();
        let p: Vec<f64> = initial_params(layout, &[50, 25, 25]);
        assert!(p[2].abs() < 1e-12 && p[3].abs() < 1e-12);

        let layout = Layout::new(Variant::StagewiseShared, 3, 1).unwrap();
        let p: Vec<f64> = initial_params(layout, &[93, 5, 2]);
        let tau = layout.thresholds(&p);
        assert!(tau[1] - tau[0] >= MIN_INITIAL_GAP - 1e-12);
    }

    #[test]
    fn select_features_examples() {
        let m = OrdinalModel::new(Variant::Cumulative, vec![vec![1e-4, -1e-4, 1e-4]], vec![0.0]).unwrap();
        let (_, s) = select_features(&m, 1e-3);
        assert!(s.is_empty());
        let m = OrdinalModel::new(Variant::Cumulative, vec![vec![0.5, 1e-5]], vec![0.0]).unwrap();
        let (sparse, s) = select_features(&m, 1e-3);
        assert_eq!(s.into_iter().collect::<Vec<_>>(), vec![0]);
        assert_eq!(sparse.weights(0), &[0.5, 0.0]);
        let (twice, _) = select_features(&sparse, 1e-3);
        assert_eq!(twice, sparse);
    }
}
