//! Probabilistic ordinal classifiers with a logistic link: the cumulative
//! (proportional odds) model and the stagewise model, the latter with one
//! shared weight vector or one weight vector per stage.
//!
//! Parameters are packed into one flat vector:
//!
//! * shared variants: `[w (d), tau_1, log(tau_2 - tau_1), ..., log(tau_{L-1} - tau_{L-2})]`
//! * separate stagewise: `[w_1 (d), ..., w_{L-1} (d), tau_1, ..., tau_{L-1}]`
//!
//! The log-gap form keeps shared thresholds strictly increasing during
//! unconstrained optimization. Separate stagewise thresholds are free.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Cumulative,
    StagewiseShared,
    StagewiseMulti,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Cumulative,
        Variant::StagewiseShared,
        Variant::StagewiseMulti,
    ];

    pub fn shares_weights(self) -> bool {
        !matches!(self, Variant::StagewiseMulti)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Cumulative => "cumulative",
            Variant::StagewiseShared => "stagewise_shared",
            Variant::StagewiseMulti => "stagewise_multi",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| format!("unknown model variant {s:?}"))
    }
}

/// Shape of the packed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub variant: Variant,
    pub n_classes: usize,
    pub dim: usize,
}

impl Layout {
    pub fn new(variant: Variant, n_classes: usize, dim: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        Ok(Self {
            variant,
            n_classes,
            dim,
        })
    }

    pub fn n_thresholds(&self) -> usize {
        self.n_classes - 1
    }

    pub fn n_blocks(&self) -> usize {
        if self.variant.shares_weights() {
            1
        } else {
            self.n_thresholds()
        }
    }

    pub fn n_weights(&self) -> usize {
        self.n_blocks() * self.dim
    }

    pub fn n_params(&self) -> usize {
        self.n_weights() + self.n_thresholds()
    }

    pub fn block<'a, T>(&self, params: &'a [T], b: usize) -> &'a [T] {
        &params[b * self.dim..(b + 1) * self.dim]
    }

    pub fn tau_params<'a, T>(&self, params: &'a [T]) -> &'a [T] {
        &params[self.n_weights()..]
    }

    fn gapped(&self) -> bool {
        self.variant.shares_weights()
    }

    /// Natural-scale thresholds from the packed vector.
    pub fn thresholds<T: Real>(&self, params: &[T]) -> Vec<T> {
        let raw = self.tau_params(params);
        if !self.gapped() {
            return raw.to_vec();
        }
        let mut out = Vec::with_capacity(raw.len());
        let mut t = raw[0];
        out.push(t);
        for g in &raw[1..] {
            t += g.exp();
            out.push(t);
        }
        out
    }

    /// Inverse of [`Layout::thresholds`]; shared variants need strictly
    /// increasing thresholds.
    pub fn pack_thresholds<T: Real>(&self, tau: &[T]) -> Result<Vec<T>> {
        if tau.len() != self.n_thresholds() {
            return Err(Error::DimensionMismatch {
                expected: self.n_thresholds(),
                got: tau.len(),
            });
        }
        if tau.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidArgument("non-finite threshold".into()));
        }
        if !self.gapped() {
            return Ok(tau.to_vec());
        }
        let mut out = vec![tau[0]];
        for w in tau.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidArgument(
                    "thresholds of shared-parameter models must be strictly increasing".into(),
                ));
            }
            out.push((w[1] - w[0]).ln());
        }
        Ok(out)
    }

    /// Maps a gradient w.r.t. natural thresholds onto the packed threshold
    /// parameters, writing into `out`.
    pub fn chain_thresholds<T: Real>(&self, params: &[T], dtau: &[T], out: &mut [T]) {
        if !self.gapped() {
            out.copy_from_slice(dtau);
            return;
        }
        let raw = self.tau_params(params);
        // suffix sums: d tau_m / d gap_k = exp(gap_k) for m > k
        let mut suffix = T::zero();
        for k in (0..dtau.len()).rev() {
            suffix += dtau[k];
            out[k] = if k == 0 { suffix } else { raw[k].exp() * suffix };
        }
    }

    /// Linear scores `w_b^T x` per weight block.
    pub fn scores<T: Real>(&self, params: &[T], x: &[T], out: &mut [T]) {
        for (b, o) in out.iter_mut().enumerate().take(self.n_blocks()) {
            *o = dot(self.block(params, b), x);
        }
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// Log-likelihood of class `y` (1-based) and its derivatives with respect
/// to the per-block scores and the natural thresholds.
///
/// `dscore` and `dtau` receive derivatives of the negative log-likelihood;
/// the returned value is the negative log-likelihood itself.
pub fn nll_terms<T: Real>(
    variant: Variant,
    tau: &[T],
    scores: &[T],
    y: usize,
    dscore: &mut [T],
    dtau: &mut [T],
) -> T {
    let n_classes = tau.len() + 1;
    debug_assert!((1..=n_classes).contains(&y));
    dscore.iter_mut().for_each(|v| *v = T::zero());
    dtau.iter_mut().for_each(|v| *v = T::zero());
    let floor = T::prob_floor().ln();
    match variant {
        Variant::Cumulative => {
            let s = scores[0];
            let (log_p, ga, gb) = if y == 1 {
                let a = tau[0] - s;
                (a.log_sigmoid(), (-a).sigmoid(), T::zero())
            } else if y == n_classes {
                let b = tau[y - 2] - s;
                ((-b).log_sigmoid(), T::zero(), -b.sigmoid())
            } else {
                let a = tau[y - 1] - s;
                let b = tau[y - 2] - s;
                let gap = a - b;
                let log_p = a.log_sigmoid() + (-b).log_sigmoid() + (-(-gap).exp_m1()).ln();
                let inv = gap.exp_m1().recip();
                (log_p, (-a).sigmoid() + inv, -b.sigmoid() - inv)
            };
            if y < n_classes {
                dtau[y - 1] = -ga;
            }
            if y > 1 {
                dtau[y - 2] = -gb;
            }
            dscore[0] = ga + gb;
            -log_p.max(floor)
        }
        Variant::StagewiseShared | Variant::StagewiseMulti => {
            let shared = variant == Variant::StagewiseShared;
            let mut log_p = T::zero();
            let last = y.min(n_classes - 1);
            for m in 0..last {
                let s = if shared { scores[0] } else { scores[m] };
                let u = tau[m] - s;
                // d logP / du
                let g = if m + 1 < y {
                    log_p += (-u).log_sigmoid();
                    -u.sigmoid()
                } else {
                    log_p += u.log_sigmoid();
                    (-u).sigmoid()
                };
                dtau[m] = -g;
                let b = if shared { 0 } else { m };
                dscore[b] += g;
            }
            -log_p.max(floor)
        }
    }
}

/// Class log-probabilities for the given scores.
pub fn log_probs<T: Real>(variant: Variant, tau: &[T], scores: &[T]) -> Vec<T> {
    let n_classes = tau.len() + 1;
    match variant {
        Variant::Cumulative => {
            let s = scores[0];
            (1..=n_classes)
                .map(|y| {
                    if y == 1 {
                        (tau[0] - s).log_sigmoid()
                    } else if y == n_classes {
                        (s - tau[y - 2]).log_sigmoid()
                    } else {
                        let a = tau[y - 1] - s;
                        let b = tau[y - 2] - s;
                        if a <= b {
                            return T::neg_infinity();
                        }
                        a.log_sigmoid() + (-b).log_sigmoid() + (-(b - a).exp_m1()).ln()
                    }
                })
                .collect()
        }
        Variant::StagewiseShared | Variant::StagewiseMulti => {
            let shared = variant == Variant::StagewiseShared;
            let mut out = Vec::with_capacity(n_classes);
            let mut survive = T::zero();
            for m in 0..n_classes - 1 {
                let s = if shared { scores[0] } else { scores[m] };
                let u = tau[m] - s;
                out.push(survive + u.log_sigmoid());
                survive += (-u).log_sigmoid();
            }
            out.push(survive);
            out
        }
    }
}

/// Index (1-based) of the most probable class; ties go to the lower class.
pub fn argmax_class<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (l, p) in probs.iter().enumerate() {
        if *p > probs[best] {
            best = l;
        }
    }
    best + 1
}

/// A fitted or hand-specified ordinal classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct OrdinalModel<T> {
    layout: Layout,
    params: Vec<T>,
}

impl<T: Real> OrdinalModel<T> {
    /// Builds a model from weight blocks and natural-scale thresholds.
    pub fn new(variant: Variant, weights: Vec<Vec<T>>, thresholds: Vec<T>) -> Result<Self> {
        let n_classes = thresholds.len() + 1;
        let dim = weights.first().map_or(0, Vec::len);
        let layout = Layout::new(variant, n_classes, dim)?;
        if weights.len() != layout.n_blocks() {
            return Err(Error::DimensionMismatch {
                expected: layout.n_blocks(),
                got: weights.len(),
            });
        }
        if let Some(w) = weights.iter().find(|w| w.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: w.len(),
            });
        }
        let mut params: Vec<T> = weights.into_iter().flatten().collect();
        params.extend(layout.pack_thresholds(&thresholds)?);
        Ok(Self { layout, params })
    }

    pub fn from_params(layout: Layout, params: Vec<T>) -> Result<Self> {
        if params.len() != layout.n_params() {
            return Err(Error::DimensionMismatch {
                expected: layout.n_params(),
                got: params.len(),
            });
        }
        Ok(Self { layout, params })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn variant(&self) -> Variant {
        self.layout.variant
    }

    pub fn n_classes(&self) -> usize {
        self.layout.n_classes
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn weights(&self, block: usize) -> &[T] {
        self.layout.block(&self.params, block)
    }

    pub fn weights_mut(&mut self, block: usize) -> &mut [T] {
        let d = self.layout.dim;
        &mut self.params[block * d..(block + 1) * d]
    }

    /// Every weight block concatenated.
    pub fn all_weights(&self) -> &[T] {
        &self.params[..self.layout.n_weights()]
    }

    pub fn thresholds(&self) -> Vec<T> {
        self.layout.thresholds(&self.params)
    }

    fn scores(&self, x: &[T]) -> Vec<T> {
        let mut s = vec![T::zero(); self.layout.n_blocks()];
        self.layout.scores(&self.params, x, &mut s);
        s
    }

    fn check_x(&self, x: &[T]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn log_probs(&self, x: &[T]) -> Result<Vec<T>> {
        self.check_x(x)?;
        Ok(log_probs(
            self.variant(),
            &self.thresholds(),
            &self.scores(x),
        ))
    }

    /// `P(y = l | x)` for `l = 1..=L`.
    pub fn probs(&self, x: &[T]) -> Result<Vec<T>> {
        Ok(self.log_probs(x)?.into_iter().map(T::exp).collect())
    }

    /// `-log P(y | x)`.
    pub fn nll(&self, x: &[T], y: usize) -> Result<T> {
        Ok(self.nll_gradient(x, y)?.0)
    }

    /// `-log P(y | x)` and its gradient with respect to the packed parameters.
    pub fn nll_gradient(&self, x: &[T], y: usize) -> Result<(T, Vec<T>)> {
        self.check_x(x)?;
        if !(1..=self.n_classes()).contains(&y) {
            return Err(Error::InvalidArgument(format!(
                "label {y} outside 1..={}",
                self.n_classes()
            )));
        }
        let layout = self.layout;
        let tau = self.thresholds();
        let scores = self.scores(x);
        let mut dscore = vec![T::zero(); layout.n_blocks()];
        let mut dtau = vec![T::zero(); layout.n_thresholds()];
        let v = nll_terms(layout.variant, &tau, &scores, y, &mut dscore, &mut dtau);
        let mut grad = vec![T::zero(); layout.n_params()];
        for (b, g) in dscore.iter().enumerate() {
            for (gj, xj) in grad[b * layout.dim..(b + 1) * layout.dim].iter_mut().zip(x) {
                *gj = *g * *xj;
            }
        }
        let nw = layout.n_weights();
        layout.chain_thresholds(&self.params, &dtau, &mut grad[nw..]);
        Ok((v, grad))
    }

    pub fn predict_class(&self, x: &[T]) -> Result<usize> {
        Ok(argmax_class(&self.probs(x)?))
    }

    pub fn cast<U: Real>(&self) -> OrdinalModel<U> {
        OrdinalModel {
            layout: self.layout,
            params: self.params.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

const MODEL_FORMAT: &str = "ordstab-model";

/// On-disk form of a model: natural-scale thresholds and weights keyed by
/// feature id, one map per weight block. Zero weights are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub n_classes: usize,
    pub link: String,
    pub thresholds: Vec<f64>,
    pub feature_ids: Vec<String>,
    pub weights: Vec<BTreeMap<String, f64>>,
    /// Hash of the training configuration that produced the model.
    pub config_fingerprint: String,
}

impl ModelFile {
    pub fn from_model<T: Real>(
        model: &OrdinalModel<T>,
        feature_ids: &[String],
        config_fingerprint: impl Into<String>,
    ) -> Result<Self> {
        if feature_ids.len() != model.dim() {
            return Err(Error::DimensionMismatch {
                expected: model.dim(),
                got: feature_ids.len(),
            });
        }
        let weights = (0..model.layout().n_blocks())
            .map(|b| {
                feature_ids
                    .iter()
                    .zip(model.weights(b))
                    .filter(|(_, w)| !w.is_zero())
                    .map(|(id, w)| (id.clone(), w.to_f64_lossy()))
                    .collect()
            })
            .collect();
        Ok(Self {
            format: MODEL_FORMAT.into(),
            version: 1,
            variant: model.variant(),
            n_classes: model.n_classes(),
            link: "logistic".into(),
            thresholds: model.thresholds().iter().map(|t| t.to_f64_lossy()).collect(),
            feature_ids: feature_ids.to_vec(),
            weights,
            config_fingerprint: config_fingerprint.into(),
        })
    }

    /// Rebuilds the model over `self.feature_ids`.
    pub fn to_model<T: Real>(&self) -> Result<OrdinalModel<T>> {
        if self.format != MODEL_FORMAT || self.version != 1 {
            return Err(Error::InvalidArgument("not a version 1 model file".into()));
        }
        if self.link != "logistic" {
            return Err(Error::InvalidArgument(format!("unsupported link {:?}", self.link)));
        }
        if self.thresholds.len() + 1 != self.n_classes {
            return Err(Error::DimensionMismatch {
                expected: self.n_classes - 1,
                got: self.thresholds.len(),
            });
        }
        let index: BTreeMap<&str, usize> = self
            .feature_ids
            .iter()
            .enumerate()
            .map(|(j, id)| (id.as_str(), j))
            .collect();
        let weights = self
            .weights
            .iter()
            .map(|block| {
                let mut w = vec![T::zero(); self.feature_ids.len()];
                for (id, v) in block {
                    let j = *index
                        .get(id.as_str())
                        .ok_or_else(|| Error::InvalidArgument(format!("weight for unknown feature {id:?}")))?;
                    w[j] = T::lit(*v);
                }
                Ok(w)
            })
            .collect::<Result<Vec<_>>>()?;
        let tau = self.thresholds.iter().map(|&t| T::lit(t)).collect();
        OrdinalModel::new(self.variant, weights, tau)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}
