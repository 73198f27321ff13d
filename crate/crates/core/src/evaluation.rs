//! Patient-grouped K-fold cross-validation and ordinal classification
//! metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{OrdinalModel, Variant};
use crate::network::RegularizerMatrix;
use crate::real::Real;
use crate::trainer::{fit, select_features, Dataset, TrainingConfig};

/// Assignment of patients to folds (0-based fold indices).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

/// Shuffles the sorted distinct patient ids with `seed` and deals them
/// round-robin, so fold sizes differ by at most one patient and input order
/// does not matter.
pub fn make_folds<'a>(
    patient_ids: impl IntoIterator<Item = &'a str>,
    k: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::InvalidArgument("need at least 2 folds".into()));
    }
    let unique: BTreeSet<&str> = patient_ids.into_iter().collect();
    if unique.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} patients cannot fill {k} folds",
            unique.len()
        )));
    }
    let mut ids: Vec<&str> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = ids
        .into_iter()
        .enumerate()
        .map(|(i, p)| (p.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed, assignment })
}

impl FoldPlan {
    pub fn fold_of(&self, patient: &str) -> Option<usize> {
        self.assignment.get(patient).copied()
    }

    /// Training and held-out row indices of `fold`.
    pub fn split(&self, patient_ids: &[String], fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, p) in patient_ids.iter().enumerate() {
            match self.fold_of(p) {
                Some(f) if f == fold => test.push(i),
                Some(_) => train.push(i),
                None => return Err(Error::Data(format!("patient {p} is not in the fold plan"))),
            }
        }
        Ok((train, test))
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.k];
        for f in self.assignment.values() {
            s[*f] += 1;
        }
        s
    }
}

/// Confusion matrix (rows: truth, columns: prediction) and derived metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_classes: usize,
    pub confusion: Vec<Vec<u64>>,
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub f1: Vec<f64>,
    pub macro_mae: f64,
}

impl Metrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let l = confusion.len();
        let mut recall = vec![0.0; l];
        let mut precision = vec![0.0; l];
        let mut f1 = vec![0.0; l];
        let mut mae_sum = 0.0;
        let mut nonempty = 0usize;
        for c in 0..l {
            let tp = confusion[c][c] as f64;
            let truth: u64 = confusion[c].iter().sum();
            let pred: u64 = confusion.iter().map(|r| r[c]).sum();
            recall[c] = if truth > 0 { tp / truth as f64 } else { 0.0 };
            precision[c] = if pred > 0 { tp / pred as f64 } else { 0.0 };
            let s = recall[c] + precision[c];
            f1[c] = if s > 0.0 {
                2.0 * recall[c] * precision[c] / s
            } else {
                0.0
            };
            if truth > 0 {
                let err: f64 = confusion[c]
                    .iter()
                    .enumerate()
                    .map(|(p, &n)| n as f64 * (p as f64 - c as f64).abs())
                    .sum();
                mae_sum += err / truth as f64;
                nonempty += 1;
            }
        }
        Self {
            n_classes: l,
            confusion,
            recall,
            precision,
            f1,
            macro_mae: if nonempty > 0 {
                mae_sum / nonempty as f64
            } else {
                0.0
            },
        }
    }

    pub fn n(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn class_count(&self, class: usize) -> u64 {
        self.confusion[class - 1].iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return 0.0;
        }
        (0..self.n_classes).map(|c| self.confusion[c][c]).sum::<u64>() as f64 / n as f64
    }

    /// Mean F1 over classes `from..=L` (1-based).
    pub fn mean_f1_from(&self, from: usize) -> f64 {
        let s = &self.f1[from - 1..];
        s.iter().sum::<f64>() / s.len() as f64
    }

    /// Elementwise sum of confusion matrices.
    pub fn sum<'a>(parts: impl IntoIterator<Item = &'a Metrics>) -> Result<Self> {
        let mut acc: Option<Vec<Vec<u64>>> = None;
        for m in parts {
            match &mut acc {
                None => acc = Some(m.confusion.clone()),
                Some(a) => {
                    if a.len() != m.n_classes {
                        return Err(Error::DimensionMismatch {
                            expected: a.len(),
                            got: m.n_classes,
                        });
                    }
                    for (ra, rm) in a.iter_mut().zip(&m.confusion) {
                        for (x, y) in ra.iter_mut().zip(rm) {
                            *x += y;
                        }
                    }
                }
            }
        }
        acc.map(Self::from_confusion)
            .ok_or_else(|| Error::InvalidArgument("no metrics to sum".into()))
    }
}

/// Metrics for 1-based truth and predicted labels.
pub fn confusion_and_metrics(truth: &[usize], predicted: &[usize], n_classes: usize) -> Result<Metrics> {
    if truth.len() != predicted.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: predicted.len(),
        });
    }
    let mut c = vec![vec![0u64; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        for v in [t, p] {
            if !(1..=n_classes).contains(&v) {
                return Err(Error::InvalidArgument(format!("label {v} outside 1..={n_classes}")));
            }
        }
        c[t - 1][p - 1] += 1;
    }
    Ok(Metrics::from_confusion(c))
}

/// Writes `scope,class,recall,precision,f1,macro_mae,n`: one row per class
/// and an `all` row with macro averages, for every scope.
pub fn write_metrics_csv<'a>(
    scopes: impl IntoIterator<Item = (String, &'a Metrics)>,
    out: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["scope", "class", "recall", "precision", "f1", "macro_mae", "n"])?;
    for (scope, m) in scopes {
        let mae = m.macro_mae.to_string();
        for c in 0..m.n_classes {
            w.write_record([
                scope.clone(),
                (c + 1).to_string(),
                m.recall[c].to_string(),
                m.precision[c].to_string(),
                m.f1[c].to_string(),
                mae.clone(),
                m.class_count(c + 1).to_string(),
            ])?;
        }
        let l = m.n_classes as f64;
        w.write_record([
            scope,
            "all".into(),
            (m.recall.iter().sum::<f64>() / l).to_string(),
            (m.precision.iter().sum::<f64>() / l).to_string(),
            (m.f1.iter().sum::<f64>() / l).to_string(),
            mae,
            m.n().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

/// Training and held-out data for one fold, after any fold-local
/// preprocessing.
pub struct FoldData<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
    pub reg: Option<RegularizerMatrix<T>>,
}

/// Rows, patients and labels that cross-validation splits, and the
/// preprocessing applied per fold.
pub trait FoldSource<T>: Sync {
    fn patient_ids(&self) -> &[String];
    fn labels(&self) -> &[usize];
    fn n_classes(&self) -> usize;
    fn prepare(&self, train: &[usize], test: &[usize]) -> Result<FoldData<T>>;
}

/// A dataset used as is, with a fixed regularizer.
pub struct FixedSource<'a, T> {
    pub data: &'a Dataset<T>,
    pub reg: Option<&'a RegularizerMatrix<T>>,
}

impl<T: Real> FoldSource<T> for FixedSource<'_, T> {
    fn patient_ids(&self) -> &[String] {
        &self.data.patient_ids
    }

    fn labels(&self) -> &[usize] {
        self.data.labels()
    }

    fn n_classes(&self) -> usize {
        self.data.n_classes()
    }

    fn prepare(&self, train: &[usize], test: &[usize]) -> Result<FoldData<T>> {
        Ok(FoldData {
            train: self.data.subset(train),
            test: self.data.subset(test),
            reg: self.reg.cloned(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct FoldOutcome<T> {
    pub fold: usize,
    pub test_rows: Vec<usize>,
    pub predictions: Vec<usize>,
    pub metrics: Metrics,
    /// Thresholded model of this fold.
    pub model: OrdinalModel<T>,
    pub feature_ids: Vec<String>,
    pub degraded: bool,
}

#[derive(Debug, Clone)]
pub struct CvResult<T> {
    pub pooled: Metrics,
    pub folds: Vec<FoldOutcome<T>>,
}

impl<T> CvResult<T> {
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let scopes = self
            .folds
            .iter()
            .map(|f| (format!("fold{}", f.fold + 1), &f.metrics))
            .chain(std::iter::once(("pooled".to_string(), &self.pooled)));
        write_metrics_csv(scopes, out)
    }
}

/// Fits on K-1 folds and predicts the held-out fold, for every fold.
/// Folds run in parallel; results are pooled in fold order.
pub fn cross_validate<T: Real, S: FoldSource<T>>(
    source: &S,
    plan: &FoldPlan,
    config: &TrainingConfig,
    variant: Variant,
) -> Result<CvResult<T>> {
    let l = source.n_classes();
    let labels = source.labels();
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..plan.k)
        .map(|f| plan.split(source.patient_ids(), f))
        .collect::<Result<_>>()?;
    for (f, (train, _)) in splits.iter().enumerate() {
        let mut seen = vec![false; l];
        for &i in train {
            seen[labels[i] - 1] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(Error::FoldMissingClass { fold: f + 1, class: c + 1 });
        }
    }
    let folds: Vec<Result<FoldOutcome<T>>> = splits
        .into_par_iter()
        .enumerate()
        .map(|(f, (train, test))| {
            let data = source.prepare(&train, &test)?;
            let res = fit(&data.train, config, variant, data.reg.as_ref(), None).map_err(|e| match e {
                Error::MissingClass { class } => Error::FoldMissingClass { fold: f + 1, class },
                e => e,
            })?;
            let (model, _) = select_features(&res.model, T::lit(config.selection_threshold));
            let predictions = (0..data.test.n())
                .map(|i| model.predict_class(data.test.row(i)))
                .collect::<Result<Vec<_>>>()?;
            let metrics = confusion_and_metrics(data.test.labels(), &predictions, l)?;
            Ok(FoldOutcome {
                fold: f,
                test_rows: test,
                predictions,
                metrics,
                model,
                feature_ids: data.train.feature_ids.clone(),
                degraded: res.degraded(),
            })
        })
        .collect();
    let folds: Vec<FoldOutcome<T>> = folds.into_iter().collect::<Result<_>>()?;
    let pooled = Metrics::sum(folds.iter().map(|f| &f.metrics))?;
    Ok(CvResult { pooled, folds })
}
