//! Resampled refits and the stability indices computed from them:
//! selection frequency, weight signal-to-noise ratio, importance, and the
//! running means ASP@T / SNR@T along a feature ranking.

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::network::RegularizerMatrix;
use crate::real::Real;
use crate::trainer::{fit, select_features, Dataset, TrainingConfig};

/// SNR reported for a feature whose weight never varies but is nonzero.
pub const SNR_CAP: f64 = 1e6;

/// Redraws allowed when a sample lacks a class.
pub const MAX_REDRAWS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    /// `n` rows with replacement.
    BootstrapFull,
    /// `floor(n/2)` rows without replacement.
    SubsampleHalf,
}

impl FromStr for ResampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bootstrap" | "bootstrap_full" | "bootstrap-full" => Ok(Self::BootstrapFull),
            "subsample" | "subsample_half" | "subsample-half" => Ok(Self::SubsampleHalf),
            _ => Err(Error::InvalidArgument(format!("unknown resample mode {s}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub mode: ResampleMode,
    pub b: usize,
    pub seed: u64,
}

impl ResamplePlan {
    pub fn new(mode: ResampleMode, b: usize, seed: u64) -> Self {
        Self { mode, b, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b < 2 {
            return Err(Error::InvalidArgument("need at least 2 resamples".into()));
        }
        Ok(())
    }

    /// Row indices of sample `b` on its `attempt`-th draw. Each pair gets
    /// its own ChaCha stream, so samples do not depend on each other.
    pub fn draw(&self, n: usize, b: usize, attempt: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((b as u64) << 8) | attempt as u64);
        match self.mode {
            ResampleMode::BootstrapFull => (0..n).map(|_| rng.random_range(0..n)).collect(),
            ResampleMode::SubsampleHalf => {
                let mut rows = index::sample(&mut rng, n, n / 2).into_vec();
                rows.sort_unstable();
                rows
            }
        }
    }
}

/// Post-selection weight vectors of many fits of the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshots<T> {
    pub n_blocks: usize,
    pub dim: usize,
    /// One entry per fit, blocks concatenated.
    pub samples: Vec<Vec<T>>,
    /// Fits that stopped on a failed line search.
    pub degraded: usize,
}

impl<T: Real> Snapshots<T> {
    pub fn new(n_blocks: usize, dim: usize) -> Self {
        Self {
            n_blocks,
            dim,
            samples: Vec::new(),
            degraded: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, weights: Vec<T>) -> Result<()> {
        if weights.len() != self.n_blocks * self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.n_blocks * self.dim,
                got: weights.len(),
            });
        }
        self.samples.push(weights);
        Ok(())
    }

    /// Concatenates snapshot sets, e.g. from several folds.
    pub fn pool(parts: impl IntoIterator<Item = Self>) -> Result<Self> {
        let mut it = parts.into_iter();
        let mut out = it
            .next()
            .ok_or_else(|| Error::InvalidArgument("nothing to pool".into()))?;
        for p in it {
            if p.n_blocks != out.n_blocks || p.dim != out.dim {
                return Err(Error::DimensionMismatch {
                    expected: out.n_blocks * out.dim,
                    got: p.n_blocks * p.dim,
                });
            }
            out.samples.extend(p.samples);
            out.degraded += p.degraded;
        }
        Ok(out)
    }

    /// Weights of block `b` in every sample.
    pub fn block(&self, b: usize) -> Vec<&[T]> {
        self.samples
            .iter()
            .map(|s| &s[b * self.dim..(b + 1) * self.dim])
            .collect()
    }
}

/// Fits `plan.b` models on resampled rows and keeps their thresholded
/// weights, zeros included. Samples run in parallel; each has its own seed
/// stream so the result does not depend on scheduling.
pub fn resample_and_fit<T: Real>(
    data: &Dataset<T>,
    plan: &ResamplePlan,
    config: &TrainingConfig,
    variant: Variant,
    reg: Option<&RegularizerMatrix<T>>,
) -> Result<Snapshots<T>> {
    plan.validate()?;
    if data.n() < 4 {
        return Err(Error::InvalidArgument("resampling needs at least 4 rows".into()));
    }
    let l = data.n_classes();
    let fits: Vec<Result<(Vec<T>, bool)>> = (0..plan.b)
        .into_par_iter()
        .map(|b| {
            for attempt in 0..=MAX_REDRAWS {
                let rows = plan.draw(data.n(), b, attempt);
                let sample = data.subset(&rows);
                if sample.class_counts().contains(&0) {
                    continue;
                }
                let res = fit(&sample, config, variant, reg, None)?;
                let (model, _) = select_features(&res.model, T::lit(config.selection_threshold));
                return Ok((model.all_weights().to_vec(), res.degraded()));
            }
            Err(Error::Data(format!(
                "resample {b} lacks a class after {MAX_REDRAWS} redraws"
            )))
        })
        .collect();
    let n_blocks = if variant.shares_weights() { 1 } else { l - 1 };
    let mut out = Snapshots::new(n_blocks, data.dim());
    for f in fits {
        let (w, degraded) = f?;
        out.push(w)?;
        out.degraded += degraded as usize;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureStats<T> {
    pub selection_freq: T,
    pub mean: T,
    /// Population standard deviation over all samples.
    pub std: T,
    pub snr: T,
    pub snr_capped: bool,
}

/// Per-feature statistics over one weight block of the snapshots.
pub fn feature_stats<T: Real>(block: &[&[T]]) -> Vec<FeatureStats<T>> {
    let b = block.len();
    let dim = block.first().map_or(0, |s| s.len());
    let nb = T::lit(b.max(1) as f64);
    (0..dim)
        .map(|j| {
            let selected = block.iter().filter(|s| s[j] != T::zero()).count();
            let mean = block.iter().map(|s| s[j]).sum::<T>() / nb;
            let var = block.iter().map(|s| (s[j] - mean).powi(2)).sum::<T>() / nb;
            let std = var.sqrt();
            let (snr, snr_capped) = snr_value(mean, std);
            FeatureStats {
                selection_freq: T::lit(selected as f64) / nb,
                mean,
                std,
                snr,
                snr_capped,
            }
        })
        .collect()
}

/// `|mean| / std`, with 0/0 giving 0 and x/0 giving [`SNR_CAP`].
pub fn snr_value<T: Real>(mean: T, std: T) -> (T, bool) {
    if std > T::zero() {
        let v = mean.abs() / std;
        if v > T::lit(SNR_CAP) {
            (T::lit(SNR_CAP), true)
        } else {
            (v, false)
        }
    } else if mean != T::zero() {
        (T::lit(SNR_CAP), true)
    } else {
        (T::zero(), false)
    }
}

/// `|mean weight| * std(x_j)` with the population std of each column.
pub fn importance<T: Real>(mean: &[T], data: &Dataset<T>) -> Result<Vec<T>> {
    if mean.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            expected: data.dim(),
            got: mean.len(),
        });
    }
    let n = T::lit(data.n().max(1) as f64);
    Ok(mean
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let col = data.column(j);
            let mu = col.iter().copied().sum::<T>() / n;
            let var = col.iter().map(|v| (*v - mu).powi(2)).sum::<T>() / n;
            w.abs() * var.sqrt()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankCriterion {
    Snr,
    SelectionProbability,
    Importance,
}

impl FromStr for RankCriterion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "snr" => Ok(Self::Snr),
            "selection" | "selection_probability" | "selection-probability" => {
                Ok(Self::SelectionProbability)
            }
            "importance" => Ok(Self::Importance),
            _ => Err(Error::InvalidArgument(format!("unknown ranking criterion {s}"))),
        }
    }
}

/// Indices sorted by descending criterion, then descending `|mean|`, then
/// ascending feature id.
pub fn rank_features<T: Real>(
    stats: &[FeatureStats<T>],
    importance: &[T],
    ids: &[String],
    criterion: RankCriterion,
) -> Vec<usize> {
    let key = |j: usize| match criterion {
        RankCriterion::Snr => stats[j].snr,
        RankCriterion::SelectionProbability => stats[j].selection_freq,
        RankCriterion::Importance => importance[j],
    };
    let desc = |a: T, b: T| b.partial_cmp(&a).unwrap_or(Ordering::Equal);
    let mut order: Vec<usize> = (0..stats.len()).collect();
    order.sort_by(|&a, &b| {
        desc(key(a), key(b))
            .then_with(|| desc(stats[a].mean.abs(), stats[b].mean.abs()))
            .then_with(|| ids[a].cmp(&ids[b]))
    });
    order
}

fn check_t(t: usize, d: usize) -> Result<()> {
    if t == 0 || t > d {
        return Err(Error::InvalidArgument(format!("T = {t} outside 1..={d}")));
    }
    Ok(())
}

/// Mean selection frequency of the top `t` ranked features.
pub fn asp_at<T: Real>(stats: &[FeatureStats<T>], ranking: &[usize], t: usize) -> Result<T> {
    check_t(t, ranking.len())?;
    Ok(ranking[..t].iter().map(|&j| stats[j].selection_freq).sum::<T>() / T::lit(t as f64))
}

/// Mean SNR of the top `t` ranked features.
pub fn snr_at<T: Real>(stats: &[FeatureStats<T>], ranking: &[usize], t: usize) -> Result<T> {
    check_t(t, ranking.len())?;
    Ok(ranking[..t].iter().map(|&j| stats[j].snr).sum::<T>() / T::lit(t as f64))
}

/// Both curves for `T = 1..=len(ranking)`.
pub fn curves<T: Real>(stats: &[FeatureStats<T>], ranking: &[usize]) -> (Vec<T>, Vec<T>) {
    let mut asp = Vec::with_capacity(ranking.len());
    let mut snr = Vec::with_capacity(ranking.len());
    let (mut sa, mut ss) = (T::zero(), T::zero());
    for (t, &j) in ranking.iter().enumerate() {
        sa += stats[j].selection_freq;
        ss += stats[j].snr;
        let k = T::lit((t + 1) as f64);
        asp.push(sa / k);
        snr.push(ss / k);
    }
    (asp, snr)
}

/// Indices and curves for one weight block.
#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport<T> {
    pub block: usize,
    pub criterion: RankCriterion,
    pub feature_ids: Vec<String>,
    pub stats: Vec<FeatureStats<T>>,
    pub importance: Vec<T>,
    pub ranking: Vec<usize>,
    pub asp: Vec<T>,
    pub snr: Vec<T>,
}

impl<T: Real> StabilityReport<T> {
    /// One report per weight block; importance uses `data` columns.
    pub fn build(
        snapshots: &Snapshots<T>,
        data: &Dataset<T>,
        criterion: RankCriterion,
    ) -> Result<Vec<Self>> {
        if snapshots.is_empty() {
            return Err(Error::InvalidArgument("no snapshots".into()));
        }
        (0..snapshots.n_blocks)
            .map(|b| {
                let stats = feature_stats(&snapshots.block(b));
                let mean: Vec<T> = stats.iter().map(|s| s.mean).collect();
                let imp = importance(&mean, data)?;
                let ranking = rank_features(&stats, &imp, &data.feature_ids, criterion);
                let (asp, snr) = curves(&stats, &ranking);
                Ok(Self {
                    block: b,
                    criterion,
                    feature_ids: data.feature_ids.clone(),
                    stats,
                    importance: imp,
                    ranking,
                    asp,
                    snr,
                })
            })
            .collect()
    }

    pub fn asp_at(&self, t: usize) -> Result<T> {
        asp_at(&self.stats, &self.ranking, t)
    }

    pub fn snr_at(&self, t: usize) -> Result<T> {
        snr_at(&self.stats, &self.ranking, t)
    }

    /// Rows in ranking order; capped SNRs are written as `capped`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "feature_id",
            "selection_freq",
            "weight_mean",
            "weight_std",
            "snr",
            "importance",
            "rank",
        ])?;
        for (r, &j) in self.ranking.iter().enumerate() {
            let s = &self.stats[j];
            let snr = if s.snr_capped {
                "capped".to_string()
            } else {
                fmt(s.snr)
            };
            w.write_record([
                self.feature_ids[j].clone(),
                fmt(s.selection_freq),
                fmt(s.mean),
                fmt(s.std),
                snr,
                fmt(self.importance[j]),
                (r + 1).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<stability report>", e))?;
        Ok(())
    }

    pub fn write_curves(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["T", "asp", "snr"])?;
        for (t, (a, s)) in self.asp.iter().zip(&self.snr).enumerate() {
            w.write_record([(t + 1).to_string(), fmt(*a), fmt(*s)])?;
        }
        w.flush().map_err(|e| Error::io("<stability curves>", e))?;
        Ok(())
    }

    pub fn save(&self, report: &Path, curves: &Path) -> Result<()> {
        let f = std::fs::File::create(report).map_err(|e| Error::io(report, e))?;
        self.write_csv(std::io::BufWriter::new(f))?;
        let f = std::fs::File::create(curves).map_err(|e| Error::io(curves, e))?;
        self.write_curves(std::io::BufWriter::new(f))
    }
}

fn fmt<T: Real>(v: T) -> String {
    format!("{}", v.to_f64_lossy())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(d: usize) -> Vec<String> {
        (0..d).map(|j| format!("f{j}")).collect()
    }

    #[test]
    fn asp_hand_example() {
        let b = 30;
        let counts = [30, 15, 0];
        let samples: Vec<Vec<f64>> = (0..b)
            .map(|i| counts.iter().map(|&c| if i < c { 1.0 } else { 0.0 }).collect())
            .collect();
        let views: Vec<&[f64]> = samples.iter().map(Vec::as_slice).collect();
        let stats = feature_stats(&views);
        let pi = [0, 1, 2];
        assert_eq!(asp_at(&stats, &pi, 1).unwrap(), 1.0);
        assert!((asp_at(&stats, &pi, 3).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(asp_at(&stats, &[2, 0, 1], 1).unwrap(), 0.0);
        assert!(asp_at(&stats, &pi, 0).is_err());
        assert!(asp_at(&stats, &pi, 4).is_err());
    }

    #[test]
    fn snr_examples() {
        let s = [[1.0], [1.1], [0.9]];
        let views: Vec<&[f64]> = s.iter().map(|r| r.as_slice()).collect();
        let st = feature_stats(&views)[0];
        let pop_std = (0.02f64 / 3.0).sqrt();
        assert!((st.std - pop_std).abs() < 1e-12);
        assert!((st.snr - 1.0 / pop_std).abs() < 1e-9);
        assert!((st.snr - 12.247).abs() < 1e-3);

        let s = [[1.0], [-1.0], [1.0], [-1.0]];
        let views: Vec<&[f64]> = s.iter().map(|r| r.as_slice()).collect();
        assert_eq!(feature_stats(&views)[0].snr, 0.0);

        let s = [[0.4], [0.4]];
        let views: Vec<&[f64]> = s.iter().map(|r| r.as_slice()).collect();
        let st = feature_stats(&views)[0];
        assert_eq!(st.snr, SNR_CAP);
        assert!(st.snr_capped);

        assert_eq!(snr_value(0.0f64, 0.0), (0.0, false));
    }

    #[test]
    fn ranking_and_ties() {
        let mk = |snr: f64, mean: f64| FeatureStats {
            selection_freq: 0.0,
            mean,
            std: 1.0,
            snr,
            snr_capped: false,
        };
        let stats = vec![mk(3.0, 0.0), mk(1.0, 0.0), mk(2.0, 0.0)];
        assert_eq!(rank_features(&stats, &[0.0; 3], &ids(3), RankCriterion::Snr), vec![0, 2, 1]);
        let flat = vec![mk(1.0, 0.0); 3];
        let names = vec!["c".to_string(), "a".to_string(), "b".to_string()];
        assert_eq!(rank_features(&flat, &[0.0; 3], &names, RankCriterion::Snr), vec![1, 2, 0]);
        let by_mean = vec![mk(1.0, 0.1), mk(1.0, -0.5), mk(1.0, 0.2)];
        assert_eq!(rank_features(&by_mean, &[0.0; 3], &ids(3), RankCriterion::Snr), vec![1, 2, 0]);
    }

    #[test]
    fn importance_examples() {
        let d = Dataset::from_rows(
            vec![vec![1.0f64, 0.0, 2.0], vec![1.0, 2.0, 4.0]],
            vec![1, 2],
            2,
        )
        .unwrap();
        let imp = importance(&[5.0, 0.0, -2.0], &d).unwrap();
        assert_eq!(imp[0], 0.0);
        assert_eq!(imp[1], 0.0);
        assert!((imp[2] - 2.0).abs() < 1e-15);
        // scaling a column by c and its weight by 1/c leaves importance alone
        let scaled = Dataset::from_rows(vec![vec![6.0], vec![12.0]], vec![1, 2], 2).unwrap();
        let a = importance(&[-2.0 / 3.0], &scaled).unwrap()[0];
        assert!((a - imp[2]).abs() < 1e-12);
    }

    #[test]
    fn draws_have_documented_sizes() {
        let p = ResamplePlan::new(ResampleMode::SubsampleHalf, 2, 7);
        let rows = p.draw(10, 0, 0);
        assert_eq!(rows.len(), 5);
        let mut u = rows.clone();
        u.dedup();
        assert_eq!(u.len(), 5);
        let p = ResamplePlan::new(ResampleMode::BootstrapFull, 2, 7);
        assert_eq!(p.draw(10, 1, 0).len(), 10);
        assert_eq!(p.draw(10, 1, 0), p.draw(10, 1, 0));
        assert_ne!(p.draw(1000, 1, 0), p.draw(1000, 2, 0));
        assert!(ResamplePlan::new(ResampleMode::BootstrapFull, 1, 0).validate().is_err());
    }

    #[test]
    fn identical_snapshots_give_full_frequency_and_cap() {
        let w = vec![0.5, 0.0, -0.2];
        let mut snaps = Snapshots::new(1, 3);
        for _ in 0..5 {
            snaps.push(w.clone()).unwrap();
        }
        let stats = feature_stats(&snaps.block(0));
        assert_eq!(stats[0].selection_freq, 1.0);
        assert_eq!(stats[2].selection_freq, 1.0);
        assert_eq!(stats[0].snr, SNR_CAP);
        assert_eq!(stats[1].snr, 0.0);
    }
}
