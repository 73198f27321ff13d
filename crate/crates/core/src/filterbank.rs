//! One-sided multiscale filter bank over event matrices, the assessment
//! summary statistics, and train-fitted `[0,1]` normalization.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Channel, EventMatrix, EventType, DAYS_PER_MONTH, DEFAULT_HISTORY_DAYS};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Uniform,
    TruncatedGaussian,
}

impl Kernel {
    pub fn as_str(self) -> &'static str {
        match self {
            Kernel::Uniform => "uniform",
            Kernel::TruncatedGaussian => "truncated_gaussian",
        }
    }

    fn abbr(self) -> &'static str {
        match self {
            Kernel::Uniform => "u",
            Kernel::TruncatedGaussian => "g",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub kernel: Kernel,
    pub sigma_months: f64,
    pub delay_months: f64,
}

impl FilterSpec {
    pub const fn uniform(sigma_months: f64, delay_months: f64) -> Self {
        Self {
            kernel: Kernel::Uniform,
            sigma_months,
            delay_months,
        }
    }

    pub const fn gaussian(sigma_months: f64, delay_months: f64) -> Self {
        Self {
            kernel: Kernel::TruncatedGaussian,
            sigma_months,
            delay_months,
        }
    }

    pub fn validate(&self, history_days: u32) -> Result<()> {
        let h_months = history_days as f64 / DAYS_PER_MONTH;
        if !(self.sigma_months > 0.0 && self.sigma_months.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "filter sigma must be > 0, got {}",
                self.sigma_months
            )));
        }
        if !(self.delay_months >= 0.0 && self.delay_months <= h_months) {
            return Err(Error::InvalidArgument(format!(
                "filter delay must lie in [0, {h_months}] months, got {}",
                self.delay_months
            )));
        }
        Ok(())
    }

    /// Weight applied to an event `days_before` the anchor.
    ///
    /// Uniform windows are half-open, `[delay, delay + sigma)`, so adjacent
    /// segments tile the history without sharing a boundary day.
    pub fn day_weight(&self, days_before: u32) -> f64 {
        let h = days_before as f64 / DAYS_PER_MONTH - self.delay_months;
        match self.kernel {
            Kernel::Uniform => {
                let lo = (self.delay_months * DAYS_PER_MONTH).round() as i64;
                let hi = ((self.delay_months + self.sigma_months) * DAYS_PER_MONTH).round() as i64;
                let d = days_before as i64;
                if d >= lo && d < hi {
                    1.0 / self.sigma_months
                } else {
                    0.0
                }
            }
            Kernel::TruncatedGaussian => kernel_eval(self, h),
        }
    }

    /// Period tag used to tell extraction periods apart ("u3+0").
    pub fn period(&self) -> String {
        format!("{}{}+{}", self.kernel.abbr(), self.sigma_months, self.delay_months)
    }
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.period())
    }
}

/// Kernel value at `h` months after the (delayed) origin; zero for `h < 0`.
pub fn kernel_eval<T: Real>(spec: &FilterSpec, h: T) -> T {
    if h < T::zero() {
        return T::zero();
    }
    let sigma = T::lit(spec.sigma_months);
    match spec.kernel {
        Kernel::Uniform => {
            if h <= sigma {
                sigma.recip()
            } else {
                T::zero()
            }
        }
        Kernel::TruncatedGaussian => {
            let two = T::lit(2.0);
            (two / (T::PI() * sigma * sigma)).sqrt() * (-(h * h) / (two * sigma * sigma)).exp()
        }
    }
}

/// One-sided response of one event type: `sum_h K(h - s) v(t - h)`.
pub fn convolve(matrix: &EventMatrix, event_type: &EventType, spec: &FilterSpec) -> f64 {
    let Some(series) = matrix.series(event_type) else {
        return 0.0;
    };
    series
        .iter()
        .map(|(&h, &v)| spec.day_weight(h) * v)
        .sum()
}

/// The five-segment uniform bank: 0-3, 3-6, 6-12, 12-24 and 24-48 months.
pub fn default_filters() -> Vec<FilterSpec> {
    vec![
        FilterSpec::uniform(3.0, 0.0),
        FilterSpec::uniform(3.0, 3.0),
        FilterSpec::uniform(6.0, 6.0),
        FilterSpec::uniform(12.0, 12.0),
        FilterSpec::uniform(24.0, 24.0),
    ]
}

/// Ratings of one assessment. Missing items are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assessment<T> {
    pub overall: Option<T>,
    pub items: Vec<Option<T>>,
}

/// Summary statistics of an assessment history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssessmentStats<T> {
    pub max_overall: T,
    pub sum_item_max: T,
    pub sum_item_mean: T,
    pub mean_total: T,
    pub max_total: T,
}

impl<T: Real> AssessmentStats<T> {
    pub const NAMES: [&'static str; 5] = [
        "max_overall",
        "sum_item_max",
        "sum_item_mean",
        "mean_total",
        "max_total",
    ];

    pub fn to_array(self) -> [T; 5] {
        [
            self.max_overall,
            self.sum_item_max,
            self.sum_item_mean,
            self.mean_total,
            self.max_total,
        ]
    }
}

/// Max/mean/sum statistics over a time-ordered series of assessments.
///
/// Missing item ratings are skipped in means and count as zero in sums.
/// When `overall` is absent it is taken as the largest item rating of that
/// assessment.
pub fn derived_statistics<T: Real>(series: &[Assessment<T>]) -> Result<AssessmentStats<T>> {
    if series.is_empty() {
        return Err(Error::NoAssessment);
    }
    let n_items = series.iter().map(|a| a.items.len()).max().unwrap_or(0);
    let mut max_overall: Option<T> = None;
    let mut max_total = T::neg_infinity();
    let mut sum_total = T::zero();
    for a in series {
        let overall = a.overall.or_else(|| {
            a.items
                .iter()
                .flatten()
                .copied()
                .fold(None, |m: Option<T>, v| Some(m.map_or(v, |m| m.max(v))))
        });
        if let Some(o) = overall {
            max_overall = Some(max_overall.map_or(o, |m| m.max(o)));
        }
        let total: T = a.items.iter().flatten().copied().sum();
        max_total = max_total.max(total);
        sum_total += total;
    }
    let mut sum_item_max = T::zero();
    let mut sum_item_mean = T::zero();
    for j in 0..n_items {
        let vals: Vec<T> = series
            .iter()
            .filter_map(|a| a.items.get(j).copied().flatten())
            .collect();
        if vals.is_empty() {
            continue;
        }
        sum_item_max += vals.iter().copied().fold(T::neg_infinity(), T::max);
        sum_item_mean += vals.iter().copied().sum::<T>() / T::lit(vals.len() as f64);
    }
    Ok(AssessmentStats {
        max_overall: max_overall.unwrap_or_else(T::zero),
        sum_item_max,
        sum_item_mean,
        mean_total: sum_total / T::lit(series.len() as f64),
        max_total,
    })
}

/// Everything that defines the filter bank output layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterBankConfig {
    pub filters: Vec<FilterSpec>,
    /// Channels that receive filters; empty means every channel.
    pub channels: Vec<Channel>,
    pub history_days: u32,
    /// Emit the five assessment statistics.
    pub assessment_statistics: bool,
    /// Assessment item code carrying the overall rating.
    pub overall_item: String,
    /// Pairs of feature ids multiplied after normalization.
    pub interactions: Vec<(String, String)>,
}

impl Default for FilterBankConfig {
    fn default() -> Self {
        Self {
            filters: default_filters(),
            channels: Vec::new(),
            history_days: DEFAULT_HISTORY_DAYS,
            assessment_statistics: true,
            overall_item: "overall".into(),
            interactions: Vec::new(),
        }
    }
}

impl FilterBankConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filters.is_empty() {
            return Err(Error::InvalidArgument("filter bank is empty".into()));
        }
        for f in &self.filters {
            f.validate(self.history_days)?;
        }
        Ok(())
    }

    fn selects(&self, channel: Channel) -> bool {
        self.channels.is_empty() || self.channels.contains(&channel)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&s)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Filter(FilterSpec),
    Statistic(String),
    Interaction(usize, usize),
}

/// Description of one feature column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureInfo {
    pub id: String,
    pub channel: Option<Channel>,
    pub code: Option<String>,
    pub kind: FeatureKind,
}

impl FeatureInfo {
    pub fn filter(event_type: &EventType, spec: FilterSpec) -> Self {
        Self {
            id: format!("{event_type}@{}", spec.period()),
            channel: Some(event_type.channel),
            code: Some(event_type.code.clone()),
            kind: FeatureKind::Filter(spec),
        }
    }

    pub fn event_type(&self) -> Option<EventType> {
        Some(EventType::new(self.channel?, self.code.clone()?))
    }

    /// Extraction period tag, present for filter features.
    pub fn period(&self) -> Option<String> {
        match &self.kind {
            FeatureKind::Filter(s) => Some(s.period()),
            _ => None,
        }
    }

    fn manifest_row(&self) -> [String; 6] {
        let (sigma, delay, stat) = match &self.kind {
            FeatureKind::Filter(s) => (
                s.sigma_months.to_string(),
                s.delay_months.to_string(),
                s.kernel.as_str().to_string(),
            ),
            FeatureKind::Statistic(name) => (String::new(), String::new(), name.clone()),
            FeatureKind::Interaction(..) => (String::new(), String::new(), "product".into()),
        };
        [
            self.id.clone(),
            self.channel.map(|c| c.to_string()).unwrap_or_default(),
            self.code.clone().unwrap_or_default(),
            sigma,
            delay,
            stat,
        ]
    }
}

pub const MANIFEST_HEADER: [&str; 6] = ["feature_id", "channel", "code", "sigma", "delay", "statistic"];

/// Writes the feature-name manifest.
pub fn write_feature_manifest(features: &[FeatureInfo], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(MANIFEST_HEADER)?;
    for f in features {
        w.write_record(f.manifest_row())?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_feature_manifest(path: &Path) -> Result<Vec<FeatureInfo>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if headers != MANIFEST_HEADER {
        return Err(Error::format(path, "not a feature manifest"));
    }
    let mut out: Vec<FeatureInfo> = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let bad = |m: &str| Error::format(path, format!("{m} in row {:?}", row.as_slice()));
        let channel = match row[1].trim() {
            "" => None,
            c => Some(c.parse::<Channel>().map_err(|e| bad(&e))?),
        };
        let code = Some(row[2].trim().to_string()).filter(|c| !c.is_empty());
        let stat = row[5].trim();
        let kind = match stat {
            "uniform" | "truncated_gaussian" => {
                let kernel = if stat == "uniform" {
                    Kernel::Uniform
                } else {
                    Kernel::TruncatedGaussian
                };
                let sigma = row[3].trim().parse().map_err(|_| bad("bad sigma"))?;
                let delay = row[4].trim().parse().map_err(|_| bad("bad delay"))?;
                FeatureKind::Filter(FilterSpec {
                    kernel,
                    sigma_months: sigma,
                    delay_months: delay,
                })
            }
            "product" => {
                let (a, b) = row[0].split_once('*').ok_or_else(|| bad("bad product id"))?;
                let find = |id: &str| out.iter().position(|f| f.id == id);
                FeatureKind::Interaction(
                    find(a).ok_or_else(|| bad("unknown factor"))?,
                    find(b).ok_or_else(|| bad("unknown factor"))?,
                )
            }
            other => FeatureKind::Statistic(other.to_string()),
        };
        out.push(FeatureInfo {
            id: row[0].trim().to_string(),
            channel,
            code,
            kind,
        });
    }
    Ok(out)
}

/// Filter bank with a fixed event vocabulary, so every output has the
/// same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub config: FilterBankConfig,
    vocabulary: Vec<EventType>,
    items: Vec<String>,
    features: Vec<FeatureInfo>,
    n_base: usize,
}

impl FeatureExtractor {
    /// Fixes the vocabulary from the event types seen in `corpus`.
    pub fn fit(config: FilterBankConfig, corpus: &[EventMatrix]) -> Result<Self> {
        config.validate()?;
        let mut types: BTreeSet<EventType> = BTreeSet::new();
        let mut items: BTreeSet<String> = BTreeSet::new();
        for m in corpus {
            for t in m.event_types() {
                if t.channel == Channel::AssessmentItem && t.code != config.overall_item {
                    items.insert(t.code.clone());
                }
                if config.selects(t.channel) {
                    types.insert(t.clone());
                }
            }
        }
        Self::with_vocabulary(config, types.into_iter().collect(), items.into_iter().collect())
    }

    pub fn with_vocabulary(
        config: FilterBankConfig,
        vocabulary: Vec<EventType>,
        items: Vec<String>,
    ) -> Result<Self> {
        let mut features = Vec::new();
        for t in &vocabulary {
            for spec in &config.filters {
                features.push(FeatureInfo::filter(t, *spec));
            }
        }
        if config.assessment_statistics && !items.is_empty() {
            for name in AssessmentStats::<f64>::NAMES {
                features.push(FeatureInfo {
                    id: format!("assessment:{name}"),
                    channel: Some(Channel::AssessmentItem),
                    code: None,
                    kind: FeatureKind::Statistic(name.to_string()),
                });
            }
        }
        let n_base = features.len();
        for (a, b) in &config.interactions {
            let find = |id: &str| {
                features[..n_base]
                    .iter()
                    .position(|f| f.id == id)
                    .ok_or_else(|| Error::InvalidArgument(format!("interaction factor {id} is not a feature")))
            };
            let (ia, ib) = (find(a)?, find(b)?);
            features.push(FeatureInfo {
                id: format!("{a}*{b}"),
                channel: Some(Channel::Derived),
                code: None,
                kind: FeatureKind::Interaction(ia, ib),
            });
        }
        Ok(Self {
            config,
            vocabulary,
            items,
            features,
            n_base,
        })
    }

    pub fn features(&self) -> &[FeatureInfo] {
        &self.features
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    /// Number of features produced before normalization; interaction
    /// columns are computed from normalized values afterwards.
    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn vocabulary(&self) -> &[EventType] {
        &self.vocabulary
    }

    /// Assessment item codes feeding the derived statistics.
    pub fn items(&self) -> &[String] {
        &self.items
    }

    fn assessments(&self, matrix: &EventMatrix) -> Vec<Assessment<f64>> {
        let mut days: BTreeSet<u32> = BTreeSet::new();
        for (t, s) in matrix.iter() {
            if t.channel == Channel::AssessmentItem {
                days.extend(s.keys().copied());
            }
        }
        // oldest first
        days.iter()
            .rev()
            .map(|&day| {
                let get = |code: &str| {
                    matrix
                        .series(&EventType::new(Channel::AssessmentItem, code))
                        .and_then(|s| s.get(&day).copied())
                };
                Assessment {
                    overall: get(&self.config.overall_item),
                    items: self.items.iter().map(|c| get(c)).collect(),
                }
            })
            .collect()
    }

    /// Unnormalized responses; interaction columns are left at zero.
    pub fn raw_features(&self, matrix: &EventMatrix) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for t in &self.vocabulary {
            for spec in &self.config.filters {
                out.push(convolve(matrix, t, spec));
            }
        }
        if self.config.assessment_statistics && !self.items.is_empty() {
            match derived_statistics(&self.assessments(matrix)) {
                Ok(stats) => out.extend(stats.to_array()),
                Err(_) => out.extend([0.0; 5]),
            }
        }
        out.resize(self.dim(), 0.0);
        out
    }

    /// Fills the interaction columns of an already normalized vector.
    pub fn fill_interactions<T: Real>(&self, x: &mut [T]) {
        for (j, f) in self.features.iter().enumerate().skip(self.n_base) {
            if let FeatureKind::Interaction(a, b) = f.kind {
                x[j] = x[a] * x[b];
            }
        }
    }
}

/// Per-feature maxima of the training responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer<T> {
    pub max: Vec<T>,
}

impl<T: Real> Normalizer<T> {
    pub fn fit<'a>(corpus: impl IntoIterator<Item = &'a [T]>, dim: usize) -> Self {
        let mut max = vec![T::zero(); dim];
        for row in corpus {
            for (m, &v) in max.iter_mut().zip(row) {
                if v > *m {
                    *m = v;
                }
            }
        }
        Self { max }
    }

    /// `(v / max)^2` clamped to `[0, 1]`; features whose training maximum
    /// is zero map to zero.
    pub fn transform_value(&self, j: usize, v: T) -> T {
        let m = self.max[j];
        if m <= T::zero() {
            return T::zero();
        }
        let r = (v.max(T::zero()) / m).powi(2);
        r.min(T::one())
    }

    pub fn transform(&self, raw: &[T]) -> Vec<T> {
        raw.iter()
            .enumerate()
            .map(|(j, &v)| self.transform_value(j, v))
            .collect()
    }
}
