//! Synthetic cohorts with planted structure: groups of near-duplicate codes
//! sharing a prefix, a sparse true weight vector on filter-bank features,
//! and ordinal labels drawn from a known cumulative or stagewise model.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{
    Channel, CodeHierarchy, EvaluationPoint, EventLog, EventRecord, EventType, DAYS_PER_MONTH,
    DEFAULT_HISTORY_DAYS, DEFAULT_HORIZON_DAYS,
};
use crate::filterbank::{FeatureExtractor, FilterBankConfig};
use crate::model::Variant;
use crate::pipeline::{corpus_from_matrices, Corpus};
use crate::trainer::Dataset;

const WEIGHT_STREAM: u64 = 1 << 62;
const LABEL_STREAM: u64 = (1 << 62) + 1024;

/// Maximum label redraws when a class comes out empty.
pub const MAX_LABEL_ATTEMPTS: usize = 10;

/// How the nonzero true weights are spread over base-code features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightPlacement {
    /// Individual features drawn at random.
    Features,
    /// Whole codes: every filter of a chosen code gets the same weight.
    /// `n_true` must be a multiple of the filter count.
    Codes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorSpec {
    pub n_patients: usize,
    pub n_classes: usize,
    /// Groups of codes sharing a two-character prefix.
    pub n_groups: usize,
    /// Perturbed copies of each group's base code.
    pub twins_per_group: usize,
    /// Codes with a prefix of their own.
    pub n_independent: usize,
    /// Probability that a copy drops a base event; extra events are added
    /// at this fraction of the base rate.
    pub duplication_noise: f64,
    /// Fraction of patients in whom a given code is active at all.
    pub active_fraction: f64,
    /// Mean monthly event rate of an active code.
    pub rate_mean: f64,
    /// Gamma shape of the per-patient rate (smaller = more spread).
    pub rate_shape: f64,
    /// Gamma shape of the six-monthly rate modulation.
    pub modulation_shape: f64,
    /// Nonzero true weights, placed on base-code features.
    pub n_true: usize,
    pub placement: WeightPlacement,
    pub weight_min: f64,
    pub weight_max: f64,
    /// Probability that a true weight is negative.
    pub negative_fraction: f64,
    pub variant: Variant,
    /// Target class proportions, used to place the thresholds.
    pub class_proportions: Vec<f64>,
    /// Explicit thresholds; overrides `class_proportions`.
    pub thresholds: Option<Vec<f64>>,
    pub history_days: u32,
    pub horizon_days: u32,
    pub anchor_day: i64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_patients: 2000,
            n_classes: 3,
            n_groups: 12,
            twins_per_group: 1,
            n_independent: 8,
            duplication_noise: 0.1,
            active_fraction: 0.5,
            rate_mean: 1.0,
            rate_shape: 4.0,
            modulation_shape: 4.0,
            n_true: 10,
            placement: WeightPlacement::Codes,
            weight_min: 5.0,
            weight_max: 10.0,
            negative_fraction: 0.0,
            variant: Variant::Cumulative,
            class_proportions: vec![0.93, 0.05, 0.02],
            thresholds: None,
            history_days: DEFAULT_HISTORY_DAYS,
            horizon_days: DEFAULT_HORIZON_DAYS,
            anchor_day: 3000,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_patients < self.n_classes {
            return bad("fewer patients than classes".into());
        }
        if self.n_classes < 2 {
            return bad("need at least 2 classes".into());
        }
        if self.n_groups + self.n_independent == 0 {
            return bad("no codes to generate".into());
        }
        if self.n_groups + self.n_independent > 260 {
            return bad("at most 260 code prefixes".into());
        }
        if !(0.0..=1.0).contains(&self.duplication_noise)
            || !(0.0..=1.0).contains(&self.active_fraction)
            || !(0.0..=1.0).contains(&self.negative_fraction)
        {
            return bad("noise and fractions must lie in [0, 1]".into());
        }
        if !(self.rate_mean > 0.0 && self.rate_shape > 0.0 && self.modulation_shape > 0.0) {
            return bad("rates and shapes must be positive".into());
        }
        if !(0.0 <= self.weight_min && self.weight_min <= self.weight_max) {
            return bad("need 0 <= weight_min <= weight_max".into());
        }
        if self.variant == Variant::StagewiseMulti {
            return bad("the generator draws from the cumulative or shared stagewise model".into());
        }
        match &self.thresholds {
            Some(t) if t.len() != self.n_classes - 1 => {
                return bad(format!("expected {} thresholds", self.n_classes - 1))
            }
            Some(t) if t.iter().any(|v| !v.is_finite()) => return bad("thresholds must be finite".into()),
            Some(t) if self.variant == Variant::Cumulative && t.windows(2).any(|w| w[0] >= w[1]) => {
                return bad("cumulative thresholds must increase".into())
            }
            Some(_) => {}
            None => {
                let p = &self.class_proportions;
                if p.len() != self.n_classes || p.iter().any(|v| !(*v > 0.0)) {
                    return bad(format!("need {} positive class proportions", self.n_classes));
                }
                if (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("class proportions must sum to 1".into());
                }
            }
        }
        let n_filters = FilterBankConfig::default().filters.len();
        let base_features = (self.n_groups + self.n_independent) * n_filters;
        if self.n_true > base_features {
            return bad(format!("at most {base_features} true weights fit on base codes"));
        }
        if self.placement == WeightPlacement::Codes && self.n_true % n_filters != 0 {
            return bad(format!("whole-code placement needs a multiple of {n_filters} true weights"));
        }
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: Self = serde_json::from_str(&s)?;
        spec.validate()?;
        Ok(spec)
    }

    fn prefix(i: usize) -> String {
        format!("{}{}", (b'A' + (i / 10) as u8) as char, i % 10)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeGroup {
    pub prefix: String,
    pub base: String,
    pub twins: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceTruth {
    pub patient_id: String,
    pub anchor_time: i64,
    pub label: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueWeight {
    pub feature_id: String,
    pub weight: f64,
}

/// Everything needed to check a fit against the generating model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub variant: Variant,
    pub n_classes: usize,
    pub thresholds: Vec<f64>,
    /// Nonzero weights only.
    pub weights: Vec<TrueWeight>,
    pub groups: Vec<CodeGroup>,
    pub independent_codes: Vec<String>,
    pub class_counts: Vec<usize>,
    /// Mean generative probability of each class.
    pub expected_proportions: Vec<f64>,
    pub label_attempts: usize,
    pub instances: Vec<InstanceTruth>,
}

impl GroundTruth {
    pub fn support(&self) -> BTreeSet<String> {
        self.weights.iter().map(|w| w.feature_id.clone()).collect()
    }

    /// Dense weights over `feature_ids`.
    pub fn dense_weights(&self, feature_ids: &[String]) -> Vec<f64> {
        feature_ids
            .iter()
            .map(|id| {
                self.weights
                    .iter()
                    .find(|w| &w.feature_id == id)
                    .map_or(0.0, |w| w.weight)
            })
            .collect()
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub spec: GeneratorSpec,
    pub log: EventLog,
    pub hierarchy: CodeHierarchy,
    /// Raw responses over the full code vocabulary, labels filled in.
    pub corpus: Corpus,
    pub truth: GroundTruth,
}

impl SyntheticCohort {
    /// Features normalized over the whole cohort, as used for the labels.
    pub fn dataset(&self) -> Result<Dataset<f64>> {
        Ok(self.corpus.full_dataset(None)?.0)
    }

    pub fn points(&self) -> &[EvaluationPoint] {
        &self.corpus.points
    }

    /// Writes `events.csv`, `labels.csv`, `hierarchy.csv`,
    /// `ground_truth.json` and `spec.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.log.write_csv(&dir.join("events.csv"))?;
        crate::events::write_labels(&self.corpus.points, &dir.join("labels.csv"))?;
        self.hierarchy.write_csv(&dir.join("hierarchy.csv"))?;
        write_json(&dir.join("ground_truth.json"), &self.truth)?;
        write_json(&dir.join("spec.json"), &self.spec)?;
        Ok(["events.csv", "labels.csv", "hierarchy.csv", "ground_truth.json", "spec.json"]
            .map(String::from)
            .to_vec())
    }
}

fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn logistic(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Class probabilities straight from the model definitions, written
/// independently of [`crate::model`]: differences of the link for the
/// cumulative model, products of stage probabilities for the stagewise one.
pub fn oracle_probs(variant: Variant, thresholds: &[f64], score: f64) -> Vec<f64> {
    let l = thresholds.len() + 1;
    let mut p = Vec::with_capacity(l);
    match variant {
        Variant::Cumulative => {
            let mut prev = 0.0;
            for t in thresholds {
                let c = logistic(t - score);
                p.push(c - prev);
                prev = c;
            }
            p.push(1.0 - prev);
        }
        _ => {
            let mut survive = 1.0;
            for t in thresholds {
                let stop = logistic(t - score);
                p.push(survive * stop);
                survive *= 1.0 - stop;
            }
            p.push(survive);
        }
    }
    p
}

/// Finds `t` with `f(t) = target` for increasing `f`.
fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Thresholds whose mean generative probabilities match `proportions`.
pub fn calibrate_thresholds(variant: Variant, scores: &[f64], proportions: &[f64]) -> Vec<f64> {
    let n = scores.len() as f64;
    let smin = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let smax = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (smin - 60.0, smax + 60.0);
    let mut tau = Vec::with_capacity(proportions.len() - 1);
    match variant {
        Variant::Cumulative => {
            let mut cum = 0.0;
            for p in &proportions[..proportions.len() - 1] {
                cum += p;
                let f = |t: f64| scores.iter().map(|s| logistic(t - s)).sum::<f64>() / n;
                let lower = tau.last().copied().unwrap_or(lo);
                tau.push(bisect(f, cum, lower, hi));
            }
        }
        _ => {
            let mut survive = vec![1.0; scores.len()];
            for p in &proportions[..proportions.len() - 1] {
                let f = |t: f64| {
                    scores
                        .iter()
                        .zip(&survive)
                        .map(|(s, v)| v * logistic(t - s))
                        .sum::<f64>()
                        / n
                };
                let t = bisect(f, *p, lo, hi);
                for (v, s) in survive.iter_mut().zip(scores) {
                    *v *= 1.0 - logistic(t - s);
                }
                tau.push(t);
            }
        }
    }
    tau
}

fn draw_label(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (l, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return l + 1;
        }
    }
    probs.len()
}

/// One code's monthly intensities for one patient; zero when inactive.
fn intensities(spec: &GeneratorSpec, rng: &mut ChaCha8Rng, months: usize) -> Vec<f64> {
    if rng.random::<f64>() >= spec.active_fraction {
        return vec![0.0; months];
    }
    let rate = Gamma::new(spec.rate_shape, spec.rate_mean / spec.rate_shape)
        .expect("validated shape")
        .sample(rng);
    let modulation = Gamma::new(spec.modulation_shape, 1.0 / spec.modulation_shape).expect("validated shape");
    let mut out = Vec::with_capacity(months);
    let mut factor = 1.0;
    for m in 0..months {
        if m % 6 == 0 {
            factor = modulation.sample(rng);
        }
        out.push(rate * factor);
    }
    out
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as u64
}

/// Events of one patient as (code, days before anchor).
fn patient_events(
    spec: &GeneratorSpec,
    groups: &[CodeGroup],
    independent: &[String],
    rng: &mut ChaCha8Rng,
) -> Vec<(String, u32)> {
    let months = (spec.history_days as f64 / DAYS_PER_MONTH).floor() as usize;
    let month_days = DAYS_PER_MONTH as u32;
    let mut out = Vec::new();
    let draw_code = |code: &str, rng: &mut ChaCha8Rng, out: &mut Vec<(String, u32)>| {
        let lam = intensities(spec, rng, months);
        let mut days = Vec::new();
        for (m, l) in lam.iter().enumerate() {
            for _ in 0..poisson(rng, *l) {
                days.push(m as u32 * month_days + rng.random_range(0..month_days));
            }
        }
        out.extend(days.iter().map(|d| (code.to_string(), *d)));
        (lam, days)
    };
    for g in groups {
        let (lam, base_days) = draw_code(&g.base, rng, &mut out);
        for twin in &g.twins {
            for d in &base_days {
                if rng.random::<f64>() >= spec.duplication_noise {
                    out.push((twin.clone(), *d));
                }
            }
            for (m, l) in lam.iter().enumerate() {
                for _ in 0..poisson(rng, l * spec.duplication_noise) {
                    out.push((twin.clone(), m as u32 * month_days + rng.random_range(0..month_days)));
                }
            }
        }
    }
    for code in independent {
        draw_code(code, rng, &mut out);
    }
    out
}

/// Generates a cohort. Identical specs give bit-identical cohorts.
pub fn generate(spec: &GeneratorSpec) -> Result<SyntheticCohort> {
    spec.validate()?;
    let groups: Vec<CodeGroup> = (0..spec.n_groups)
        .map(|g| {
            let prefix = GeneratorSpec::prefix(g);
            CodeGroup {
                base: format!("{prefix}0"),
                twins: (1..=spec.twins_per_group).map(|k| format!("{prefix}{k}")).collect(),
                prefix,
            }
        })
        .collect();
    let independent: Vec<String> = (0..spec.n_independent)
        .map(|i| format!("{}0", GeneratorSpec::prefix(spec.n_groups + i)))
        .collect();

    let width = spec.n_patients.to_string().len();
    let ids: Vec<String> = (0..spec.n_patients).map(|i| format!("P{i:0width$}")).collect();
    let per_patient: Vec<Vec<(String, u32)>> = (0..spec.n_patients)
        .into_par_iter()
        .map(|i| patient_events(spec, &groups, &independent, &mut stream(spec.seed, i as u64 + 1)))
        .collect();
    let mut records = Vec::new();
    for (pid, events) in ids.iter().zip(per_patient) {
        let mut events = events;
        events.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        records.extend(events.into_iter().map(|(code, days)| EventRecord {
            patient_id: pid.clone(),
            event_time: spec.anchor_day - days as i64,
            channel: Channel::Diagnosis,
            code,
            value: 1.0,
        }));
    }
    let log = EventLog::from_records(records);

    let mut hierarchy_pairs = Vec::new();
    for g in &groups {
        for c in std::iter::once(&g.base).chain(&g.twins) {
            hierarchy_pairs.push((c.clone(), g.prefix.clone()));
        }
    }
    for c in &independent {
        hierarchy_pairs.push((c.clone(), c[..2].to_string()));
    }
    let hierarchy = CodeHierarchy::from_pairs(hierarchy_pairs)?;

    let mut points: Vec<EvaluationPoint> = ids
        .iter()
        .map(|pid| EvaluationPoint {
            patient_id: pid.clone(),
            anchor_time: spec.anchor_day,
            label: 1,
            horizon_days: spec.horizon_days,
        })
        .collect();
    let vocabulary: BTreeSet<EventType> = groups
        .iter()
        .flat_map(|g| std::iter::once(&g.base).chain(&g.twins))
        .chain(&independent)
        .map(|c| EventType::new(Channel::Diagnosis, c.clone()))
        .collect();
    let config = FilterBankConfig {
        history_days: spec.history_days,
        ..FilterBankConfig::default()
    };
    let extractor = FeatureExtractor::with_vocabulary(config, vocabulary.into_iter().collect(), Vec::new())?;
    let matrices = log.matrices(&points, spec.history_days);
    let mut corpus = corpus_from_matrices(extractor, &matrices, Some(spec.n_classes))?;
    let (x, _) = corpus.full_dataset::<f64>(None)?;

    // true weights on base-code features
    let base_codes: BTreeSet<&str> = groups
        .iter()
        .map(|g| g.base.as_str())
        .chain(independent.iter().map(String::as_str))
        .collect();
    let mut wrng = stream(spec.seed, WEIGHT_STREAM);
    let draw_weight = |rng: &mut ChaCha8Rng| {
        let mag = if spec.weight_max > spec.weight_min {
            rng.random_range(spec.weight_min..spec.weight_max)
        } else {
            spec.weight_min
        };
        if rng.random::<f64>() < spec.negative_fraction {
            -mag
        } else {
            mag
        }
    };
    let mut w = vec![0.0; x.dim()];
    let mut chosen: Vec<usize> = Vec::new();
    let features = corpus.features();
    match spec.placement {
        WeightPlacement::Features => {
            let candidates: Vec<usize> = features
                .iter()
                .enumerate()
                .filter(|(_, f)| f.code.as_deref().is_some_and(|c| base_codes.contains(c)))
                .map(|(j, _)| j)
                .collect();
            let picks = rand::seq::index::sample(&mut wrng, candidates.len(), spec.n_true);
            chosen = picks.into_iter().map(|k| candidates[k]).collect();
            chosen.sort_unstable();
            for &j in &chosen {
                w[j] = draw_weight(&mut wrng);
            }
        }
        WeightPlacement::Codes => {
            let codes: Vec<&str> = base_codes.iter().copied().collect();
            let per_code = corpus.extractor.config.filters.len();
            let picks = rand::seq::index::sample(&mut wrng, codes.len(), spec.n_true / per_code);
            let mut picked: Vec<&str> = picks.into_iter().map(|k| codes[k]).collect();
            picked.sort_unstable();
            for code in picked {
                let v = draw_weight(&mut wrng);
                for (j, f) in features.iter().enumerate() {
                    if f.code.as_deref() == Some(code) {
                        w[j] = v;
                        chosen.push(j);
                    }
                }
            }
            chosen.sort_unstable();
        }
    }
    let scores: Vec<f64> = (0..x.n())
        .map(|i| x.row(i).iter().zip(&w).map(|(a, b)| a * b).sum())
        .collect();
    let thresholds = match &spec.thresholds {
        Some(t) => t.clone(),
        None => calibrate_thresholds(spec.variant, &scores, &spec.class_proportions),
    };
    let probs: Vec<Vec<f64>> = scores
        .iter()
        .map(|s| oracle_probs(spec.variant, &thresholds, *s))
        .collect();

    let mut attempt = 0;
    let labels = loop {
        if attempt == MAX_LABEL_ATTEMPTS {
            return Err(Error::Data(format!(
                "no label draw realized all {} classes in {MAX_LABEL_ATTEMPTS} attempts",
                spec.n_classes
            )));
        }
        let mut rng = stream(spec.seed, LABEL_STREAM + attempt as u64);
        let labels: Vec<usize> = probs.iter().map(|p| draw_label(&mut rng, p)).collect();
        attempt += 1;
        let present: BTreeSet<usize> = labels.iter().copied().collect();
        if present.len() == spec.n_classes {
            break labels;
        }
    };
    for (p, l) in points.iter_mut().zip(&labels) {
        p.label = *l;
    }
    for (p, l) in corpus.points.iter_mut().zip(&labels) {
        p.label = *l;
    }
    let mut class_counts = vec![0; spec.n_classes];
    for l in &labels {
        class_counts[l - 1] += 1;
    }
    let expected_proportions = (0..spec.n_classes)
        .map(|c| probs.iter().map(|p| p[c]).sum::<f64>() / probs.len() as f64)
        .collect();
    let truth = GroundTruth {
        format: "ordstab-ground-truth".into(),
        version: 1,
        seed: spec.seed,
        variant: spec.variant,
        n_classes: spec.n_classes,
        thresholds,
        weights: chosen
            .iter()
            .map(|&j| TrueWeight {
                feature_id: x.feature_ids[j].clone(),
                weight: w[j],
            })
            .collect(),
        groups,
        independent_codes: independent,
        class_counts,
        expected_proportions,
        label_attempts: attempt,
        instances: points
            .iter()
            .zip(probs)
            .map(|(p, probs)| InstanceTruth {
                patient_id: p.patient_id.clone(),
                anchor_time: p.anchor_time,
                label: p.label,
                probs,
            })
            .collect(),
    };
    Ok(SyntheticCohort {
        spec: spec.clone(),
        log,
        hierarchy,
        corpus,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorSpec {
        GeneratorSpec {
            n_patients: 200,
            n_groups: 3,
            n_independent: 2,
            n_true: 4,
            placement: WeightPlacement::Features,
            seed: 5,
            class_proportions: vec![0.6, 0.25, 0.15],
            ..Default::default()
        }
    }

    #[test]
    fn oracle_two_classes_is_logistic() {
        let p = oracle_probs(Variant::Cumulative, &[0.3], -0.2);
        assert!((p[0] - logistic(0.5)).abs() < 1e-15);
        let q = oracle_probs(Variant::StagewiseShared, &[0.3], -0.2);
        assert!((p[0] - q[0]).abs() < 1e-15);
    }

    #[test]
    fn calibration_hits_targets() {
        let scores: Vec<f64> = (0..500).map(|i| (i as f64 / 100.0).sin()).collect();
        for v in [Variant::Cumulative, Variant::StagewiseShared] {
            let tau = calibrate_thresholds(v, &scores, &[0.7, 0.2, 0.1]);
            let mean: Vec<f64> = (0..3)
                .map(|c| scores.iter().map(|s| oracle_probs(v, &tau, *s)[c]).sum::<f64>() / 500.0)
                .collect();
            for (m, t) in mean.iter().zip([0.7, 0.2, 0.1]) {
                assert!((m - t).abs() < 1e-9, "{v} {mean:?}");
            }
        }
    }

    #[test]
    fn deterministic_and_complete() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.log, b.log);
        assert_eq!(a.truth.class_counts.iter().filter(|c| **c > 0).count(), 3);
        assert_eq!(a.truth.weights.len(), 4);
        assert_eq!(a.corpus.extractor.dim(), (3 * 2 + 2) * 5);
        let c = generate(&GeneratorSpec { seed: 6, ..small() }).unwrap();
        assert_ne!(a.log, c.log);
        let codes = GeneratorSpec {
            placement: WeightPlacement::Codes,
            n_true: 10,
            ..small()
        };
        let truth = generate(&codes).unwrap().truth;
        let bases: BTreeSet<&str> = truth
            .weights
            .iter()
            .map(|w| w.feature_id.split('@').next().unwrap())
            .collect();
        assert_eq!(bases.len(), 2);
        assert!(generate(&GeneratorSpec { n_true: 4, ..codes }).is_err());
    }

    #[test]
    fn noiseless_twins_duplicate_their_base() {
        let spec = GeneratorSpec {
            duplication_noise: 0.0,
            ..small()
        };
        let cohort = generate(&spec).unwrap();
        let ds = cohort.dataset().unwrap();
        let col = |id: &str| ds.feature_ids.iter().position(|f| f == id).unwrap();
        for seg in ["u3+0", "u24+24"] {
            let a = col(&format!("diagnosis:A00@{seg}"));
            let b = col(&format!("diagnosis:A01@{seg}"));
            assert_eq!(ds.column(a), ds.column(b));
        }
    }

    #[test]
    fn labels_match_oracle_probabilities() {
        let cohort = generate(&small()).unwrap();
        for inst in &cohort.truth.instances {
            assert!((inst.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(generate(&GeneratorSpec { n_true: 1000, ..small() }).is_err());
    }
}
