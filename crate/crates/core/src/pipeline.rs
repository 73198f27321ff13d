//! Glue from an event log to training data: matrices, filter-bank
//! responses, per-row code counts, and fold-local preprocessing.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{FoldData, FoldSource};
use crate::events::{Channel, CodeHierarchy, EvaluationPoint, EventLog, EventType, RareCodeFilter};
use crate::filterbank::{FeatureExtractor, FeatureInfo, FeatureKind, FilterBankConfig, Normalizer};
use crate::network::{build_network, RegularizerKind, RegularizerMatrix, DEFAULT_PREFIX_LEN};
use crate::real::Real;
use crate::trainer::Dataset;

/// Extraction settings beyond the filter bank itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractConfig {
    pub filterbank: FilterBankConfig,
    /// Code depth to roll up to; `None` keeps codes as given.
    pub rollup_depth: Option<usize>,
    /// Channels whose codes are rolled up; empty means diagnosis only.
    pub rollup_channels: Vec<Channel>,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self {
            filterbank: FilterBankConfig::default(),
            rollup_depth: None,
            rollup_channels: Vec::new(),
        }
    }
}

impl ExtractConfig {
    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&s)?;
        cfg.filterbank.validate()?;
        Ok(cfg)
    }
}

/// Raw filter-bank responses and code counts for every evaluation point,
/// before any normalization or rare-code filtering.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub extractor: FeatureExtractor,
    pub points: Vec<EvaluationPoint>,
    pub n_classes: usize,
    pub raw: Array2<f64>,
    /// Per row: (vocabulary index, occurrences) pairs.
    pub counts: Vec<Vec<(usize, u64)>>,
}

/// Rolls up codes, builds the event matrices and computes raw responses.
/// The vocabulary is every event type seen in the window.
pub fn extract(
    mut log: EventLog,
    points: Vec<EvaluationPoint>,
    hierarchy: Option<&CodeHierarchy>,
    config: &ExtractConfig,
    n_classes: Option<usize>,
) -> Result<Corpus> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("no evaluation points".into()));
    }
    config.filterbank.validate()?;
    if let Some(depth) = config.rollup_depth {
        let empty = CodeHierarchy::new();
        let channels = if config.rollup_channels.is_empty() {
            vec![Channel::Diagnosis]
        } else {
            config.rollup_channels.clone()
        };
        log.rollup(hierarchy.unwrap_or(&empty), &channels, depth);
    }
    let matrices = log.matrices(&points, config.filterbank.history_days);
    let extractor = FeatureExtractor::fit(config.filterbank.clone(), &matrices)?;
    corpus_from_matrices(extractor, &matrices, n_classes)
}

/// Responses of a fitted extractor on prepared matrices.
pub fn corpus_from_matrices(
    extractor: FeatureExtractor,
    matrices: &[crate::events::EventMatrix],
    n_classes: Option<usize>,
) -> Result<Corpus> {
    let points: Vec<EvaluationPoint> = matrices.iter().map(|m| m.point.clone()).collect();
    let max_label = points.iter().map(|p| p.label).max().unwrap_or(0);
    let n_classes = n_classes.unwrap_or(max_label).max(2);
    if max_label > n_classes {
        return Err(Error::InvalidArgument(format!(
            "label {max_label} exceeds {n_classes} classes"
        )));
    }
    let index: BTreeMap<&EventType, usize> = extractor
        .vocabulary()
        .iter()
        .enumerate()
        .map(|(i, t)| (t, i))
        .collect();
    let rows: Vec<(Vec<f64>, Vec<(usize, u64)>)> = matrices
        .par_iter()
        .map(|m| {
            let counts = m
                .occurrences()
                .into_iter()
                .filter_map(|(t, c)| index.get(&t).map(|&i| (i, c)))
                .collect();
            (extractor.raw_features(m), counts)
        })
        .collect();
    let d = extractor.dim();
    let mut raw = Array2::zeros((rows.len(), d));
    let mut counts = Vec::with_capacity(rows.len());
    for (i, (r, c)) in rows.into_iter().enumerate() {
        raw.row_mut(i).assign(&ndarray::ArrayView1::from(&r));
        counts.push(c);
    }
    Ok(Corpus {
        extractor,
        points,
        n_classes,
        raw,
        counts,
    })
}

/// Feature columns and normalization fitted on a set of training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessor {
    pub normalizer: Normalizer<f64>,
    /// Retained columns of the full feature layout.
    pub keep: Vec<usize>,
    pub rare: Option<RareCodeFilter>,
}

impl Corpus {
    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn features(&self) -> &[FeatureInfo] {
        self.extractor.features()
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.points.iter().map(|p| p.patient_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.points.iter().map(|p| p.label).collect()
    }

    /// Total occurrences per event type over `rows`.
    pub fn type_counts(&self, rows: &[usize]) -> BTreeMap<EventType, u64> {
        let vocab = self.extractor.vocabulary();
        let mut out: BTreeMap<EventType, u64> = vocab.iter().map(|t| (t.clone(), 0)).collect();
        for &i in rows {
            for &(t, c) in &self.counts[i] {
                *out.get_mut(&vocab[t]).expect("vocabulary entry") += c;
            }
        }
        out
    }

    /// Fits the normalizer and, with `min_occurrences`, the rare-code drop
    /// list on `train` rows only.
    pub fn fit_preprocessor(&self, train: &[usize], min_occurrences: Option<u64>) -> Result<Preprocessor> {
        let n_base = self.extractor.n_base();
        let normalizer = Normalizer::fit(
            train.iter().map(|&i| {
                self.raw
                    .row(i)
                    .to_slice()
                    .expect("corpus rows are contiguous")
            }),
            self.extractor.dim(),
        );
        let rare = match min_occurrences {
            Some(0) => return Err(Error::InvalidArgument("min_occurrences must be >= 1".into())),
            Some(m) => Some(RareCodeFilter::from_counts(&self.type_counts(train), m)),
            None => None,
        };
        let features = self.features();
        let base_kept = |j: usize| match (&rare, features[j].event_type()) {
            (Some(r), Some(t)) => r.keeps(&t),
            _ => true,
        };
        let keep = (0..features.len())
            .filter(|&j| match features[j].kind {
                FeatureKind::Interaction(a, b) => j >= n_base && base_kept(a) && base_kept(b),
                _ => base_kept(j),
            })
            .collect();
        Ok(Preprocessor {
            normalizer,
            keep,
            rare,
        })
    }

    /// Normalized feature rows for `rows` under `pre`.
    pub fn dataset<T: Real>(&self, rows: &[usize], pre: &Preprocessor) -> Result<Dataset<T>> {
        let d = pre.keep.len();
        let mut x = Array2::<T>::zeros((rows.len(), d));
        let mut full = vec![T::zero(); self.extractor.dim()];
        for (r, &i) in rows.iter().enumerate() {
            for (j, v) in full.iter_mut().enumerate() {
                *v = T::lit(pre.normalizer.transform_value(j, self.raw[[i, j]]));
            }
            self.extractor.fill_interactions(&mut full);
            for (c, &j) in pre.keep.iter().enumerate() {
                x[[r, c]] = full[j];
            }
        }
        let features = self.features();
        Dataset::new(
            x,
            rows.iter().map(|&i| self.points[i].label).collect(),
            self.n_classes,
            rows.iter().map(|&i| self.points[i].patient_id.clone()).collect(),
            pre.keep.iter().map(|&j| features[j].id.clone()).collect(),
        )
    }

    pub fn kept_features(&self, pre: &Preprocessor) -> Vec<FeatureInfo> {
        pre.keep.iter().map(|&j| self.features()[j].clone()).collect()
    }

    /// Normalized dataset over every row with normalization fitted on all
    /// of them.
    pub fn full_dataset<T: Real>(&self, min_occurrences: Option<u64>) -> Result<(Dataset<T>, Preprocessor)> {
        let rows: Vec<usize> = (0..self.n()).collect();
        let pre = self.fit_preprocessor(&rows, min_occurrences)?;
        Ok((self.dataset(&rows, &pre)?, pre))
    }

    /// Writes `patient_id,anchor_time,label,<feature ids>` with raw values.
    pub fn write_raw_csv(&self, out: impl Write) -> Result<()> {
        let rows: Vec<usize> = (0..self.n()).collect();
        let ids: Vec<&str> = self.features().iter().map(|f| f.id.as_str()).collect();
        write_rows(out, &self.points, &rows, &ids, |i, j| self.raw[[i, j]])
    }

    /// Long-format code counts: `row,channel,code,count`.
    pub fn write_counts_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["row", "channel", "code", "count"])?;
        let vocab = self.extractor.vocabulary();
        for (i, row) in self.counts.iter().enumerate() {
            for &(t, c) in row {
                w.write_record([
                    i.to_string(),
                    vocab[t].channel.to_string(),
                    vocab[t].code.clone(),
                    c.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<code counts>", e))?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusHeader {
    format: String,
    version: u32,
    n_classes: usize,
    filterbank: FilterBankConfig,
    vocabulary: Vec<EventType>,
    items: Vec<String>,
}

const CORPUS_FORMAT: &str = "ordstab-corpus";

impl Corpus {
    /// Writes `corpus.json`, `raw.csv` and `code_counts.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        let header = CorpusHeader {
            format: CORPUS_FORMAT.into(),
            version: 1,
            n_classes: self.n_classes,
            filterbank: self.extractor.config.clone(),
            vocabulary: self.extractor.vocabulary().to_vec(),
            items: self.extractor.items().to_vec(),
        };
        let path = dir.join("corpus.json");
        let mut s = serde_json::to_string_pretty(&header)?;
        s.push('\n');
        std::fs::write(&path, s).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("raw.csv");
        self.write_raw_csv(create(&path)?)?;
        let path = dir.join("code_counts.csv");
        self.write_counts_csv(create(&path)?)?;
        Ok(["corpus.json", "raw.csv", "code_counts.csv"].map(String::from).to_vec())
    }

    /// Reads a corpus written by [`Corpus::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("corpus.json");
        let s = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CorpusHeader = serde_json::from_str(&s)?;
        if header.format != CORPUS_FORMAT || header.version != 1 {
            return Err(Error::format(&path, "not a version 1 corpus header"));
        }
        let extractor = FeatureExtractor::with_vocabulary(header.filterbank, header.vocabulary, header.items)?;
        let path = dir.join("raw.csv");
        let table = read_table(&path, Some(header.n_classes))?;
        let expected: Vec<&str> = extractor.features().iter().map(|f| f.id.as_str()).collect();
        if table.feature_ids.iter().map(String::as_str).ne(expected.iter().copied()) {
            return Err(Error::format(&path, "columns do not match the corpus feature layout"));
        }
        let path = dir.join("code_counts.csv");
        let index: BTreeMap<&EventType, usize> = extractor
            .vocabulary()
            .iter()
            .enumerate()
            .map(|(i, t)| (t, i))
            .collect();
        let mut counts = vec![Vec::new(); table.points.len()];
        let mut rdr = csv::Reader::from_path(&path)?;
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let bad = |m: &str| Error::format(&path, format!("line {line}: {m}"));
            if rec.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let row: usize = rec[0].parse().map_err(|_| bad("bad row index"))?;
            let channel: Channel = rec[1].parse().map_err(|e: String| bad(&e))?;
            let t = EventType::new(channel, &rec[2]);
            let c: u64 = rec[3].parse().map_err(|_| bad("bad count"))?;
            let &k = index.get(&t).ok_or_else(|| bad("event type outside the vocabulary"))?;
            counts
                .get_mut(row)
                .ok_or_else(|| bad("row index out of range"))?
                .push((k, c));
        }
        Ok(Self {
            extractor,
            points: table.points,
            n_classes: header.n_classes,
            raw: table.values,
            counts,
        })
    }
}

fn create(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// A dataset table as written by [`write_rows`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub points: Vec<EvaluationPoint>,
    pub feature_ids: Vec<String>,
    pub values: Array2<f64>,
}

impl Table {
    pub fn dataset(&self, n_classes: usize) -> Result<Dataset<f64>> {
        Dataset::new(
            self.values.clone(),
            self.points.iter().map(|p| p.label).collect(),
            n_classes,
            self.points.iter().map(|p| p.patient_id.clone()).collect(),
            self.feature_ids.clone(),
        )
    }
}

/// Reads `patient_id,anchor_time,label,<feature ids>`.
pub fn read_table(path: &Path, n_classes: Option<usize>) -> Result<Table> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::format(path, e.to_string()),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    if headers.len() < 3 || &headers[0] != "patient_id" || &headers[1] != "anchor_time" || &headers[2] != "label" {
        return Err(Error::format(path, "header must start with patient_id,anchor_time,label"));
    }
    let feature_ids: Vec<String> = headers.iter().skip(3).map(String::from).collect();
    let d = feature_ids.len();
    let mut points = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |m: String| Error::format(path, format!("line {line}: {m}"));
        let anchor_time = crate::events::parse_day(&rec[1]).map_err(bad)?;
        let label: usize = rec[2]
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", &rec[2])))?;
        if label == 0 || n_classes.is_some_and(|l| label > l) {
            return Err(bad(format!("label {label} out of range")));
        }
        for v in rec.iter().skip(3) {
            let x: f64 = v.parse().map_err(|_| bad(format!("bad value {v:?}")))?;
            if !x.is_finite() {
                return Err(bad(format!("non-finite value {v:?}")));
            }
            values.push(x);
        }
        points.push(EvaluationPoint {
            patient_id: rec[0].to_string(),
            anchor_time,
            label,
            horizon_days: crate::events::DEFAULT_HORIZON_DAYS,
        });
    }
    let values = Array2::from_shape_vec((points.len(), d), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(Table {
        points,
        feature_ids,
        values,
    })
}

/// Writes a dataset table: `patient_id,anchor_time,label,<feature ids>`.
pub fn write_rows(
    out: impl Write,
    points: &[EvaluationPoint],
    rows: &[usize],
    feature_ids: &[&str],
    value: impl Fn(usize, usize) -> f64,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["patient_id", "anchor_time", "label"];
    header.extend_from_slice(feature_ids);
    w.write_record(&header)?;
    let mut rec: Vec<String> = Vec::with_capacity(header.len());
    for &i in rows {
        rec.clear();
        let p = &points[i];
        rec.push(p.patient_id.clone());
        rec.push(p.anchor_time.to_string());
        rec.push(p.label.to_string());
        for j in 0..feature_ids.len() {
            rec.push(value(i, j).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<dataset>", e))?;
    Ok(())
}

/// Cross-validation source that refits normalization, the rare-code
/// filter and the feature network on every training split.
pub struct CorpusSource<'a> {
    pub corpus: &'a Corpus,
    pub min_occurrences: Option<u64>,
    pub regularizer: RegularizerKind,
    patient_ids: Vec<String>,
    labels: Vec<usize>,
}

impl<'a> CorpusSource<'a> {
    pub fn new(corpus: &'a Corpus, min_occurrences: Option<u64>, regularizer: RegularizerKind) -> Self {
        Self {
            corpus,
            min_occurrences,
            regularizer,
            patient_ids: corpus.patient_ids(),
            labels: corpus.labels(),
        }
    }
}

impl<T: Real> FoldSource<T> for CorpusSource<'_> {
    fn patient_ids(&self) -> &[String] {
        &self.patient_ids
    }

    fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn n_classes(&self) -> usize {
        self.corpus.n_classes
    }

    fn prepare(&self, train: &[usize], test: &[usize]) -> Result<FoldData<T>> {
        let pre = self.corpus.fit_preprocessor(train, self.min_occurrences)?;
        let net = build_network(&self.corpus.kept_features(&pre), DEFAULT_PREFIX_LEN);
        Ok(FoldData {
            train: self.corpus.dataset(train, &pre)?,
            test: self.corpus.dataset(test, &pre)?,
            reg: RegularizerMatrix::build(self.regularizer, &net),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::EventRecord;

    fn rec(p: &str, t: i64, code: &str) -> EventRecord {
        EventRecord {
            patient_id: p.into(),
            event_time: t,
            channel: Channel::Diagnosis,
            code: code.into(),
            value: 1.0,
        }
    }

    fn point(p: &str, label: usize) -> EvaluationPoint {
        EvaluationPoint {
            patient_id: p.into(),
            anchor_time: 1000,
            label,
            horizon_days: 90,
        }
    }

    fn corpus() -> Corpus {
        let log = EventLog::from_records(vec![
            rec("a", 990, "F31"),
            rec("a", 980, "F31"),
            rec("b", 900, "F32"),
            rec("c", 995, "X11"),
        ]);
        extract(
            log,
            vec![point("a", 1), point("b", 2), point("c", 1)],
            None,
            &ExtractConfig::default(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn layout_and_counts() {
        let c = corpus();
        assert_eq!(c.extractor.dim(), 15);
        assert_eq!(c.n_classes, 2);
        // F31 twice in the first 3 months of patient a: 2 events / 3 months
        assert!((c.raw[[0, 0]] - 2.0 / 3.0).abs() < 1e-15);
        let counts = c.type_counts(&[0, 1, 2]);
        assert_eq!(counts[&EventType::new(Channel::Diagnosis, "F31")], 2);
    }

    #[test]
    fn rare_filter_uses_training_rows_only() {
        let c = corpus();
        let pre = c.fit_preprocessor(&[0, 1], Some(1)).unwrap();
        // F31 occurs twice in rows 0-1 and survives; F32 once; X11 never
        let kept: Vec<String> = c.kept_features(&pre).iter().map(|f| f.id.clone()).collect();
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|id| id.contains("F31")));
        let ds: Dataset<f64> = c.dataset(&[2], &pre).unwrap();
        assert_eq!(ds.dim(), 5);
        assert!(ds.x().iter().all(|v| *v == 0.0));
        assert!(c.fit_preprocessor(&[0], Some(0)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let c = corpus();
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn normalizer_sees_training_rows_only() {
        let c = corpus();
        let pre = c.fit_preprocessor(&[1, 2], None).unwrap();
        let ds: Dataset<f64> = c.dataset(&[0], &pre).unwrap();
        // F31 has no training response, so it maps to zero
        assert_eq!(ds.row(0)[0], 0.0);
    }
}
