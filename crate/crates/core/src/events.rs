//! Event ingestion, code rollup, evaluation points and the per-anchor
//! sparse event matrix.
//!
//! Times are whole days on a single axis. Integer cells in the input files
//! are taken as day numbers directly; ISO-8601 dates are converted to days
//! since 1970-01-01. Kernel parameters given in months use
//! [`DAYS_PER_MONTH`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Month to day conversion used for every kernel parameter.
pub const DAYS_PER_MONTH: f64 = 30.0;

/// Default history bound: 48 months.
pub const DEFAULT_HISTORY_DAYS: u32 = 48 * 30;

/// Default label horizon: 3 months.
pub const DEFAULT_HORIZON_DAYS: u32 = 90;

const MATRIX_MAGIC: &[u8; 8] = b"ORDSTEVM";
const MATRIX_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    Diagnosis,
    Procedure,
    EmergencyVisit,
    Admission,
    AssessmentItem,
    Derived,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Diagnosis,
        Channel::Procedure,
        Channel::EmergencyVisit,
        Channel::Admission,
        Channel::AssessmentItem,
        Channel::Derived,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Diagnosis => "diagnosis",
            Channel::Procedure => "procedure",
            Channel::EmergencyVisit => "emergency_visit",
            Channel::Admission => "admission",
            Channel::AssessmentItem => "assessment_item",
            Channel::Derived => "derived",
        }
    }

    fn tag(self) -> u8 {
        Channel::ALL.iter().position(|c| *c == self).unwrap() as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Channel::ALL.get(tag as usize).copied()
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Channel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown channel {s:?}"))
    }
}

/// A typed event: channel plus code.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EventType {
    pub channel: Channel,
    pub code: String,
}

impl EventType {
    pub fn new(channel: Channel, code: impl Into<String>) -> Self {
        Self {
            channel,
            code: code.into(),
        }
    }
}

impl fmt::Display for EventType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.channel, self.code)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub event_time: i64,
    pub channel: Channel,
    pub code: String,
    /// 1.0 for point events, duration in days for continuing events,
    /// rating for assessment items.
    pub value: f64,
}

impl EventRecord {
    pub fn event_type(&self) -> EventType {
        EventType::new(self.channel, self.code.clone())
    }
}

/// Parses an integer day number or an ISO-8601 calendar date.
pub fn parse_day(s: &str) -> Result<i64, String> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        if v < 0 {
            return Err(format!("negative day offset {v}"));
        }
        return Ok(v);
    }
    let date = NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|_| format!("unparseable date {s:?}"))?;
    let epoch = NaiveDate::from_ymd_opt(1970, 1, 1).unwrap();
    Ok((date - epoch).num_days())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub rows_accepted: usize,
    pub errors: Vec<RowError>,
}

impl IngestReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Every accepted event record, grouped by patient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    by_patient: BTreeMap<String, Vec<EventRecord>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: EventRecord) {
        self.by_patient
            .entry(record.patient_id.clone())
            .or_default()
            .push(record);
    }

    pub fn from_records(records: impl IntoIterator<Item = EventRecord>) -> Self {
        let mut log = Self::new();
        for r in records {
            log.push(r);
        }
        log
    }

    pub fn len(&self) -> usize {
        self.by_patient.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patients(&self) -> impl Iterator<Item = &str> {
        self.by_patient.keys().map(String::as_str)
    }

    pub fn records(&self) -> impl Iterator<Item = &EventRecord> {
        self.by_patient.values().flatten()
    }

    pub fn patient_records(&self, patient_id: &str) -> &[EventRecord] {
        self.by_patient
            .get(patient_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Rewrites the codes of the given channels to their ancestor at `depth`.
    pub fn rollup(&mut self, hierarchy: &CodeHierarchy, channels: &[Channel], depth: usize) {
        for r in self.by_patient.values_mut().flatten() {
            if channels.contains(&r.channel) {
                r.code = rollup_code(&r.code, hierarchy, depth);
            }
        }
    }

    /// Builds the event matrix of every evaluation point.
    pub fn matrices(&self, points: &[EvaluationPoint], history_days: u32) -> Vec<EventMatrix> {
        points
            .iter()
            .map(|p| EventMatrix::build(p, self.patient_records(&p.patient_id), history_days))
            .collect()
    }

    /// Writes the log in the event file format, sorted by patient then time.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "event_time", "channel", "code", "value"])?;
        for (pid, recs) in &self.by_patient {
            let mut recs: Vec<&EventRecord> = recs.iter().collect();
            recs.sort_by(|a, b| {
                (a.event_time, a.channel, &a.code).cmp(&(b.event_time, b.channel, &b.code))
            });
            for r in recs {
                w.write_record([
                    pid.as_str(),
                    &r.event_time.to_string(),
                    r.channel.as_str(),
                    &r.code,
                    &r.value.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| Error::io(path, e))
}

fn check_header(path: &Path, headers: &csv::StringRecord, expected: &[&str]) -> Result<()> {
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    if got != expected {
        return Err(Error::format(
            path,
            format!("expected header {:?}, found {:?}", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_event_row(row: &csv::StringRecord) -> Result<EventRecord, String> {
    if row.len() != 5 {
        return Err(format!("expected 5 columns, found {}", row.len()));
    }
    let patient_id = row[0].trim();
    if patient_id.is_empty() {
        return Err("empty patient_id".into());
    }
    let event_time = parse_day(&row[1])?;
    let channel: Channel = row[2].trim().parse()?;
    let code = row[3].trim();
    if code.is_empty() {
        return Err("empty code".into());
    }
    let value: f64 = row[4]
        .trim()
        .parse()
        .map_err(|_| format!("unparseable value {:?}", &row[4]))?;
    if !value.is_finite() || value < 0.0 {
        return Err(format!("value must be finite and >= 0, got {value}"));
    }
    Ok(EventRecord {
        patient_id: patient_id.to_string(),
        event_time,
        channel,
        code: code.to_string(),
        value,
    })
}

/// Reads an event file (`patient_id,event_time,channel,code,value`).
///
/// Malformed rows are skipped and listed in the report with their line
/// numbers; an unreadable file or a wrong header is fatal.
pub fn ingest_events(path: &Path) -> Result<(EventLog, IngestReport)> {
    ingest_events_from(open(path)?, path)
}

pub fn ingest_events_from(reader: impl Read, path: &Path) -> Result<(EventLog, IngestReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    check_header(
        path,
        rdr.headers()?,
        &["patient_id", "event_time", "channel", "code", "value"],
    )?;
    let mut log = EventLog::new();
    let mut report = IngestReport::default();
    for row in rdr.records() {
        report.rows_read += 1;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                report.errors.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        match parse_event_row(&row) {
            Ok(rec) => {
                report.rows_accepted += 1;
                log.push(rec);
            }
            Err(message) => report.errors.push(RowError { line, message }),
        }
    }
    Ok((log, report))
}

/// Parent links between codes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CodeHierarchy {
    parents: BTreeMap<String, String>,
}

impl CodeHierarchy {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a hierarchy, rejecting duplicate parents and cycles.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut parents = BTreeMap::new();
        for (code, parent) in pairs {
            if code == parent {
                return Err(Error::Data(format!("code {code} is its own parent")));
            }
            if let Some(prev) = parents.insert(code.clone(), parent.clone()) {
                if prev != parent {
                    return Err(Error::Data(format!(
                        "code {code} has two parents: {prev} and {parent}"
                    )));
                }
            }
        }
        let h = Self { parents };
        h.check_acyclic()?;
        Ok(h)
    }

    fn check_acyclic(&self) -> Result<()> {
        let mut cleared: BTreeSet<&str> = BTreeSet::new();
        for start in self.parents.keys() {
            let mut seen: BTreeSet<&str> = BTreeSet::new();
            let mut cur = start.as_str();
            while let Some(p) = self.parents.get(cur) {
                if cleared.contains(cur) {
                    break;
                }
                if !seen.insert(cur) {
                    return Err(Error::Data(format!("cycle in hierarchy through {cur}")));
                }
                cur = p.as_str();
            }
            cleared.extend(seen);
        }
        Ok(())
    }

    pub fn parent(&self, code: &str) -> Option<&str> {
        self.parents.get(code).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&str, &str)> {
        self.parents.iter().map(|(c, p)| (c.as_str(), p.as_str()))
    }

    /// Reads a `code,parent` file.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(open(path)?);
        check_header(path, rdr.headers()?, &["code", "parent"])?;
        let mut pairs = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() != 2 {
                return Err(Error::format(path, "hierarchy rows need 2 columns"));
            }
            pairs.push((row[0].trim().to_string(), row[1].trim().to_string()));
        }
        Self::from_pairs(pairs)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["code", "parent"])?;
        for (c, p) in self.pairs() {
            w.write_record([c, p])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Number of significant characters of a code; separators are not counted.
fn code_depth(code: &str) -> usize {
    code.chars().filter(|c| *c != '.').count()
}

fn truncate_code(code: &str, depth: usize) -> String {
    let mut out = String::new();
    let mut kept = 0;
    for c in code.chars() {
        if kept == depth {
            break;
        }
        if c != '.' {
            kept += 1;
        }
        out.push(c);
    }
    out.trim_end_matches('.').to_string()
}

/// Maps a code to its ancestor at `depth` characters ("F32.2" -> "F32").
///
/// Explicit parents in `hierarchy` win when one sits exactly at the
/// requested depth; otherwise the code is truncated. Codes no deeper than
/// `depth` come back unchanged.
pub fn rollup_code(code: &str, hierarchy: &CodeHierarchy, depth: usize) -> String {
    if code_depth(code) <= depth {
        return code.to_string();
    }
    let mut cur = code;
    while let Some(p) = hierarchy.parent(cur) {
        let pd = code_depth(p);
        if pd == depth {
            return p.to_string();
        }
        if pd < depth {
            break;
        }
        cur = p;
    }
    truncate_code(code, depth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationPoint {
    pub patient_id: String,
    pub anchor_time: i64,
    pub label: usize,
    pub horizon_days: u32,
}

/// Reads a label file (`patient_id,anchor_time,label`); labels must lie in
/// `1..=n_classes` when `n_classes` is given.
pub fn read_labels(path: &Path, n_classes: Option<usize>) -> Result<Vec<EvaluationPoint>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    check_header(path, rdr.headers()?, &["patient_id", "anchor_time", "label"])?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let bad = |m: String| Error::format(path, format!("line {line}: {m}"));
        if row.len() != 3 {
            return Err(bad("expected 3 columns".into()));
        }
        let anchor_time = parse_day(&row[1]).map_err(bad)?;
        let label: usize = row[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("bad label {:?}", &row[2])))?;
        if label == 0 || n_classes.is_some_and(|l| label > l) {
            return Err(bad(format!("label {label} out of range")));
        }
        out.push(EvaluationPoint {
            patient_id: row[0].trim().to_string(),
            anchor_time,
            label,
            horizon_days: DEFAULT_HORIZON_DAYS,
        });
    }
    Ok(out)
}

pub fn write_labels(points: &[EvaluationPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "anchor_time", "label"])?;
    for p in points {
        w.write_record([
            p.patient_id.as_str(),
            &p.anchor_time.to_string(),
            &p.label.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Labels each anchor with the highest class reached inside
/// `(anchor, anchor + horizon]`, using a code -> class lookup. Anchors with
/// no matching event get class 1.
pub fn assign_labels(
    log: &EventLog,
    lookup: &BTreeMap<String, usize>,
    anchors: &[(String, i64)],
    horizon_days: u32,
) -> Vec<EvaluationPoint> {
    anchors
        .iter()
        .map(|(pid, anchor)| {
            let end = anchor + horizon_days as i64;
            let label = log
                .patient_records(pid)
                .iter()
                .filter(|r| r.event_time > *anchor && r.event_time <= end)
                .filter_map(|r| lookup.get(&r.code).copied())
                .max()
                .unwrap_or(1);
            EvaluationPoint {
                patient_id: pid.clone(),
                anchor_time: *anchor,
                label,
                horizon_days,
            }
        })
        .collect()
}

/// Sparse `(event type, days before anchor) -> value` image of one
/// patient's history at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct EventMatrix {
    pub point: EvaluationPoint,
    pub history_days: u32,
    entries: BTreeMap<EventType, BTreeMap<u32, f64>>,
}

impl EventMatrix {
    pub fn empty(point: EvaluationPoint, history_days: u32) -> Self {
        Self {
            point,
            history_days,
            entries: BTreeMap::new(),
        }
    }

    /// Keeps events with `0 <= anchor - time <= history_days`; same-day
    /// events of one type are summed.
    pub fn build(point: &EvaluationPoint, records: &[EventRecord], history_days: u32) -> Self {
        let mut m = Self::empty(point.clone(), history_days);
        for r in records {
            m.add(&r.event_type(), point.anchor_time - r.event_time, r.value);
        }
        m
    }

    /// Adds `value` at `days_before` the anchor. Out-of-window offsets are ignored.
    pub fn add(&mut self, event_type: &EventType, days_before: i64, value: f64) {
        if days_before < 0 || days_before > self.history_days as i64 {
            return;
        }
        if !(value.is_finite() && value >= 0.0) {
            return;
        }
        let series = match self.entries.get_mut(event_type) {
            Some(s) => s,
            None => self.entries.entry(event_type.clone()).or_default(),
        };
        *series.entry(days_before as u32).or_insert(0.0) += value;
    }

    pub fn series(&self, event_type: &EventType) -> Option<&BTreeMap<u32, f64>> {
        self.entries.get(event_type)
    }

    pub fn event_types(&self) -> impl Iterator<Item = &EventType> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EventType, &BTreeMap<u32, f64>)> {
        self.entries.iter()
    }

    pub fn nnz(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    /// Number of stored (day, value) cells per event type.
    pub fn occurrences(&self) -> BTreeMap<EventType, u64> {
        self.entries
            .iter()
            .map(|(t, s)| (t.clone(), s.len() as u64))
            .collect()
    }

    pub fn without(&self, dropped: &BTreeSet<EventType>) -> Self {
        let mut m = self.clone();
        m.entries.retain(|t, _| !dropped.contains(t));
        m
    }
}

/// Drop-list of rare event types, fitted on a training corpus only.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RareCodeFilter {
    pub min_occurrences: u64,
    pub dropped: BTreeSet<EventType>,
}

impl RareCodeFilter {
    /// Drops every type occurring `<= min_occurrences` times in `train`.
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a EventMatrix>, min_occurrences: u64) -> Self {
        let mut counts: BTreeMap<EventType, u64> = BTreeMap::new();
        for m in train {
            for (t, c) in m.occurrences() {
                *counts.entry(t).or_insert(0) += c;
            }
        }
        Self::from_counts(&counts, min_occurrences)
    }

    pub fn from_counts(counts: &BTreeMap<EventType, u64>, min_occurrences: u64) -> Self {
        let dropped = counts
            .iter()
            .filter(|(_, c)| **c <= min_occurrences)
            .map(|(t, _)| t.clone())
            .collect();
        Self {
            min_occurrences,
            dropped,
        }
    }

    pub fn apply(&self, m: &EventMatrix) -> EventMatrix {
        m.without(&self.dropped)
    }

    pub fn keeps(&self, t: &EventType) -> bool {
        !self.dropped.contains(t)
    }
}

/// Removes event types occurring `<= min_occurrences` times across the corpus.
pub fn filter_rare_codes(
    corpus: &[EventMatrix],
    min_occurrences: u64,
) -> Result<(Vec<EventMatrix>, Vec<EventType>)> {
    if min_occurrences < 1 {
        return Err(Error::InvalidArgument("min_occurrences must be >= 1".into()));
    }
    let filter = RareCodeFilter::fit(corpus, min_occurrences);
    let kept = corpus.iter().map(|m| filter.apply(m)).collect();
    Ok((kept, filter.dropped.into_iter().collect()))
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

/// Serializes a matrix collection.
///
/// Layout (little endian): magic `ORDSTEVM`, `u32` version, `u64` count, then
/// per matrix: patient id, `i64` anchor, `u32` label, `u32` horizon, `u32`
/// history, `u32` type count; per type: `u8` channel, code, `u32` cell
/// count, cells as (`u32` day, `f64` value). Strings are `u32` length +
/// UTF-8 bytes.
pub fn encode_matrices(matrices: &[EventMatrix]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrices.len() as u64).to_le_bytes());
    for m in matrices {
        put_str(&mut out, &m.point.patient_id);
        out.extend_from_slice(&m.point.anchor_time.to_le_bytes());
        out.extend_from_slice(&(m.point.label as u32).to_le_bytes());
        out.extend_from_slice(&m.point.horizon_days.to_le_bytes());
        out.extend_from_slice(&m.history_days.to_le_bytes());
        out.extend_from_slice(&(m.entries.len() as u32).to_le_bytes());
        for (t, series) in &m.entries {
            out.push(t.channel.tag());
            put_str(&mut out, &t.code);
            out.extend_from_slice(&(series.len() as u32).to_le_bytes());
            for (h, v) in series {
                out.extend_from_slice(&h.to_le_bytes());
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        if self.pos + n > self.buf.len() {
            return Err("truncated matrix file".into());
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| "invalid UTF-8".to_string())
    }
}

pub fn decode_matrices(buf: &[u8]) -> Result<Vec<EventMatrix>, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MATRIX_MAGIC {
        return Err("not an event matrix file (bad magic)".into());
    }
    let version = c.u32()?;
    if version != MATRIX_VERSION {
        return Err(format!("unsupported matrix file version {version}"));
    }
    let n = c.u64()? as usize;
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let patient_id = c.string()?;
        let anchor_time = c.u64()? as i64;
        let label = c.u32()? as usize;
        let horizon_days = c.u32()?;
        let history_days = c.u32()?;
        let n_types = c.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..n_types {
            let channel = Channel::from_tag(c.u8()?).ok_or("bad channel tag")?;
            let code = c.string()?;
            let cells = c.u32()?;
            let mut series = BTreeMap::new();
            for _ in 0..cells {
                let h = c.u32()?;
                let v = f64::from_bits(c.u64()?);
                series.insert(h, v);
            }
            entries.insert(EventType { channel, code }, series);
        }
        out.push(EventMatrix {
            point: EvaluationPoint {
                patient_id,
                anchor_time,
                label,
                horizon_days,
            },
            history_days,
            entries,
        });
    }
    if c.pos != buf.len() {
        return Err("trailing bytes after matrix collection".into());
    }
    Ok(out)
}

pub fn write_matrices(matrices: &[EventMatrix], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_matrices(matrices))
        .map_err(|e| Error::io(path, e))
}

pub fn read_matrices(path: &Path) -> Result<Vec<EventMatrix>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrices(&buf).map_err(|m| Error::format(path, m))
}
