//! Feature assembly: session log + catalog + content vectors into aligned
//! rank-3 model inputs with categorical encoding, [0,1] scaling, mean
//! imputation, geo lookup, and per-(user, subject) fixed-length windows.
//!
//! Column layouts are fixed here and nowhere else.
//!
//! User metadata, 13 columns:
//!   0 day-of-week (categorical), 1 hour-of-day, 2 session-length,
//!   3 latitude, 4 longitude, 5 term-language (categorical),
//!   6 definition-language (categorical), 7 platform (categorical),
//!   8 begin-timestamp, 9 end-timestamp, 10 study-date,
//!   11 user-tenure-days, 12 session-count
//!
//! Set metadata, 12 columns:
//!   0 broad-subject (categorical), 1 studier-count, 2 mean-studier-age,
//!   3 term-language (categorical), 4 definition-language (categorical),
//!   5 total-views, 6 has-images, 7 has-diagrams,
//!   8 study-mode (categorical), 9 platform (categorical),
//!   10 mean-session-length, 11 views-per-studier
//!
//! Non-categorical, non-boolean columns are min-max scaled to [0,1] with
//! clipping; missing values take the training mean before scaling.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{NereError, Result};
use crate::synthgen::{geo_lookup, SessionLog, SetRecord, UserSessionRecord};

pub const USER_META_COLS: usize = 13;
pub const SET_META_COLS: usize = 12;
pub const DEFAULT_WINDOW: usize = 5;

/// Column indices holding encoder outputs rather than scaled values.
pub const USER_CATEGORICAL_COLS: [usize; 4] = [0, 5, 6, 7];
pub const SET_CATEGORICAL_COLS: [usize; 5] = [0, 3, 4, 8, 9];

/// Encoder fields in (tensor, column) order.
pub const USER_CATEGORICAL_FIELDS: [&str; 4] = [
    "user.day_of_week",
    "user.term_language",
    "user.definition_language",
    "user.platform",
];
pub const SET_CATEGORICAL_FIELDS: [&str; 5] = [
    "set.broad_subject",
    "set.term_language",
    "set.definition_language",
    "set.study_mode",
    "set.platform",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CategoricalEncoder {
    fields: BTreeMap<String, BTreeMap<String, i64>>,
}

impl CategoricalEncoder {
    /// Register a category, assigning the next dense index in first-seen
    /// order. Index 0 stays reserved for unknown values.
    pub fn observe(&mut self, field: &str, category: &str) {
        let map = self.fields.entry(field.to_string()).or_default();
        if !map.contains_key(category) {
            let next = map.len() as i64 + 1;
            map.insert(category.to_string(), next);
        }
    }

    /// Dense index of a category; 0 for anything unseen during fitting.
    pub fn encode(&self, field: &str, category: &str) -> i64 {
        self.fields
            .get(field)
            .and_then(|m| m.get(category))
            .copied()
            .unwrap_or(0)
    }

    /// Number of known categories (the unknown index is extra).
    pub fn cardinality(&self, field: &str) -> usize {
        self.fields.get(field).map(|m| m.len()).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContinuousScaler {
    stats: BTreeMap<String, FeatureStats>,
}

impl ContinuousScaler {
    pub fn fit_feature(&mut self, name: &str, values: &[f64]) {
        if values.is_empty() {
            return;
        }
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for &v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
        }
        self.stats.insert(
            name.to_string(),
            FeatureStats {
                min,
                max,
                mean: sum / values.len() as f64,
            },
        );
    }

    pub fn stats(&self, name: &str) -> Option<&FeatureStats> {
        self.stats.get(name)
    }

    pub fn scale(&self, name: &str, value: Option<f64>) -> Result<f64> {
        let stats = self.stats.get(name).ok_or_else(|| {
            NereError::State(format!("scaler has no statistics for feature `{name}`"))
        })?;
        Ok(transform_continuous(value, stats))
    }
}

/// Min-max map to [0,1] with clipping; a missing value takes the mean
/// first; a constant feature maps everything to 0.0.
pub fn transform_continuous(value: Option<f64>, stats: &FeatureStats) -> f64 {
    let v = value.unwrap_or(stats.mean);
    if stats.max <= stats.min {
        return 0.0;
    }
    ((v - stats.min) / (stats.max - stats.min)).clamp(0.0, 1.0)
}

/// Latitude/longitude of an obfuscated /24 prefix. Unmapped prefixes
/// fall back to (0, 0) with a warning on stderr.
pub fn geo_features(obfuscated_ip: &str) -> (f64, f64) {
    match geo_lookup(obfuscated_ip) {
        Some(pair) => pair,
        None => {
            eprintln!("warning: no geo entry for ip prefix {obfuscated_ip}; using (0, 0)");
            (0.0, 0.0)
        }
    }
}

fn date_to_days(date: &str) -> Result<i64> {
    let parts: Vec<&str> = date.split('-').collect();
    let bad = || NereError::Precondition(format!("bad study date `{date}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let y: i64 = parts[0].parse().map_err(|_| bad())?;
    let m: i64 = parts[1].parse().map_err(|_| bad())?;
    let d: i64 = parts[2].parse().map_err(|_| bad())?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    // days-from-civil (Gregorian)
    let y = if m <= 2 { y - 1 } else { y };
    let era = if y >= 0 { y } else { y - 399 } / 400;
    let yoe = y - era * 400;
    let mp = if m > 2 { m - 3 } else { m + 9 };
    let doy = (153 * mp + 2) / 5 + d - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    Ok(era * 146_097 + doe - 719_468)
}

fn day_of_week(end_timestamp: i64) -> i64 {
    // epoch day 0 was a Thursday
    (end_timestamp.div_euclid(86_400) + 4).rem_euclid(7)
}

/// Raw (unscaled) per-session user features, computed against the user's
/// full chronological history.
#[derive(Debug, Clone)]
struct RawUserRow {
    day_of_week: String,
    hour_of_day: f64,
    session_length: f64,
    latitude: f64,
    longitude: f64,
    term_language: String,
    definition_language: String,
    platform: String,
    begin_ts: f64,
    end_ts: f64,
    study_days: f64,
    tenure_days: f64,
    session_count: f64,
}

const USER_CONTINUOUS: [&str; 9] = [
    "user.hour_of_day",
    "user.session_length",
    "user.latitude",
    "user.longitude",
    "user.begin_ts",
    "user.end_ts",
    "user.study_days",
    "user.tenure_days",
    "user.session_count",
];

const SET_CONTINUOUS: [&str; 5] = [
    "set.studier_count",
    "set.mean_studier_age",
    "set.total_views",
    "set.mean_session_length",
    "set.views_per_studier",
];

fn views_per_studier(set: &SetRecord) -> f64 {
    set.total_views as f64 / (set.studier_count.max(1) as f64)
}

fn session_sort_key(s: &UserSessionRecord) -> (i64, u64) {
    (s.end_timestamp, s.set_id)
}

/// Derive per-session raw rows, keyed back to the log by a stable index
/// list sorted by user then (end timestamp, set id).
fn derive_user_rows(log: &SessionLog) -> Result<BTreeMap<(u64, i64, u64), RawUserRow>> {
    let mut by_user: BTreeMap<u64, Vec<&UserSessionRecord>> = BTreeMap::new();
    for s in log {
        by_user.entry(s.user_id).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for sessions in by_user.values_mut() {
        sessions.sort_by_key(|s| session_sort_key(s));
        let first_begin = sessions.iter().map(|s| s.begin_timestamp).min().unwrap();
        for (idx, s) in sessions.iter().enumerate() {
            let (lat, lon) = geo_features(&s.obfuscated_ip);
            let row = RawUserRow {
                day_of_week: day_of_week(s.end_timestamp).to_string(),
                hour_of_day: (s.end_timestamp.rem_euclid(86_400) / 3_600) as f64,
                session_length: s.session_length,
                latitude: lat,
                longitude: lon,
                term_language: s.preferred_term_language.clone(),
                definition_language: s.preferred_definition_language.clone(),
                platform: s.preferred_platform.clone(),
                begin_ts: s.begin_timestamp as f64,
                end_ts: s.end_timestamp as f64,
                study_days: date_to_days(&s.study_date)? as f64,
                tenure_days: (s.end_timestamp - first_begin) as f64 / 86_400.0,
                session_count: (idx + 1) as f64,
            };
            out.insert((s.user_id, s.end_timestamp, s.set_id), row);
        }
    }
    Ok(out)
}

/// Fit the categorical encoder and continuous scaler from a log and
/// catalog (the training split).
pub fn fit_encoders(
    log: &SessionLog,
    catalog: &[SetRecord],
) -> Result<(CategoricalEncoder, ContinuousScaler)> {
    if log.is_empty() {
        return Err(NereError::Precondition(
            "cannot fit encoders on an empty session log".into(),
        ));
    }
    let rows = derive_user_rows(log)?;
    let mut enc = CategoricalEncoder::default();
    let mut user_values: BTreeMap<&str, Vec<f64>> =
        USER_CONTINUOUS.iter().map(|n| (*n, Vec::new())).collect();
    // observe in log order so first-seen indexing is reproducible
    for s in log {
        let row = &rows[&(s.user_id, s.end_timestamp, s.set_id)];
        enc.observe("user.day_of_week", &row.day_of_week);
        enc.observe("user.term_language", &row.term_language);
        enc.observe("user.definition_language", &row.definition_language);
        enc.observe("user.platform", &row.platform);
        user_values.get_mut("user.hour_of_day").unwrap().push(row.hour_of_day);
        user_values
            .get_mut("user.session_length")
            .unwrap()
            .push(row.session_length);
        user_values.get_mut("user.latitude").unwrap().push(row.latitude);
        user_values.get_mut("user.longitude").unwrap().push(row.longitude);
        user_values.get_mut("user.begin_ts").unwrap().push(row.begin_ts);
        user_values.get_mut("user.end_ts").unwrap().push(row.end_ts);
        user_values.get_mut("user.study_days").unwrap().push(row.study_days);
        user_values.get_mut("user.tenure_days").unwrap().push(row.tenure_days);
        user_values
            .get_mut("user.session_count")
            .unwrap()
            .push(row.session_count);
    }
    let mut scaler = ContinuousScaler::default();
    for name in USER_CONTINUOUS {
        scaler.fit_feature(name, &user_values[name]);
    }
    let mut set_values: BTreeMap<&str, Vec<f64>> =
        SET_CONTINUOUS.iter().map(|n| (*n, Vec::new())).collect();
    for set in catalog {
        enc.observe("set.broad_subject", &set.broad_subject);
        enc.observe("set.term_language", &set.term_language);
        enc.observe("set.definition_language", &set.definition_language);
        enc.observe("set.study_mode", &set.preferred_study_mode);
        enc.observe("set.platform", &set.preferred_platform);
        set_values
            .get_mut("set.studier_count")
            .unwrap()
            .push(set.studier_count as f64);
        set_values
            .get_mut("set.mean_studier_age")
            .unwrap()
            .push(set.mean_studier_age);
        set_values
            .get_mut("set.total_views")
            .unwrap()
            .push(set.total_views as f64);
        set_values
            .get_mut("set.mean_session_length")
            .unwrap()
            .push(set.mean_session_length);
        set_values
            .get_mut("set.views_per_studier")
            .unwrap()
            .push(views_per_studier(set));
    }
    for name in SET_CONTINUOUS {
        scaler.fit_feature(name, &set_values[name]);
    }
    Ok((enc, scaler))
}

fn user_feature_row(
    raw: &RawUserRow,
    enc: &CategoricalEncoder,
    scaler: &ContinuousScaler,
) -> Result<[f64; USER_META_COLS]> {
    Ok([
        enc.encode("user.day_of_week", &raw.day_of_week) as f64,
        scaler.scale("user.hour_of_day", Some(raw.hour_of_day))?,
        scaler.scale("user.session_length", Some(raw.session_length))?,
        scaler.scale("user.latitude", Some(raw.latitude))?,
        scaler.scale("user.longitude", Some(raw.longitude))?,
        enc.encode("user.term_language", &raw.term_language) as f64,
        enc.encode("user.definition_language", &raw.definition_language) as f64,
        enc.encode("user.platform", &raw.platform) as f64,
        scaler.scale("user.begin_ts", Some(raw.begin_ts))?,
        scaler.scale("user.end_ts", Some(raw.end_ts))?,
        scaler.scale("user.study_days", Some(raw.study_days))?,
        scaler.scale("user.tenure_days", Some(raw.tenure_days))?,
        scaler.scale("user.session_count", Some(raw.session_count))?,
    ])
}

fn set_feature_row(
    set: &SetRecord,
    enc: &CategoricalEncoder,
    scaler: &ContinuousScaler,
) -> Result<[f64; SET_META_COLS]> {
    Ok([
        enc.encode("set.broad_subject", &set.broad_subject) as f64,
        scaler.scale("set.studier_count", Some(set.studier_count as f64))?,
        scaler.scale("set.mean_studier_age", Some(set.mean_studier_age))?,
        enc.encode("set.term_language", &set.term_language) as f64,
        enc.encode("set.definition_language", &set.definition_language) as f64,
        scaler.scale("set.total_views", Some(set.total_views as f64))?,
        if set.has_images { 1.0 } else { 0.0 },
        if set.has_diagrams { 1.0 } else { 0.0 },
        enc.encode("set.study_mode", &set.preferred_study_mode) as f64,
        enc.encode("set.platform", &set.preferred_platform) as f64,
        scaler.scale("set.mean_session_length", Some(set.mean_session_length))?,
        scaler.scale("set.views_per_studier", Some(views_per_studier(set)))?,
    ])
}

#[derive(Debug, Clone, Default)]
pub struct SequenceTensorTriple {
    /// [n, t, 13] row-major
    pub user_meta: Vec<f64>,
    /// [n, t, 12] row-major
    pub set_meta: Vec<f64>,
    /// [n, t, content_dim] row-major
    pub set_content: Vec<f64>,
    /// [n, content_dim]
    pub target: Vec<f64>,
    pub row_keys: Vec<(u64, String)>,
    /// [n][t] set ids of all t sessions in each window; the last entry is
    /// the target session's set
    pub step_set_ids: Vec<Vec<u64>>,
    pub n: usize,
    pub t: usize,
    pub content_dim: usize,
}

/// Group sessions by (user, subject), sort each group by ending
/// timestamp with set-id tiebreak, cut non-overlapping windows of `t`
/// consecutive sessions. Input tensors carry the first t−1 sessions and
/// a zero-padded final step; the target is the content vector of the
/// window's last session.
pub fn assemble_sequences(
    log: &SessionLog,
    catalog: &[SetRecord],
    set_vectors: &BTreeMap<u64, Vec<f64>>,
    enc: &CategoricalEncoder,
    scaler: &ContinuousScaler,
    t: usize,
) -> Result<SequenceTensorTriple> {
    if t < 2 {
        return Err(NereError::Config(format!(
            "window length must be at least 2, got {t}"
        )));
    }
    let content_dim = set_vectors
        .values()
        .next()
        .map(|v| v.len())
        .ok_or_else(|| NereError::Precondition("set vector table is empty".into()))?;
    let sets: BTreeMap<u64, &SetRecord> = catalog.iter().map(|s| (s.set_id, s)).collect();
    let raw_rows = derive_user_rows(log)?;
    let mut groups: BTreeMap<(u64, String), Vec<&UserSessionRecord>> = BTreeMap::new();
    for s in log {
        groups
            .entry((s.user_id, s.broad_subject.clone()))
            .or_default()
            .push(s);
    }
    let mut out = SequenceTensorTriple {
        t,
        content_dim,
        ..Default::default()
    };
    for ((user_id, subject), mut sessions) in groups {
        sessions.sort_by_key(|s| session_sort_key(s));
        for window in sessions.chunks_exact(t) {
            for (step, s) in window.iter().enumerate() {
                if step + 1 == t {
                    // zero padding for the target step
                    out.user_meta.extend(std::iter::repeat_n(0.0, USER_META_COLS));
                    out.set_meta.extend(std::iter::repeat_n(0.0, SET_META_COLS));
                    out.set_content.extend(std::iter::repeat_n(0.0, content_dim));
                    continue;
                }
                let raw = &raw_rows[&(s.user_id, s.end_timestamp, s.set_id)];
                out.user_meta.extend(user_feature_row(raw, enc, scaler)?);
                let set = sets.get(&s.set_id).ok_or_else(|| {
                    NereError::Precondition(format!("session references unknown set {}", s.set_id))
                })?;
                out.set_meta.extend(set_feature_row(set, enc, scaler)?);
                let vec = set_vectors.get(&s.set_id).ok_or_else(|| {
                    NereError::Precondition(format!("no content vector for set {}", s.set_id))
                })?;
                if vec.len() != content_dim {
                    return Err(NereError::Shape(format!(
                        "content vector for set {} has dim {}, expected {content_dim}",
                        s.set_id,
                        vec.len()
                    )));
                }
                out.set_content.extend_from_slice(vec);
            }
            let last = window[t - 1];
            let target_vec = set_vectors.get(&last.set_id).ok_or_else(|| {
                NereError::Precondition(format!("no content vector for set {}", last.set_id))
            })?;
            out.target.extend_from_slice(target_vec);
            out.row_keys.push((user_id, subject.clone()));
            out.step_set_ids.push(window.iter().map(|s| s.set_id).collect());
            out.n += 1;
        }
    }
    Ok(out)
}

/// The most recent sessions of one (user, subject) group, encoded as
/// feature rows ready to feed the model.
#[derive(Debug, Clone)]
pub struct LatestWindow {
    pub user_id: u64,
    pub subject: String,
    /// [steps][13]
    pub user: Vec<Vec<f64>>,
    /// [steps][12]
    pub set: Vec<Vec<f64>>,
    /// [steps][content_dim]
    pub content: Vec<Vec<f64>>,
}

/// For each (user, subject) group with at least `steps` sessions, encode
/// the most recent `steps` sessions. Groups shorter than `steps` are
/// skipped.
pub fn latest_windows(
    log: &SessionLog,
    catalog: &[SetRecord],
    set_vectors: &BTreeMap<u64, Vec<f64>>,
    enc: &CategoricalEncoder,
    scaler: &ContinuousScaler,
    steps: usize,
) -> Result<Vec<LatestWindow>> {
    if steps < 1 {
        return Err(NereError::Config("window must cover at least 1 step".into()));
    }
    let sets: BTreeMap<u64, &SetRecord> = catalog.iter().map(|s| (s.set_id, s)).collect();
    let raw_rows = derive_user_rows(log)?;
    let mut groups: BTreeMap<(u64, String), Vec<&UserSessionRecord>> = BTreeMap::new();
    for s in log {
        groups
            .entry((s.user_id, s.broad_subject.clone()))
            .or_default()
            .push(s);
    }
    let mut out = Vec::new();
    for ((user_id, subject), mut sessions) in groups {
        if sessions.len() < steps {
            continue;
        }
        sessions.sort_by_key(|s| session_sort_key(s));
        let tail = &sessions[sessions.len() - steps..];
        let mut window = LatestWindow {
            user_id,
            subject,
            user: Vec::with_capacity(steps),
            set: Vec::with_capacity(steps),
            content: Vec::with_capacity(steps),
        };
        for s in tail {
            let raw = &raw_rows[&(s.user_id, s.end_timestamp, s.set_id)];
            window.user.push(user_feature_row(raw, enc, scaler)?.to_vec());
            let set = sets.get(&s.set_id).ok_or_else(|| {
                NereError::Precondition(format!("session references unknown set {}", s.set_id))
            })?;
            window.set.push(set_feature_row(set, enc, scaler)?.to_vec());
            let vec = set_vectors.get(&s.set_id).ok_or_else(|| {
                NereError::Precondition(format!("no content vector for set {}", s.set_id))
            })?;
            window.content.push(vec.clone());
        }
        out.push(window);
    }
    Ok(out)
}

/// Write `tensor <rank> <d1> ... <dk>` then the values as little-endian
/// 32-bit floats.
pub fn save_tensor(path: &Path, shape: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = shape.iter().product();
    if data.len() != expect {
        return Err(NereError::Shape(format!(
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        )));
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write!(w, "tensor {}", shape.len())?;
    for d in shape {
        write!(w, " {d}")?;
    }
    writeln!(w)?;
    for &v in data {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let fmt_err = |msg: String| NereError::Format {
        path: path.display().to_string(),
        line: 1,
        msg,
    };
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() < 2 || parts[0] != "tensor" {
        return Err(fmt_err("expected `tensor <rank> <dims...>` header".into()));
    }
    let rank: usize = parts[1]
        .parse()
        .map_err(|_| fmt_err("bad rank".into()))?;
    if parts.len() != rank + 2 {
        return Err(fmt_err(format!(
            "header lists {} dims, rank says {rank}",
            parts.len() - 2
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for p in &parts[2..] {
        shape.push(p.parse().map_err(|_| fmt_err("bad dimension".into()))?);
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for i in 0..count {
        r.read_exact(&mut buf).map_err(|_| NereError::Format {
            path: path.display().to_string(),
            line: 2,
            msg: format!("truncated after {i} of {count} values"),
        })?;
        data.push(f32::from_le_bytes(buf) as f64);
    }
    Ok((shape, data))
}

/// Sidecar file: one `user_id<TAB>subject` line per tensor row.
pub fn save_row_keys(path: &Path, keys: &[(u64, String)]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (user, subject) in keys {
        writeln!(w, "{user}\t{subject}")?;
    }
    Ok(())
}

pub fn load_row_keys(path: &Path) -> Result<Vec<(u64, String)>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        let (user, subject) = line.split_once('\t').ok_or_else(|| NereError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: "expected `user_id<TAB>subject`".into(),
        })?;
        let user = user.parse().map_err(|_| NereError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: "bad user id".into(),
        })?;
        out.push((user, subject.to_string()));
    }
    Ok(out)
}
