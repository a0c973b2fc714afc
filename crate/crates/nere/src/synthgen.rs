//! Deterministic synthetic catalog and study-session log generator.
//!
//! The catalog is one long curriculum: topics tile a global token chain
//! (each topic's text slides along it at a per-topic pace), subjects
//! are contiguous blocks of topics with heavily skewed sizes, and each
//! set's text carries coarse curriculum milestone labels of its catalog
//! position. Set metadata is a deterministic function of (subject,
//! chapter, pace) only, so it locates a set's position inside its topic
//! but never identifies the topic itself; content does the opposite.
//! Users march
//! forward through the chain (fresh material, not revisits) with a
//! per-user stride carried by their geo features, advance sequentially
//! with probability `sequentiality`, re-anchor to a random same-subject
//! set otherwise, and with probability `distraction` a session is a
//! one-off detour to a random same-subject set after which the march
//! resumes where it left off (so longer histories help).

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NereError, Result};

/// The 17 broad subjects.
pub const SUBJECTS: &[&str] = &[
    "theology",
    "history",
    "uncommon_languages",
    "communications",
    "formal_sciences",
    "visual_arts",
    "social_sciences",
    "applied_sciences",
    "vocabulary",
    "german",
    "performing_arts",
    "sports",
    "french",
    "reading_vocabulary",
    "spanish",
    "natural_sciences",
    "geography",
];

pub const LANGUAGES: &[&str] = &[
    "english", "spanish", "french", "german", "latin", "italian", "japanese", "portuguese",
];

pub const PLATFORMS: &[&str] = &["web", "ios", "android"];

pub const STUDY_MODES: &[&str] = &["flashcards", "learn", "write", "spell", "test", "match"];

/// Relative catalog share of each subject, aligned with SUBJECTS. Heavily
/// skewed: language and vocabulary study dominates the catalog the way it
/// dominates real flashcard traffic.
pub const SUBJECT_WEIGHTS: &[u32] = &[
    4, 6, 4, 4, 4, 4, 6, 5, 96, 12, 4, 4, 18, 14, 24, 6, 4,
];

// Pace of the vocabulary window per chapter, in chain tokens.
const PACE_SLOW: usize = 8;
const PACE_FAST: usize = 24;
const WINDOW_TOKENS: usize = 25;
const TOKENS_PER_SET: usize = 12;
const TOPIC_TOKENS: usize = 4;
const TOPIC_TOKENS_PER_SET: usize = 3;
/// Catalog positions per curriculum milestone block.
const MILESTONE_GRID: usize = 16;
const MILESTONE_TOKENS_PER_SET: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetRecord {
    pub set_id: u64,
    pub terms: String,
    pub definitions: String,
    pub studier_count: u64,
    pub broad_subject: String,
    pub mean_studier_age: f64,
    pub term_language: String,
    pub definition_language: String,
    pub total_views: u64,
    pub has_images: bool,
    pub has_diagrams: bool,
    pub preferred_study_mode: String,
    pub preferred_platform: String,
    pub mean_session_length: f64,
    pub topic_id: u64,
    pub chapter_index: u64,
}

impl SetRecord {
    /// Blank record for tests and builders.
    pub fn placeholder() -> Self {
        SetRecord {
            set_id: 0,
            terms: String::new(),
            definitions: String::new(),
            studier_count: 0,
            broad_subject: SUBJECTS[0].to_string(),
            mean_studier_age: 13.0,
            term_language: LANGUAGES[0].to_string(),
            definition_language: LANGUAGES[0].to_string(),
            total_views: 0,
            has_images: false,
            has_diagrams: false,
            preferred_study_mode: STUDY_MODES[0].to_string(),
            preferred_platform: PLATFORMS[0].to_string(),
            mean_session_length: 1.0,
            topic_id: 0,
            chapter_index: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSessionRecord {
    pub user_id: u64,
    pub set_id: u64,
    pub broad_subject: String,
    pub begin_timestamp: i64,
    pub end_timestamp: i64,
    pub session_length: f64,
    pub obfuscated_ip: String,
    pub preferred_term_language: String,
    pub preferred_definition_language: String,
    pub preferred_platform: String,
    pub study_date: String,
}

pub type SessionLog = Vec<UserSessionRecord>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_sets: usize,
    pub n_topics: usize,
    pub chapters_per_topic: usize,
    pub sessions_per_user_min: usize,
    pub sessions_per_user_max: usize,
    pub sequentiality: f64,
    pub distraction: f64,
    pub vocab_size: usize,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 56_000,
            n_sets: 2000,
            n_topics: 250,
            chapters_per_topic: 8,
            sessions_per_user_min: 5,
            sessions_per_user_max: 7,
            sequentiality: 0.9,
            distraction: 0.15,
            vocab_size: 6000,
            rng_seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_users", self.n_users),
            ("n_sets", self.n_sets),
            ("n_topics", self.n_topics),
            ("chapters_per_topic", self.chapters_per_topic),
            ("sessions_per_user_min", self.sessions_per_user_min),
            ("sessions_per_user_max", self.sessions_per_user_max),
            ("vocab_size", self.vocab_size),
        ] {
            if v < 1 {
                return Err(NereError::Config(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.sequentiality) {
            return Err(NereError::Config("sequentiality must lie in [0,1]".into()));
        }
        if !(0.0..1.0).contains(&self.distraction) {
            return Err(NereError::Config("distraction must lie in [0,1)".into()));
        }
        if self.sessions_per_user_max < self.sessions_per_user_min {
            return Err(NereError::Config(
                "sessions_per_user_max < sessions_per_user_min".into(),
            ));
        }
        if self.n_sets != self.n_topics * self.chapters_per_topic {
            return Err(NereError::Config(format!(
                "n_sets ({}) must equal n_topics * chapters_per_topic ({})",
                self.n_sets,
                self.n_topics * self.chapters_per_topic
            )));
        }
        Ok(())
    }
}

fn chain_token(i: usize, vocab_size: usize) -> String {
    format!("w{:05}", i % vocab_size)
}

fn topic_token(topic: usize, slot: usize) -> String {
    format!("t{:04}x{}", topic, slot)
}

/// Curriculum milestone tokens: the set's catalog position at two
/// offset coarse grids, the way real sets carry "unit 12" style labels.
/// Adjacent blocks share one of the two tokens, so positional
/// similarity between sets decays smoothly over about one block.
fn milestone_tokens(set_id: usize) -> (String, String) {
    let a = set_id / MILESTONE_GRID;
    let b = (set_id + MILESTONE_GRID / 2) / MILESTONE_GRID;
    (format!("unit{:03}", a), format!("goal{:03}", b))
}

/// Deterministic synthetic geolocation of a `10.a.b` /24 prefix.
pub fn geo_for_prefix(a: u8, b: u8) -> (f64, f64) {
    let lat = -60.0 + a as f64 * (120.0 / 255.0);
    let lon = -180.0 + b as f64 * (360.0 / 255.0) + a as f64 * 0.1;
    (lat, lon)
}

/// Parse "10.a.b.0" and return its planted coordinates; anything else is
/// unmapped.
pub fn geo_lookup(obfuscated_ip: &str) -> Option<(f64, f64)> {
    let parts: Vec<&str> = obfuscated_ip.split('.').collect();
    if parts.len() != 4 || parts[0] != "10" || parts[3] != "0" {
        return None;
    }
    let a: u8 = parts[1].parse().ok()?;
    let b: u8 = parts[2].parse().ok()?;
    Some(geo_for_prefix(a, b))
}

pub fn generate_catalog(config: &SynthConfig) -> Result<Vec<SetRecord>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let mut catalog = Vec::with_capacity(config.n_sets);
    // topics tile one global token chain back to back, so the text of
    // the last chapter of a topic is adjacent to the first chapter of
    // the next; subjects are contiguous topic blocks
    let mut chain_pos = 0usize;
    for topic in 0..config.n_topics {
        // alternate paces so every subject block mixes both
        let pace = if topic % 2 == 0 { PACE_SLOW } else { PACE_FAST };
        let offset = chain_pos;
        chain_pos += config.chapters_per_topic * pace;
        let subject_idx = subject_for_topic(topic, config.n_topics);
        let subject = SUBJECTS[subject_idx];
        // age band encodes the pace so metadata carries it
        let age_base = if pace == PACE_FAST { 21.5 } else { 13.5 };
        for chapter in 1..=config.chapters_per_topic {
            let set_id = (topic * config.chapters_per_topic + chapter - 1) as u64;
            let pos = offset + (chapter - 1) * pace;
            let mut tokens = Vec::with_capacity(TOKENS_PER_SET + TOPIC_TOKENS_PER_SET);
            for _ in 0..TOKENS_PER_SET {
                let off = rng.gen_range(0..WINDOW_TOKENS);
                tokens.push(chain_token(pos + off, config.vocab_size));
            }
            for _ in 0..TOPIC_TOKENS_PER_SET {
                tokens.push(topic_token(topic, rng.gen_range(0..TOPIC_TOKENS)));
            }
            let (unit_tok, goal_tok) = milestone_tokens(set_id as usize);
            for _ in 0..MILESTONE_TOKENS_PER_SET {
                tokens.push(unit_tok.clone());
                tokens.push(goal_tok.clone());
            }
            let half = tokens.len() / 2;
            let terms = tokens[..half].join(" ");
            let definitions = tokens[half..].join(" ");
            // metadata is a function of (subject, chapter, pace) only, so
            // it never fingerprints an individual set
            let fast = usize::from(pace == PACE_FAST);
            let studier_count = ((config.chapters_per_topic - chapter + 1) * 500) as u64;
            let record = SetRecord {
                set_id,
                terms,
                definitions,
                studier_count,
                broad_subject: subject.to_string(),
                mean_studier_age: age_base + chapter as f64 * 0.1,
                term_language: LANGUAGES[subject_idx % LANGUAGES.len()].to_string(),
                definition_language: LANGUAGES[(subject_idx + 3) % LANGUAGES.len()].to_string(),
                total_views: studier_count * 5,
                has_images: fast == 1,
                has_diagrams: chapter % 2 == 0,
                preferred_study_mode: STUDY_MODES[(chapter - 1) % STUDY_MODES.len()].to_string(),
                preferred_platform: PLATFORMS[(chapter + fast) % PLATFORMS.len()].to_string(),
                mean_session_length: 4.0 + chapter as f64 * 2.0 + fast as f64,
                topic_id: topic as u64,
                chapter_index: chapter as u64,
            };
            catalog.push(record);
        }
    }
    Ok(catalog)
}

/// Subject of a topic under the weighted contiguous-block layout.
pub fn subject_for_topic(topic: usize, n_topics: usize) -> usize {
    let total: u64 = SUBJECT_WEIGHTS.iter().map(|&w| w as u64).sum();
    let mut cum = 0u64;
    for (i, &w) in SUBJECT_WEIGHTS.iter().enumerate() {
        cum += w as u64;
        // topic t belongs to the first subject whose cumulative share
        // exceeds the topic's position in the catalog
        if ((topic as u64) * total) < cum * n_topics as u64 {
            return i;
        }
    }
    SUBJECT_WEIGHTS.len() - 1
}

/// Next set in the global chapter walk, wrapping at the catalog end.
pub fn successor_id(set: &SetRecord, n_sets: usize) -> u64 {
    strided_successor_id(set, n_sets, 1)
}

/// Set `stride` chapters ahead in the global walk.
pub fn strided_successor_id(set: &SetRecord, n_sets: usize, stride: usize) -> u64 {
    (set.set_id + stride as u64) % n_sets as u64
}

/// Chapters a user advances per session, spread over a wide range and
/// derived from the second octet of their obfuscated IP (so it is
/// carried by the user's continuous geo features, never by set content).
pub fn user_stride(ip_octet: u8) -> usize {
    36 + ip_octet as usize / 2
}

/// Stride recovered from an obfuscated `10.a.b.0` address.
pub fn user_stride_from_ip(obfuscated_ip: &str) -> Option<usize> {
    let parts: Vec<&str> = obfuscated_ip.split('.').collect();
    if parts.len() != 4 || parts[0] != "10" || parts[3] != "0" {
        return None;
    }
    Some(user_stride(parts[1].parse().ok()?))
}

fn days_to_date(days: i64) -> String {
    // civil-from-days (Gregorian), days since 1970-01-01
    let z = days + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!("{:04}-{:02}-{:02}", y, m, d)
}

pub fn generate_sessions(config: &SynthConfig, catalog: &[SetRecord]) -> Result<SessionLog> {
    if catalog.is_empty() {
        return Err(NereError::Precondition(
            "session generation needs a non-empty catalog".into(),
        ));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    // subject -> set indices
    let mut by_subject: Vec<Vec<usize>> = vec![Vec::new(); SUBJECTS.len()];
    for (i, s) in catalog.iter().enumerate() {
        let si = SUBJECTS.iter().position(|x| *x == s.broad_subject).ok_or_else(|| {
            NereError::Precondition(format!("unknown broad_subject `{}`", s.broad_subject))
        })?;
        by_subject[si].push(i);
    }
    let subject_slot: Vec<usize> = catalog
        .iter()
        .map(|s| SUBJECTS.iter().position(|x| *x == s.broad_subject).unwrap())
        .collect();

    let mut log = Vec::new();
    for user_id in 0..config.n_users as u64 {
        let n_sessions =
            rng.gen_range(config.sessions_per_user_min..=config.sessions_per_user_max);
        let term_lang = LANGUAGES[rng.gen_range(0..LANGUAGES.len())].to_string();
        let def_lang = LANGUAGES[rng.gen_range(0..LANGUAGES.len())].to_string();
        let platform = PLATFORMS[rng.gen_range(0..PLATFORMS.len())].to_string();
        let (ip_a, ip_b) = (rng.gen_range(0u8..=255), rng.gen_range(0u8..=255));
        let obfuscated_ip = format!("10.{}.{}.0", ip_a, ip_b);

        let stride = user_stride(ip_a);
        let mut chain = rng.gen_range(0..catalog.len());
        let mut clock: i64 = 1_600_000_000 + rng.gen_range(0..1_000_000);
        for _ in 0..n_sessions {
            let distracted = rng.gen_bool(config.distraction);
            // detours and re-anchors stay within the subject the march
            // is currently in
            let nearby = &by_subject[subject_slot[chain]];
            let current = if distracted {
                nearby[rng.gen_range(0..nearby.len())]
            } else {
                chain
            };
            let set = &catalog[current];
            let minutes = set.mean_session_length * rng.gen_range(0.5..1.5);
            let begin = clock;
            let end = begin + (minutes * 60.0).round() as i64;
            log.push(UserSessionRecord {
                user_id,
                set_id: set.set_id,
                broad_subject: set.broad_subject.clone(),
                begin_timestamp: begin,
                end_timestamp: end,
                session_length: (end - begin) as f64 / 60.0,
                obfuscated_ip: obfuscated_ip.clone(),
                preferred_term_language: term_lang.clone(),
                preferred_definition_language: def_lang.clone(),
                preferred_platform: platform.clone(),
                study_date: days_to_date(begin.div_euclid(86_400)),
            });
            clock = end + rng.gen_range(3_600..86_400);
            // a detour leaves the march untouched; otherwise the march
            // advances by the user's stride with probability
            // `sequentiality` and re-anchors within the subject otherwise
            if !distracted {
                chain = if rng.gen_bool(config.sequentiality) {
                    strided_successor_id(set, config.n_sets, stride) as usize
                } else {
                    nearby[rng.gen_range(0..nearby.len())]
                };
            }
        }
    }
    Ok(log)
}

pub fn write_jsonl<T: Serialize>(records: &[T], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: T = serde_json::from_str(&line).map_err(|e| NereError::Format {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn small_config() -> SynthConfig {
        SynthConfig {
            n_users: 60,
            n_sets: 100,
            n_topics: 10,
            chapters_per_topic: 10,
            sessions_per_user_min: 8,
            sessions_per_user_max: 12,
            sequentiality: 0.9,
            distraction: 0.0,
            vocab_size: 1200,
            rng_seed: 7,
        }
    }

    #[test]
    fn zero_sets_rejected() {
        let cfg = SynthConfig {
            n_sets: 0,
            ..small_config()
        };
        assert!(matches!(generate_catalog(&cfg), Err(NereError::Config(_))));
    }

    #[test]
    fn catalog_deterministic_and_well_formed() {
        let cfg = small_config();
        let a = generate_catalog(&cfg).unwrap();
        let b = generate_catalog(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), cfg.n_sets);
        let ids: HashSet<u64> = a.iter().map(|s| s.set_id).collect();
        assert_eq!(ids.len(), cfg.n_sets);
        for s in &a {
            assert!(!crate::textvec::tokenize(&s.terms).is_empty());
            assert!(!crate::textvec::tokenize(&s.definitions).is_empty());
            assert!(SUBJECTS.contains(&s.broad_subject.as_str()));
            assert!(s.mean_studier_age >= 13.0);
            assert!(s.chapter_index >= 1);
        }
    }

    #[test]
    fn within_topic_token_overlap_exceeds_across_topic() {
        let cfg = small_config();
        let catalog = generate_catalog(&cfg).unwrap();
        let token_sets: Vec<HashSet<String>> = catalog
            .iter()
            .map(|s| {
                let mut t: HashSet<String> =
                    crate::textvec::tokenize(&s.terms).into_iter().collect();
                t.extend(crate::textvec::tokenize(&s.definitions));
                t
            })
            .collect();
        let jaccard = |a: &HashSet<String>, b: &HashSet<String>| -> f64 {
            let inter = a.intersection(b).count() as f64;
            let union = a.union(b).count() as f64;
            inter / union
        };
        let mut within = (0.0, 0usize);
        let mut across = (0.0, 0usize);
        for i in 0..catalog.len() {
            for j in (i + 1)..catalog.len() {
                let jac = jaccard(&token_sets[i], &token_sets[j]);
                if catalog[i].topic_id == catalog[j].topic_id {
                    within.0 += jac;
                    within.1 += 1;
                } else {
                    across.0 += jac;
                    across.1 += 1;
                }
            }
        }
        let mw = within.0 / within.1 as f64;
        let ma = across.0 / across.1 as f64;
        assert!(mw > ma, "within {mw} across {ma}");
    }

    #[test]
    fn sessions_deterministic_and_monotone() {
        let cfg = small_config();
        let catalog = generate_catalog(&cfg).unwrap();
        let a = generate_sessions(&cfg, &catalog).unwrap();
        let b = generate_sessions(&cfg, &catalog).unwrap();
        assert_eq!(a, b);
        use std::collections::HashMap;
        let mut per_user: HashMap<u64, Vec<&UserSessionRecord>> = HashMap::new();
        for s in &a {
            per_user.entry(s.user_id).or_default().push(s);
        }
        for (_, sessions) in per_user {
            assert!(sessions.len() >= cfg.sessions_per_user_min);
            for w in sessions.windows(2) {
                assert!(w[1].begin_timestamp > w[0].begin_timestamp);
            }
            for s in sessions {
                assert!(s.end_timestamp >= s.begin_timestamp);
                let expect = (s.end_timestamp - s.begin_timestamp) as f64 / 60.0;
                assert!((s.session_length - expect).abs() < 1e-6);
                assert!(s.obfuscated_ip.ends_with(".0"));
            }
        }
    }

    #[test]
    fn full_sequentiality_walks_chapters() {
        let cfg = SynthConfig {
            sequentiality: 1.0,
            ..small_config()
        };
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_sessions(&cfg, &catalog).unwrap();
        use std::collections::HashMap;
        let by_id: HashMap<u64, &SetRecord> = catalog.iter().map(|s| (s.set_id, s)).collect();
        let mut per_user: HashMap<u64, Vec<&UserSessionRecord>> = HashMap::new();
        for s in &log {
            per_user.entry(s.user_id).or_default().push(s);
        }
        for (_, sessions) in per_user {
            for w in sessions.windows(2) {
                let prev = by_id[&w[0].set_id];
                let stride = user_stride_from_ip(&w[0].obfuscated_ip).unwrap();
                assert_eq!(
                    w[1].set_id,
                    strided_successor_id(prev, cfg.n_sets, stride),
                    "expected the strided chapter successor"
                );
            }
        }
    }

    #[test]
    fn zero_sequentiality_matches_chance_rate() {
        let cfg = SynthConfig {
            n_users: 600,
            sessions_per_user_min: 18,
            sessions_per_user_max: 22,
            sequentiality: 0.0,
            ..small_config()
        };
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_sessions(&cfg, &catalog).unwrap();
        let (rate, n, chance) = successor_rate(&cfg, &catalog, &log);
        assert!(n > 10_000);
        let se = (chance * (1.0 - chance) / n as f64).sqrt();
        assert!(
            (rate - chance).abs() < 3.0 * se + 1e-12,
            "rate {rate} chance {chance} se {se}"
        );
    }

    #[test]
    fn planted_rate_within_three_standard_errors() {
        let cfg = SynthConfig {
            n_users: 700,
            sessions_per_user_min: 18,
            sessions_per_user_max: 22,
            sequentiality: 0.9,
            ..small_config()
        };
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_sessions(&cfg, &catalog).unwrap();
        let (rate, n, chance) = successor_rate(&cfg, &catalog, &log);
        assert!(n > 10_000);
        let p = cfg.sequentiality + (1.0 - cfg.sequentiality) * chance;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se, "rate {rate} expected {p} se {se}");
    }

    fn successor_rate(
        cfg: &SynthConfig,
        catalog: &[SetRecord],
        log: &SessionLog,
    ) -> (f64, usize, f64) {
        use std::collections::HashMap;
        let by_id: HashMap<u64, &SetRecord> = catalog.iter().map(|s| (s.set_id, s)).collect();
        let mut per_user: HashMap<u64, Vec<&UserSessionRecord>> = HashMap::new();
        for s in log {
            per_user.entry(s.user_id).or_default().push(s);
        }
        let mut hits = 0usize;
        let mut total = 0usize;
        // chance of a uniform same-subject draw hitting the successor;
        // zero when the successor lies in a different subject block
        let mut chance_sum = 0.0;
        let mut subject_size: HashMap<&str, usize> = HashMap::new();
        for s in catalog {
            *subject_size.entry(s.broad_subject.as_str()).or_insert(0) += 1;
        }
        for (_, sessions) in per_user {
            for w in sessions.windows(2) {
                let prev = by_id[&w[0].set_id];
                let stride = user_stride_from_ip(&w[0].obfuscated_ip).unwrap();
                let succ = strided_successor_id(prev, cfg.n_sets, stride);
                total += 1;
                if w[1].set_id == succ {
                    hits += 1;
                }
                if by_id[&succ].broad_subject == prev.broad_subject {
                    chance_sum += 1.0 / subject_size[prev.broad_subject.as_str()] as f64;
                }
            }
        }
        (hits as f64 / total as f64, total, chance_sum / total as f64)
    }

    #[test]
    fn distraction_breaks_adjacency_at_expected_rate() {
        let cfg = SynthConfig {
            n_users: 700,
            sessions_per_user_min: 18,
            sessions_per_user_max: 22,
            sequentiality: 1.0,
            distraction: 0.15,
            ..small_config()
        };
        let catalog = generate_catalog(&cfg).unwrap();
        let log = generate_sessions(&cfg, &catalog).unwrap();
        let (rate, n, chance) = successor_rate(&cfg, &catalog, &log);
        // a transition follows the strided successor iff neither end is a
        // detour, plus coincidental hits on the rest
        let clean = (1.0 - cfg.distraction) * (1.0 - cfg.distraction);
        let p = clean + (1.0 - clean) * chance;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((rate - p).abs() < 4.0 * se, "rate {rate} expected {p} se {se}");
    }

    #[test]
    fn set_metadata_never_fingerprints_individual_sets() {
        let catalog = generate_catalog(&SynthConfig::default()).unwrap();
        use std::collections::HashMap;
        let mut groups: HashMap<String, Vec<&SetRecord>> = HashMap::new();
        for s in &catalog {
            let key = format!(
                "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
                s.broad_subject,
                s.studier_count,
                s.mean_studier_age,
                s.term_language,
                s.definition_language,
                s.total_views,
                s.has_images,
                s.has_diagrams,
                s.preferred_study_mode,
                s.preferred_platform,
                s.mean_session_length,
                s.chapter_index,
            );
            groups.entry(key).or_default().push(s);
        }
        // every metadata signature is shared by several topics
        for (key, members) in groups {
            assert!(members.len() > 1, "unique metadata signature: {key}");
        }
    }

    #[test]
    fn empty_catalog_rejected() {
        let cfg = small_config();
        assert!(matches!(
            generate_sessions(&cfg, &[]),
            Err(NereError::Precondition(_))
        ));
    }

    #[test]
    fn geo_is_deterministic_and_bounded() {
        let (lat, lon) = geo_for_prefix(10, 20);
        assert_eq!(geo_lookup("10.10.20.0"), Some((lat, lon)));
        assert_eq!(geo_lookup("192.168.1.0"), None);
        assert!((-90.0..=90.0).contains(&lat));
        assert!((-180.0..=206.0).contains(&lon));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = small_config();
        let catalog = generate_catalog(&cfg).unwrap();
        let dir = std::env::temp_dir().join("nere_synthgen_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("sets.jsonl");
        write_jsonl(&catalog, &path).unwrap();
        let loaded: Vec<SetRecord> = read_jsonl(&path).unwrap();
        assert_eq!(loaded, catalog);
    }
}
