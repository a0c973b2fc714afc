//! Top-m recommendation generation through the k-NN graph and the
//! file-backed recommendation cache.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::annindex::{query_scored, KnnGraph};
use crate::error::{NereError, Result};
use crate::recsys::model::{NereModel, Window};

/// Top-m catalog sets nearest the window's predicted embedding. `ids`
/// maps graph point index to catalog set id, in build order.
pub fn recommend(
    model: &mut NereModel,
    graph: &KnnGraph,
    ids: &[u64],
    window: &Window,
    m: usize,
) -> Result<Vec<(u64, f64)>> {
    if ids.len() != graph.len() {
        return Err(NereError::Precondition(format!(
            "id table has {} entries, graph has {} points",
            ids.len(),
            graph.len()
        )));
    }
    if m > ids.len() {
        return Err(NereError::Precondition(format!(
            "m = {m} exceeds the catalog size {}",
            ids.len()
        )));
    }
    let emb = model.predict_embedding(window)?;
    let scored = query_scored(graph, &emb, m)?;
    Ok(scored
        .into_iter()
        .map(|(idx, dist)| (ids[idx as usize], dist))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub user_id: u64,
    pub subject: String,
    pub set_ids: Vec<u64>,
    pub distances: Vec<f64>,
}

impl CacheEntry {
    fn validate(&self) -> Result<()> {
        if self.set_ids.len() != self.distances.len() {
            return Err(NereError::Precondition(format!(
                "cache entry for user {} has {} ids but {} distances",
                self.user_id,
                self.set_ids.len(),
                self.distances.len()
            )));
        }
        if self.distances.windows(2).any(|w| w[0] > w[1]) {
            return Err(NereError::Precondition(format!(
                "cache entry for user {} has non-ascending distances",
                self.user_id
            )));
        }
        Ok(())
    }
}

/// Header line `nere-cache <model_hash_hex> <generation_tag>` followed by
/// one JSON record per line.
pub fn export_cache(
    path: &Path,
    model_hash: u64,
    generation_tag: &str,
    entries: &[CacheEntry],
) -> Result<()> {
    for e in entries {
        e.validate()?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "nere-cache {model_hash:016x} {generation_tag}")?;
    for e in entries {
        writeln!(w, "{}", serde_json::to_string(e)?)?;
    }
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(u64, String, Vec<CacheEntry>)> {
    let f = std::fs::File::open(path)?;
    let r = BufReader::new(f);
    let mut lines = r.lines();
    let fmt = |line: usize, msg: String| NereError::Format {
        path: path.display().to_string(),
        line,
        msg,
    };
    let header = lines
        .next()
        .ok_or_else(|| fmt(1, "empty cache file".into()))??;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("nere-cache") {
        return Err(fmt(1, "expected `nere-cache <hash> <tag>` header".into()));
    }
    let hash = parts
        .next()
        .and_then(|h| u64::from_str_radix(h, 16).ok())
        .ok_or_else(|| fmt(1, "bad model hash".into()))?;
    let tag = parts
        .next()
        .ok_or_else(|| fmt(1, "missing generation tag".into()))?
        .to_string();
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let entry: CacheEntry = serde_json::from_str(&line)
            .map_err(|e| fmt(i + 2, format!("bad cache record: {e}")))?;
        entry
            .validate()
            .map_err(|e| fmt(i + 2, e.to_string()))?;
        entries.push(entry);
    }
    Ok((hash, tag, entries))
}
