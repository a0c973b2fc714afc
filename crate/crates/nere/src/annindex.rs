//! NN-Descent approximate k-nearest-neighbor graph over content vectors,
//! with greedy graph-walk querying and a brute-force oracle.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NereError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub k: usize,
    pub rho: f64,
    pub delta: f64,
    pub max_iters: usize,
    pub rng_seed: u64,
}

impl Default for IndexConfig {
    fn default() -> Self {
        IndexConfig {
            k: 20,
            rho: 0.5,
            delta: 0.001,
            max_iters: 12,
            rng_seed: 42,
        }
    }
}

impl IndexConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(NereError::Config("index k must be >= 1".into()));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(NereError::Config("rho must lie in (0, 1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(NereError::Config("delta must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub id: u32,
    pub dist: f64,
    pub is_new: bool,
}

/// Approximate k-NN graph. Points are stored L2-normalized; the metric is
/// cosine distance (1 − dot on normalized vectors). A zero vector cannot
/// be normalized; its distance to anything is the reserved maximum 2.0.
#[derive(Debug, Clone)]
pub struct KnnGraph {
    pub k: usize,
    pub neighbors: Vec<Vec<Neighbor>>,
    pub points: Vec<Vec<f64>>,
    pub is_zero: Vec<bool>,
    pub seed: u64,
}

fn normalize(v: &[f64]) -> (Vec<f64>, bool) {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n == 0.0 {
        (v.to_vec(), true)
    } else {
        (v.iter().map(|x| x / n).collect(), false)
    }
}

fn cosine_distance(a: &[f64], b: &[f64], a_zero: bool, b_zero: bool) -> f64 {
    if a_zero || b_zero {
        return 2.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot
}

impl KnnGraph {
    pub fn distance(&self, id: usize, q: &[f64], q_zero: bool) -> f64 {
        cosine_distance(&self.points[id], q, self.is_zero[id], q_zero)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Sum of all neighbor-list distances; non-increasing across NN-Descent
    /// iterations.
    pub fn total_distance(&self) -> f64 {
        self.neighbors
            .iter()
            .flat_map(|l| l.iter().map(|n| n.dist))
            .sum()
    }
}

/// Try to insert (id, dist) into a sorted bounded neighbor list. Returns
/// true when the list changed.
fn insert_neighbor(list: &mut Vec<Neighbor>, k: usize, id: u32, dist: f64) -> bool {
    if list.iter().any(|n| n.id == id) {
        return false;
    }
    if list.len() == k && dist >= list[k - 1].dist {
        return false;
    }
    let pos = list.partition_point(|n| n.dist < dist || (n.dist == dist && n.id < id));
    list.insert(
        pos,
        Neighbor {
            id,
            dist,
            is_new: true,
        },
    );
    if list.len() > k {
        list.pop();
    }
    true
}

/// NN-Descent graph construction.
pub fn build(points: &[Vec<f64>], config: &IndexConfig) -> Result<KnnGraph> {
    config.validate()?;
    let n = points.len();
    let k = config.k;
    if n < k + 1 {
        return Err(NereError::Precondition(format!(
            "need at least k+1 = {} points, got {}",
            k + 1,
            n
        )));
    }
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|v| !v.is_finite()) {
            return Err(NereError::Precondition(format!(
                "point {i} contains a non-finite value"
            )));
        }
    }
    let mut norm_points = Vec::with_capacity(n);
    let mut is_zero = Vec::with_capacity(n);
    for p in points {
        let (q, z) = normalize(p);
        norm_points.push(q);
        is_zero.push(z);
    }
    let mut graph = KnnGraph {
        k,
        neighbors: Vec::with_capacity(n),
        points: norm_points,
        is_zero,
        seed: config.rng_seed,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    // descend with double-length lists and truncate at the end; the
    // extra slack is what keeps recall high on unclustered data
    let k_build = (2 * k).min(n - 1);

    // random initialization
    for i in 0..n {
        let mut list: Vec<Neighbor> = Vec::with_capacity(k_build);
        while list.len() < k_build {
            let j = rng.gen_range(0..n) as u32;
            if j as usize == i || list.iter().any(|x| x.id == j) {
                continue;
            }
            let d = graph.distance(j as usize, &graph.points[i], graph.is_zero[i]);
            list.push(Neighbor {
                id: j,
                dist: d,
                is_new: true,
            });
        }
        list.sort_by(|a, b| a.dist.partial_cmp(&b.dist).unwrap().then(a.id.cmp(&b.id)));
        graph.neighbors.push(list);
    }

    let sample_size = ((config.rho * k_build as f64).ceil() as usize).max(1);
    for _iter in 0..config.max_iters {
        // sample new neighbors (flag them old), collect old ones
        let mut new_fwd: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut old_fwd: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            let new_idx: Vec<usize> = (0..graph.neighbors[i].len())
                .filter(|&j| graph.neighbors[i][j].is_new)
                .collect();
            let mut chosen: Vec<usize> = new_idx.clone();
            if chosen.len() > sample_size {
                chosen.shuffle(&mut rng);
                chosen.truncate(sample_size);
            }
            for &j in &chosen {
                graph.neighbors[i][j].is_new = false;
                new_fwd[i].push(graph.neighbors[i][j].id);
            }
            for nb in &graph.neighbors[i] {
                if !new_fwd[i].contains(&nb.id) {
                    old_fwd[i].push(nb.id);
                }
            }
        }
        // reverse neighbors, sampled at rho
        let mut new_rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        let mut old_rev: Vec<Vec<u32>> = vec![Vec::new(); n];
        for i in 0..n {
            for &j in &new_fwd[i] {
                new_rev[j as usize].push(i as u32);
            }
            for &j in &old_fwd[i] {
                old_rev[j as usize].push(i as u32);
            }
        }
        let mut updates = 0usize;
        for i in 0..n {
            let mut new_set: Vec<u32> = new_fwd[i].clone();
            {
                let rev = &mut new_rev[i];
                if rev.len() > sample_size {
                    rev.shuffle(&mut rng);
                    rev.truncate(sample_size);
                }
                new_set.extend(rev.iter().copied());
            }
            let mut old_set: Vec<u32> = old_fwd[i].clone();
            {
                let rev = &mut old_rev[i];
                if rev.len() > sample_size {
                    rev.shuffle(&mut rng);
                    rev.truncate(sample_size);
                }
                old_set.extend(rev.iter().copied());
            }
            new_set.sort_unstable();
            new_set.dedup();
            old_set.sort_unstable();
            old_set.dedup();
            // join: new-new and new-old pairs
            for a_pos in 0..new_set.len() {
                let u1 = new_set[a_pos] as usize;
                for &u2 in new_set[(a_pos + 1)..].iter() {
                    let u2 = u2 as usize;
                    if u1 == u2 {
                        continue;
                    }
                    let d = cosine_distance(
                        &graph.points[u1],
                        &graph.points[u2],
                        graph.is_zero[u1],
                        graph.is_zero[u2],
                    );
                    if insert_neighbor(&mut graph.neighbors[u1], k_build, u2 as u32, d) {
                        updates += 1;
                    }
                    if insert_neighbor(&mut graph.neighbors[u2], k_build, u1 as u32, d) {
                        updates += 1;
                    }
                }
                for &u2 in old_set.iter() {
                    let u2 = u2 as usize;
                    if u1 == u2 {
                        continue;
                    }
                    let d = cosine_distance(
                        &graph.points[u1],
                        &graph.points[u2],
                        graph.is_zero[u1],
                        graph.is_zero[u2],
                    );
                    if insert_neighbor(&mut graph.neighbors[u1], k_build, u2 as u32, d) {
                        updates += 1;
                    }
                    if insert_neighbor(&mut graph.neighbors[u2], k_build, u1 as u32, d) {
                        updates += 1;
                    }
                }
            }
        }
        if (updates as f64) < config.delta * (n * k_build) as f64 {
            break;
        }
    }
    for list in graph.neighbors.iter_mut() {
        list.truncate(k);
    }
    Ok(graph)
}

/// Greedy best-first walk from a few random entry points. Beam width is
/// 4m; returns the pool's top m ids by ascending distance, ties broken by
/// ascending id.
pub fn query(graph: &KnnGraph, vector: &[f64], m: usize) -> Result<Vec<u32>> {
    Ok(query_scored(graph, vector, m)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

/// Like `query` but keeps each result's distance to the query.
pub fn query_scored(graph: &KnnGraph, vector: &[f64], m: usize) -> Result<Vec<(u32, f64)>> {
    let n = graph.len();
    if m > n {
        return Err(NereError::Precondition(format!(
            "m = {m} exceeds the number of indexed points {n}"
        )));
    }
    let (q, q_zero) = normalize(vector);
    let beam = (4 * m).max(3 * graph.k);
    // explore a little past the current worst; greedy descent alone stalls
    // in local minima when the data has no cluster structure
    let slack = 1.12;
    let mut rng = ChaCha8Rng::seed_from_u64(graph.seed ^ 0x5151_5151);
    let n_seeds = 24.min(n);
    let mut visited: HashSet<u32> = HashSet::new();
    // pool of (dist, id), kept sorted, bounded by beam
    let mut pool: Vec<(f64, u32)> = Vec::new();
    let mut frontier: Vec<(f64, u32)> = Vec::new();
    for _ in 0..n_seeds {
        let s = rng.gen_range(0..n) as u32;
        if visited.insert(s) {
            let d = graph.distance(s as usize, &q, q_zero);
            pool.push((d, s));
            frontier.push((d, s));
        }
    }
    pool.sort_by(|a, b| a.partial_cmp(b).unwrap());
    while let Some(pos) = frontier
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
    {
        let (d, id) = frontier.swap_remove(pos);
        let worst = if pool.len() >= beam {
            pool[beam - 1].0 * slack
        } else {
            f64::INFINITY
        };
        if d > worst {
            continue;
        }
        for nb in &graph.neighbors[id as usize] {
            if !visited.insert(nb.id) {
                continue;
            }
            let nd = graph.distance(nb.id as usize, &q, q_zero);
            let worst = if pool.len() >= beam {
                pool[beam - 1].0 * slack
            } else {
                f64::INFINITY
            };
            if nd < worst || pool.len() < beam {
                let entry = (nd, nb.id);
                let at = pool.partition_point(|e| *e < entry);
                pool.insert(at, entry);
                if pool.len() > beam {
                    pool.pop();
                }
                frontier.push(entry);
            }
        }
    }
    Ok(pool.into_iter().take(m).map(|(d, id)| (id, d)).collect())
}

/// Exact top-m linear scan; the oracle for recall measurement.
pub fn brute_force_knn(points: &[Vec<f64>], vector: &[f64], m: usize) -> Result<Vec<u32>> {
    if m > points.len() {
        return Err(NereError::Precondition(format!(
            "m = {m} exceeds the number of points {}",
            points.len()
        )));
    }
    let (q, q_zero) = normalize(vector);
    let mut scored: Vec<(f64, u32)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (pn, pz) = normalize(p);
            (cosine_distance(&pn, &q, pz, q_zero), i as u32)
        })
        .collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(scored.into_iter().take(m).map(|(_, id)| id).collect())
}

/// Fraction of each point's true k nearest present in its built list,
/// averaged over points.
pub fn neighbor_list_recall(graph: &KnnGraph, points: &[Vec<f64>]) -> f64 {
    let k = graph.k;
    let mut total = 0.0;
    for i in 0..points.len() {
        let truth = brute_force_excluding(points, i, k);
        let got: HashSet<u32> = graph.neighbors[i].iter().map(|n| n.id).collect();
        let hit = truth.iter().filter(|t| got.contains(t)).count();
        total += hit as f64 / k as f64;
    }
    total / points.len() as f64
}

fn brute_force_excluding(points: &[Vec<f64>], exclude: usize, m: usize) -> Vec<u32> {
    let (q, q_zero) = normalize(&points[exclude]);
    let mut scored: Vec<(f64, u32)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != exclude)
        .map(|(i, p)| {
            let (pn, pz) = normalize(p);
            (cosine_distance(&pn, &q, pz, q_zero), i as u32)
        })
        .collect();
    scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
    scored.into_iter().take(m).map(|(_, id)| id).collect()
}

/// Binary serialization: text header `knng <N> <K> <metric>`, then per
/// point its id (u32 LE) and K (neighbor_id u32 LE, distance f64 LE)
/// pairs.
pub fn save_graph(graph: &KnnGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "knng {} {} cosine", graph.len(), graph.k)?;
    for (i, list) in graph.neighbors.iter().enumerate() {
        w.write_all(&(i as u32).to_le_bytes())?;
        for nb in list {
            w.write_all(&nb.id.to_le_bytes())?;
            w.write_all(&nb.dist.to_le_bytes())?;
        }
        // pad short lists (possible only for tiny graphs) with sentinel
        for _ in list.len()..graph.k {
            w.write_all(&u32::MAX.to_le_bytes())?;
            w.write_all(&f64::INFINITY.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reload neighbor lists; `points` must be the same vectors the graph was
/// built over (they are not stored in the graph file).
pub fn load_graph(path: &Path, points: &[Vec<f64>], seed: u64) -> Result<KnnGraph> {
    let f = std::fs::File::open(path)?;
    let mut r = BufReader::new(f);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    let fmt_err = |msg: &str| NereError::Format {
        path: path.display().to_string(),
        line: 1,
        msg: msg.to_string(),
    };
    if parts.len() != 4 || parts[0] != "knng" {
        return Err(fmt_err("expected `knng <N> <K> <metric>` header"));
    }
    let n: usize = parts[1].parse().map_err(|_| fmt_err("bad N"))?;
    let k: usize = parts[2].parse().map_err(|_| fmt_err("bad K"))?;
    if parts[3] != "cosine" {
        return Err(fmt_err("unsupported metric"));
    }
    if points.len() != n {
        return Err(NereError::Precondition(format!(
            "graph file has {n} points, store has {}",
            points.len()
        )));
    }
    let mut norm_points = Vec::with_capacity(n);
    let mut is_zero = Vec::with_capacity(n);
    for p in points {
        let (q, z) = normalize(p);
        norm_points.push(q);
        is_zero.push(z);
    }
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let mut id_buf = [0u8; 4];
        r.read_exact(&mut id_buf).map_err(|_| NereError::Format {
            path: path.display().to_string(),
            line: i + 2,
            msg: "truncated record".into(),
        })?;
        if u32::from_le_bytes(id_buf) != i as u32 {
            return Err(NereError::Format {
                path: path.display().to_string(),
                line: i + 2,
                msg: "point id out of order".into(),
            });
        }
        let mut list = Vec::with_capacity(k);
        for _ in 0..k {
            let mut nb_buf = [0u8; 4];
            let mut d_buf = [0u8; 8];
            r.read_exact(&mut nb_buf).map_err(|_| NereError::Format {
                path: path.display().to_string(),
                line: i + 2,
                msg: "truncated neighbor".into(),
            })?;
            r.read_exact(&mut d_buf).map_err(|_| NereError::Format {
                path: path.display().to_string(),
                line: i + 2,
                msg: "truncated distance".into(),
            })?;
            let id = u32::from_le_bytes(nb_buf);
            if id != u32::MAX {
                list.push(Neighbor {
                    id,
                    dist: f64::from_le_bytes(d_buf),
                    is_new: false,
                });
            }
        }
        neighbors.push(list);
    }
    Ok(KnnGraph {
        k,
        neighbors,
        points: norm_points,
        is_zero,
        seed,
    })
}
