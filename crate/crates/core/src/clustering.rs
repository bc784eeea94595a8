//! Entity clustering into super entities.
//!
//! Lloyd's k-means with k-means++ seeding over entity text embeddings. The
//! resulting [`SuperEntityMap`] maps every entity name onto one of `M` super
//! entities; the super-entity names themselves are supplied by the caller.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("requested {requested} clusters for {available} points")]
    TooManyClusters { requested: usize, available: usize },
    #[error("expected {expected} super-entity names, got {found}")]
    NameCountMismatch { expected: usize, found: usize },
    #[error("invalid pre-partition: {0}")]
    InvalidPartition(String),
    #[error("invalid super-entity map: {0}")]
    InvalidMap(String),
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
}

impl ClusterError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::TooManyClusters { .. } => "TooManyClusters",
            Self::NameCountMismatch { .. } => "NameCountMismatch",
            Self::InvalidPartition(_) => "InvalidPartition",
            Self::InvalidMap(_) => "InvalidMap",
            Self::Io { .. } => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub max_iter: usize,
    /// Stop once an iteration improves the SSE by less than this.
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest-SSE run wins.
    pub restarts: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol: 1e-6,
            restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub sse: f64,
    /// SSE after seeding, after each Lloyd iteration, and after the final
    /// transfer refinement, for the winning run.
    pub sse_history: Vec<f64>,
}

/// Clusters the rows of `points` into `m` groups.
///
/// Deterministic for a fixed seed regardless of the rayon pool size: the
/// assignment step is parallel but each centroid is reduced sequentially in
/// point order.
pub fn kmeans(
    points: &EmbeddingMatrix,
    m: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult, ClusterError> {
    let rows: Vec<&[f64]> = points.rows().collect();
    kmeans_rows(&rows, m, seed, params)
}

pub(crate) fn kmeans_rows(
    rows: &[&[f64]],
    m: usize,
    seed: u64,
    params: &KMeansParams,
) -> Result<KMeansResult, ClusterError> {
    if m == 0 || m > rows.len() {
        return Err(ClusterError::TooManyClusters {
            requested: m,
            available: rows.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..params.restarts.max(1) {
        let run_seed = rng.next_u64();
        let run = lloyd(rows, m, run_seed, params);
        // strict improvement keeps the earliest run on ties
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid; ties go to the lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_plus_plus(rows: &[&[f64]], m: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut chosen = vec![rng.random_range(0..rows.len())];
    let mut d2: Vec<f64> = rows.iter().map(|p| sq_dist(p, rows[chosen[0]])).collect();
    while chosen.len() < m {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every remaining point coincides with a chosen center
            Err(_) => (0..rows.len()).find(|i| !chosen.contains(i)).unwrap(),
        };
        chosen.push(next);
        for (i, p) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, rows[next]));
        }
    }
    chosen.iter().map(|&i| rows[i].to_vec()).collect()
}

fn update_centroids(rows: &[&[f64]], assignment: &[usize], m: usize) -> Vec<Vec<f64>> {
    let dim = rows[0].len();
    let mut sums = vec![vec![0.0; dim]; m];
    let mut counts = vec![0usize; m];
    for (p, &c) in rows.iter().zip(assignment) {
        counts[c] += 1;
        sums[c].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        debug_assert!(n > 0, "empty clusters are repaired before the update");
        s.iter_mut().for_each(|v| *v /= n as f64);
    }
    sums
}

fn sse_of(rows: &[&[f64]], assignment: &[usize], centroids: &[Vec<f64>]) -> f64 {
    rows.iter()
        .zip(assignment)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Moves the point farthest from its centroid (drawn from clusters with more
/// than one member) into each empty cluster.
fn repair_empty(rows: &[&[f64]], assignment: &mut [usize], centroids: &mut [Vec<f64>]) {
    let m = centroids.len();
    loop {
        let mut counts = vec![0usize; m];
        assignment.iter().for_each(|&c| counts[c] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut far = None::<(usize, f64)>;
        for (i, p) in rows.iter().enumerate() {
            if counts[assignment[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, &centroids[assignment[i]]);
            if far.is_none_or(|(_, best)| d > best) {
                far = Some((i, d));
            }
        }
        let (i, _) = far.expect("m <= n guarantees a cluster with two members");
        assignment[i] = empty;
        centroids[empty] = rows[i].to_vec();
    }
}

fn lloyd(rows: &[&[f64]], m: usize, seed: u64, params: &KMeansParams) -> KMeansResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = seed_plus_plus(rows, m, &mut rng);
    let mut assignment: Vec<usize> = rows.par_iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(rows, &mut assignment, &mut centroids);
    let mut sse = sse_of(rows, &assignment, &centroids);
    let mut history = vec![sse];
    for _ in 0..params.max_iter {
        let next_centroids = update_centroids(rows, &assignment, m);
        let mut next_assignment: Vec<usize> = rows
            .par_iter()
            .map(|p| nearest(p, &next_centroids).0)
            .collect();
        let mut next_centroids = next_centroids;
        repair_empty(rows, &mut next_assignment, &mut next_centroids);
        let next_sse = sse_of(rows, &next_assignment, &next_centroids);
        if next_sse > sse {
            // rounding at a fixed point; keep the previous state
            break;
        }
        let improvement = sse - next_sse;
        centroids = next_centroids;
        assignment = next_assignment;
        sse = next_sse;
        history.push(sse);
        if improvement < params.tol {
            break;
        }
    }
    // report centroids consistent with the final assignment
    let final_centroids = update_centroids(rows, &assignment, m);
    let final_sse = sse_of(rows, &assignment, &final_centroids);
    if final_sse <= sse {
        centroids = final_centroids;
        if final_sse < sse {
            history.push(final_sse);
        }
        sse = final_sse;
    }
    if let Some(refined) = hartigan(rows, &assignment, m, params.max_iter) {
        let refined_centroids = update_centroids(rows, &refined, m);
        let refined_sse = sse_of(rows, &refined, &refined_centroids);
        if refined_sse < sse {
            assignment = refined;
            centroids = refined_centroids;
            sse = refined_sse;
            history.push(sse);
        }
    }
    KMeansResult {
        assignment,
        centroids,
        sse,
        sse_history: history,
    }
}

/// Single-point transfers that lower the SSE, swept in point order until
/// none remains. Returns `None` if no point moved.
fn hartigan(rows: &[&[f64]], assignment: &[usize], m: usize, max_sweeps: usize) -> Option<Vec<usize>> {
    let mut assignment = assignment.to_vec();
    let mut centroids = update_centroids(rows, &assignment, m);
    let mut counts = vec![0usize; m];
    assignment.iter().for_each(|&c| counts[c] += 1);
    let mut moved_any = false;
    for _ in 0..max_sweeps {
        let mut moved = false;
        for (i, p) in rows.iter().enumerate() {
            let a = assignment[i];
            if counts[a] < 2 {
                continue;
            }
            let na = counts[a] as f64;
            let removal = na / (na - 1.0) * sq_dist(p, &centroids[a]);
            let mut best = None::<(usize, f64)>;
            for b in (0..m).filter(|&b| b != a) {
                let nb = counts[b] as f64;
                let add = nb / (nb + 1.0) * sq_dist(p, &centroids[b]);
                if best.is_none_or(|(_, c)| add < c) {
                    best = Some((b, add));
                }
            }
            let Some((b, add)) = best else { continue };
            if add >= removal * (1.0 - 1e-12) {
                continue;
            }
            let nb = counts[b] as f64;
            for (j, x) in p.iter().enumerate() {
                centroids[a][j] = (centroids[a][j] * na - x) / (na - 1.0);
                centroids[b][j] = (centroids[b][j] * nb + x) / (nb + 1.0);
            }
            counts[a] -= 1;
            counts[b] += 1;
            assignment[i] = b;
            moved = true;
            moved_any = true;
        }
        if !moved {
            break;
        }
    }
    moved_any.then_some(assignment)
}

/// Disjoint groups of entity names computed outside the engine (e.g. by
/// part-of-speech grouping); clustering runs within each group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrePartition {
    pub groups: Vec<Vec<String>>,
}

impl PrePartition {
    pub fn validate(&self, vocabulary: &[String]) -> Result<(), ClusterError> {
        let known: BTreeSet<&str> = vocabulary.iter().map(String::as_str).collect();
        let mut seen = BTreeSet::new();
        for name in self.groups.iter().flatten() {
            if !known.contains(name.as_str()) {
                return Err(ClusterError::InvalidPartition(format!(
                    "{name:?} is not in the vocabulary"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(ClusterError::InvalidPartition(format!(
                    "{name:?} appears in more than one group"
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        read_json(path)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperEntityMap {
    pub super_names: Vec<String>,
    pub assignment: BTreeMap<String, usize>,
    /// Empty when the map was loaded from a file.
    pub centroids: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SuperEntityMapFile {
    super_names: Vec<String>,
    assignment: BTreeMap<String, usize>,
}

impl SuperEntityMap {
    pub fn num_super(&self) -> usize {
        self.super_names.len()
    }

    pub fn super_of(&self, entity: &str) -> Option<usize> {
        self.assignment.get(entity).copied()
    }

    pub fn members(&self, super_index: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == super_index)
            .map(|(e, _)| e.as_str())
            .collect()
    }

    pub fn validate(&self) -> Result<(), ClusterError> {
        let mut names = BTreeSet::new();
        for n in &self.super_names {
            if !names.insert(n) {
                return Err(ClusterError::InvalidMap(format!("duplicate super name {n:?}")));
            }
        }
        let mut used = vec![false; self.super_names.len()];
        for (entity, &s) in &self.assignment {
            if s >= self.super_names.len() {
                return Err(ClusterError::InvalidMap(format!(
                    "{entity:?} assigned to super index {s} of {}",
                    self.super_names.len()
                )));
            }
            used[s] = true;
        }
        if let Some(empty) = used.iter().position(|u| !u) {
            return Err(ClusterError::InvalidMap(format!(
                "super entity {:?} has no members",
                self.super_names[empty]
            )));
        }
        Ok(())
    }

    /// Checks that exactly the entities in `vocabulary` are assigned.
    pub fn covers(&self, vocabulary: &[String]) -> Result<(), ClusterError> {
        if self.assignment.len() != vocabulary.len() {
            return Err(ClusterError::InvalidMap(format!(
                "{} assigned entities for a vocabulary of {}",
                self.assignment.len(),
                vocabulary.len()
            )));
        }
        if let Some(missing) = vocabulary.iter().find(|e| !self.assignment.contains_key(*e)) {
            return Err(ClusterError::InvalidMap(format!("{missing:?} is unassigned")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SuperEntityMapFile {
            super_names: self.super_names.clone(),
            assignment: self.assignment.clone(),
        })
        .expect("map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ClusterError> {
        let file: SuperEntityMapFile =
            serde_json::from_str(s).map_err(|e| ClusterError::InvalidMap(e.to_string()))?;
        let map = Self {
            super_names: file.super_names,
            assignment: file.assignment,
            centroids: Vec::new(),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, ClusterError> {
        let s = std::fs::read_to_string(path).map_err(|e| ClusterError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&s)
    }

    pub fn save(&self, path: &Path) -> Result<(), ClusterError> {
        std::fs::write(path, self.to_json()).map_err(|e| ClusterError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ClusterError> {
    let s = std::fs::read_to_string(path).map_err(|e| ClusterError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&s).map_err(|e| ClusterError::InvalidPartition(e.to_string()))
}

/// Splits `m` clusters across groups in proportion to their sizes
/// (largest remainder), giving each group at least one and at most its size.
fn allocate_clusters(sizes: &[usize], m: usize) -> Result<Vec<usize>, ClusterError> {
    let total: usize = sizes.iter().sum();
    if m < sizes.len() {
        return Err(ClusterError::InvalidPartition(format!(
            "{m} clusters cannot cover {} non-empty groups",
            sizes.len()
        )));
    }
    if m > total {
        return Err(ClusterError::TooManyClusters {
            requested: m,
            available: total,
        });
    }
    let quota: Vec<f64> = sizes
        .iter()
        .map(|&s| m as f64 * s as f64 / total as f64)
        .collect();
    let mut alloc: Vec<usize> = sizes
        .iter()
        .zip(&quota)
        .map(|(&s, q)| (q.floor() as usize).clamp(1, s))
        .collect();
    let mut assigned: usize = alloc.iter().sum();
    // ties resolve to the earliest group
    while assigned < m {
        let g = (0..sizes.len())
            .filter(|&g| alloc[g] < sizes[g])
            .max_by(|&a, &b| {
                (quota[a] - alloc[a] as f64)
                    .total_cmp(&(quota[b] - alloc[b] as f64))
                    .then(b.cmp(&a))
            })
            .expect("m <= total leaves room");
        alloc[g] += 1;
        assigned += 1;
    }
    while assigned > m {
        let g = (0..sizes.len())
            .filter(|&g| alloc[g] > 1)
            .max_by(|&a, &b| {
                (alloc[a] as f64 - quota[a])
                    .total_cmp(&(alloc[b] as f64 - quota[b]))
                    .then(b.cmp(&a))
            })
            .expect("m >= groups leaves a reducible group");
        alloc[g] -= 1;
        assigned -= 1;
    }
    Ok(alloc)
}

/// Clusters `entity_emb` (one row per entity, labeled by entity name) into
/// `m` super entities and attaches `names` in centroid-index order.
///
/// With a pre-partition, k-means runs inside each group (entities outside
/// every group form one trailing residual group) and cluster indices are
/// concatenated in group order.
pub fn build_super_map(
    entity_emb: &EmbeddingMatrix,
    m: usize,
    names: &[String],
    pre_partition: Option<&PrePartition>,
    seed: u64,
    params: &KMeansParams,
) -> Result<SuperEntityMap, ClusterError> {
    if names.len() != m {
        return Err(ClusterError::NameCountMismatch {
            expected: m,
            found: names.len(),
        });
    }
    if m > entity_emb.count() {
        return Err(ClusterError::TooManyClusters {
            requested: m,
            available: entity_emb.count(),
        });
    }
    let groups: Vec<Vec<usize>> = match pre_partition {
        None => vec![(0..entity_emb.count()).collect()],
        Some(pp) => {
            pp.validate(entity_emb.labels())?;
            let mut covered = vec![false; entity_emb.count()];
            let mut groups = Vec::new();
            for g in &pp.groups {
                let rows: Vec<usize> = g
                    .iter()
                    .map(|name| entity_emb.find(name).expect("validated"))
                    .collect();
                rows.iter().for_each(|&r| covered[r] = true);
                if !rows.is_empty() {
                    groups.push(rows);
                }
            }
            let residual: Vec<usize> = (0..entity_emb.count()).filter(|&r| !covered[r]).collect();
            if !residual.is_empty() {
                groups.push(residual);
            }
            groups
        }
    };
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let alloc = allocate_clusters(&sizes, m)?;

    let mut assignment = BTreeMap::new();
    let mut centroids = Vec::with_capacity(m);
    for (g, (rows, &k)) in groups.iter().zip(&alloc).enumerate() {
        let points: Vec<&[f64]> = rows.iter().map(|&r| entity_emb.row(r)).collect();
        let result = kmeans_rows(&points, k, seed.wrapping_add(g as u64), params)?;
        let offset = centroids.len();
        for (&r, &c) in rows.iter().zip(&result.assignment) {
            assignment.insert(entity_emb.label(r).to_string(), offset + c);
        }
        centroids.extend(result.centroids);
    }
    let map = SuperEntityMap {
        super_names: names.to_vec(),
        assignment,
        centroids,
    };
    map.validate()?;
    Ok(map)
}
