//! Hierarchical relation scoring.
//!
//! For each relation proposal and each super pair `j`:
//!
//! 1. region prompts of every predicate are ranked against the union feature
//!    `U` and the top `k` kept (dynamic selection);
//! 2. the entity-aware score is `cos(R, T^e_j[p])`;
//! 3. the region-aware score is the mean of `cos(R, t)` over the kept prompts;
//! 4. the two are blended as `(1 - alpha) * entity + alpha * region`;
//!
//! and the final row is either the componentwise max over all pairs or the
//! single pair implied by the proposal's entity labels.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::embedding::{cosine, EmbeddingError, EmbeddingMatrix, ScoreTensor};
use crate::losses::BBox;
use crate::prompts::PromptHierarchy;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("region prompt slice is empty")]
    EmptySlice,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("unknown super pair {0}")]
    UnknownPair(usize),
    #[error("invalid scorer config: {0}")]
    InvalidConfig(String),
    #[error("invalid proposal batch: {0}")]
    InvalidBatch(String),
}

impl ScoreError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::EmptySlice => "EmptySlice",
            Self::DimensionMismatch { .. } => "DimensionMismatch",
            Self::ZeroVector => "ZeroVector",
            Self::UnknownPair(_) => "UnknownPair",
            Self::InvalidConfig(_) => "InvalidConfig",
            Self::InvalidBatch(_) => "InvalidBatch",
        }
    }
}

impl From<EmbeddingError> for ScoreError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::DimensionMismatch { expected, found } => {
                Self::DimensionMismatch { expected, found }
            }
            EmbeddingError::ZeroVector { .. } => Self::ZeroVector,
            other => Self::InvalidBatch(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScorerConfig {
    /// Weight of the region-aware score, in `[0, 1]`.
    pub alpha: f64,
    /// Region prompts kept per (pair, predicate); `usize::MAX` keeps all.
    pub k: usize,
    pub softmax_temperature: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            k: 3,
            softmax_temperature: 1.0,
        }
    }
}

impl ScorerConfig {
    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(ScoreError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.k == 0 {
            return Err(ScoreError::InvalidConfig("k must be positive".into()));
        }
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return Err(ScoreError::InvalidConfig(format!(
                "softmax temperature {} must be positive",
                self.softmax_temperature
            )));
        }
        Ok(())
    }
}

/// Indices of the `min(k, n)` region embeddings most similar to `u`,
/// by descending score with ties to the lower index.
pub fn select_region_prompts(u: &[f64], region: &[&[f64]], k: usize) -> Result<Vec<usize>, ScoreError> {
    if region.is_empty() {
        return Err(ScoreError::EmptySlice);
    }
    let scores = region
        .iter()
        .map(|t| cosine(u, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(top_k(&scores, k))
}

fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order = Vec::new();
    top_k_into(scores, k, &mut order);
    order
}

fn top_k_into(scores: &[f64], k: usize, order: &mut Vec<usize>) {
    order.clear();
    order.extend(0..scores.len());
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(k.min(scores.len()));
}

/// `cos(r, T[p])` for every predicate row.
pub fn entity_score(r: &[f64], entity_emb: &[&[f64]]) -> Result<Vec<f64>, ScoreError> {
    entity_emb
        .iter()
        .map(|t| cosine(r, t).map_err(ScoreError::from))
        .collect()
}

/// Mean of `cos(r, t)` over each predicate's selected embeddings.
pub fn region_score(r: &[f64], selected: &[Vec<&[f64]>]) -> Result<Vec<f64>, ScoreError> {
    selected
        .iter()
        .map(|rows| {
            if rows.is_empty() {
                return Err(ScoreError::EmptySlice);
            }
            let mut sum = 0.0;
            for t in rows {
                sum += cosine(r, t)?;
            }
            Ok(sum / rows.len() as f64)
        })
        .collect()
}

#[inline]
fn blend(entity: f64, region: Option<f64>, alpha: f64) -> f64 {
    match region {
        None => entity,
        Some(_) if alpha == 0.0 => entity,
        Some(r) if alpha == 1.0 => r,
        Some(r) => (1.0 - alpha) * entity + alpha * r,
    }
}

/// `(1 - alpha) * s_e + alpha * s_r`, or `s_e` when no region scores exist.
pub fn aggregate(s_e: &[f64], s_r: Option<&[f64]>, alpha: f64) -> Vec<f64> {
    match s_r {
        None => s_e.to_vec(),
        Some(s_r) => s_e
            .iter()
            .zip(s_r)
            .map(|(&e, &r)| blend(e, Some(r), alpha))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSelection {
    MaxAll,
    Indexed(usize),
}

/// Componentwise max over pairs, or the single indexed pair.
pub fn final_scores(per_pair: &[Vec<f64>], mode: PairSelection) -> Result<Vec<f64>, ScoreError> {
    match mode {
        PairSelection::Indexed(j) => per_pair.get(j).cloned().ok_or(ScoreError::UnknownPair(j)),
        PairSelection::MaxAll => {
            let (first, rest) = per_pair
                .split_first()
                .ok_or_else(|| ScoreError::InvalidBatch("no super pairs".into()))?;
            let mut out = first.clone();
            for row in rest {
                for (o, &v) in out.iter_mut().zip(row) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub subj_box: BBox,
    pub obj_box: BBox,
    pub union_box: BBox,
    pub subj_label: Option<String>,
    pub obj_label: Option<String>,
    /// Row of both the relation and the union feature matrices.
    pub feature_row: usize,
}

/// Relation proposals with their relation (`R`) and union (`U`) features.
#[derive(Debug, Clone)]
pub struct ProposalBatch {
    pub proposals: Vec<Proposal>,
    pub relation: EmbeddingMatrix,
    pub union: EmbeddingMatrix,
}

impl ProposalBatch {
    pub fn new(
        proposals: Vec<Proposal>,
        relation: EmbeddingMatrix,
        union: EmbeddingMatrix,
    ) -> Result<Self, ScoreError> {
        if relation.dim() != union.dim() {
            return Err(ScoreError::DimensionMismatch {
                expected: relation.dim(),
                found: union.dim(),
            });
        }
        let rows = relation.count().min(union.count());
        if let Some((i, p)) = proposals.iter().enumerate().find(|(_, p)| p.feature_row >= rows) {
            return Err(ScoreError::InvalidBatch(format!(
                "proposal {i} references feature row {} of {rows}",
                p.feature_row
            )));
        }
        Ok(Self {
            proposals,
            relation,
            union,
        })
    }

    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Prompts kept for one predicate, for the pair that produced its final score.
#[derive(Debug, Clone, PartialEq)]
pub struct PredicateSelection {
    pub predicate: usize,
    pub pair: usize,
    /// Text-embedding rows, in selection order.
    pub prompts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalAudit {
    pub index: usize,
    pub mode: PairSelection,
    pub selected: Vec<PredicateSelection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    pub scores: ScoreTensor,
    pub audit: Vec<ProposalAudit>,
}

#[derive(Serialize)]
struct SelectionRecord<'a> {
    pair: String,
    prompts: Vec<&'a str>,
}

#[derive(Serialize)]
struct ScoreRecord<'a> {
    index: usize,
    mode: &'static str,
    pair: Option<String>,
    scores: &'a [f64],
    selected_prompts: BTreeMap<&'a str, SelectionRecord<'a>>,
}

impl ScoredBatch {
    /// One JSON object per proposal, in proposal order.
    pub fn to_json(&self, hier: &PromptHierarchy) -> String {
        let records: Vec<ScoreRecord> = self
            .audit
            .iter()
            .map(|a| ScoreRecord {
                index: a.index,
                mode: match a.mode {
                    PairSelection::MaxAll => "max_all",
                    PairSelection::Indexed(_) => "indexed",
                },
                pair: match a.mode {
                    PairSelection::Indexed(j) => Some(hier.pair_name(j)),
                    PairSelection::MaxAll => None,
                },
                scores: self.scores.row(a.index),
                selected_prompts: a
                    .selected
                    .iter()
                    .map(|s| {
                        (
                            hier.predicates()[s.predicate].as_str(),
                            SelectionRecord {
                                pair: hier.pair_name(s.pair),
                                prompts: s.prompts.iter().map(|&r| hier.text_emb().label(r)).collect(),
                            },
                        )
                    })
                    .collect(),
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("scores serialize")
    }
}

/// Reused buffers for [`score_cell`].
#[derive(Default)]
struct Scratch {
    u_scores: Vec<f64>,
    order: Vec<usize>,
    ascending: Vec<usize>,
}

/// Blended score of one (pair, predicate); `kept` receives the selected
/// text rows in selection order. `r_sim`/`u_sim` give cosines against text rows.
#[allow(clippy::too_many_arguments)]
fn score_cell(
    hier: &PromptHierarchy,
    pair: usize,
    p: usize,
    cfg: &ScorerConfig,
    r_sim: &dyn Fn(usize) -> f64,
    u_sim: &dyn Fn(usize) -> f64,
    scratch: &mut Scratch,
    kept: &mut Vec<usize>,
) -> f64 {
    kept.clear();
    let entity = r_sim(hier.entity_row(pair, p));
    let rows = hier.region_rows(pair, p);
    if cfg.alpha == 0.0 || rows.is_empty() {
        return entity;
    }
    let Scratch { u_scores, order, ascending } = scratch;
    u_scores.clear();
    u_scores.extend(rows.iter().map(|&r| u_sim(r)));
    top_k_into(u_scores, cfg.k, order);
    // canonical summation order: ascending prompt index
    ascending.clear();
    ascending.extend_from_slice(order);
    ascending.sort_unstable();
    let mut sum = 0.0;
    for &i in ascending.iter() {
        sum += r_sim(rows[i]);
    }
    let region = sum / ascending.len() as f64;
    kept.extend(order.iter().map(|&i| rows[i]));
    blend(entity, Some(region), cfg.alpha)
}

fn score_one(
    index: usize,
    proposal: &Proposal,
    batch: &ProposalBatch,
    hier: &PromptHierarchy,
    cfg: &ScorerConfig,
    region_row_ids: &[usize],
) -> (Vec<f64>, ProposalAudit) {
    let text = hier.text_emb();
    let row = proposal.feature_row;
    let (r, r_norm) = (batch.relation.row(row), batch.relation.norm(row));
    let (u, u_norm) = (batch.union.row(row), batch.union.norm(row));
    let indexed = match (&proposal.subj_label, &proposal.obj_label) {
        (Some(s), Some(o)) => hier.pair_for_labels(s, o),
        _ => None,
    };
    match indexed {
        Some(pair) => {
            let r_sim = |t: usize| text.cosine_with(t, r, r_norm);
            let u_sim = |t: usize| text.cosine_with(t, u, u_norm);
            let mut scratch = Scratch::default();
            let mut scores = Vec::with_capacity(hier.num_predicates());
            let mut kept = Vec::with_capacity(hier.num_predicates());
            for p in 0..hier.num_predicates() {
                let mut rows = Vec::new();
                scores.push(score_cell(hier, pair, p, cfg, &r_sim, &u_sim, &mut scratch, &mut rows));
                kept.push((pair, rows));
            }
            let selected = selections(kept.into_iter());
            (
                scores,
                ProposalAudit {
                    index,
                    mode: PairSelection::Indexed(pair),
                    selected,
                },
            )
        }
        None => {
            let r_cache: Vec<f64> = (0..text.count()).map(|t| text.cosine_with(t, r, r_norm)).collect();
            let mut u_cache = vec![f64::NAN; text.count()];
            if cfg.alpha > 0.0 {
                for &t in region_row_ids {
                    u_cache[t] = text.cosine_with(t, u, u_norm);
                }
            }
            let r_sim = |t: usize| r_cache[t];
            let u_sim = |t: usize| u_cache[t];
            let cp = hier.num_predicates();
            let mut best = vec![f64::NEG_INFINITY; cp];
            let mut best_kept: Vec<(usize, Vec<usize>)> = vec![(0, Vec::new()); cp];
            let mut scratch = Scratch::default();
            let mut kept = Vec::new();
            for pair in 0..hier.num_pairs() {
                for p in 0..cp {
                    let score = score_cell(hier, pair, p, cfg, &r_sim, &u_sim, &mut scratch, &mut kept);
                    // strict: the lowest pair index wins ties
                    if score > best[p] {
                        best[p] = score;
                        best_kept[p] = (pair, kept.clone());
                    }
                }
            }
            (
                best,
                ProposalAudit {
                    index,
                    mode: PairSelection::MaxAll,
                    selected: selections(best_kept.into_iter()),
                },
            )
        }
    }
}

fn selections(kept: impl Iterator<Item = (usize, Vec<usize>)>) -> Vec<PredicateSelection> {
    kept.enumerate()
        .filter(|(_, (_, prompts))| !prompts.is_empty())
        .map(|(predicate, (pair, prompts))| PredicateSelection {
            predicate,
            pair,
            prompts,
        })
        .collect()
}

/// Scores every proposal of `batch` against `hier`.
///
/// Proposals whose two entity labels both map to super entities are scored
/// against that single pair; the rest take the max over all pairs. Output is
/// independent of the rayon pool size.
pub fn score_batch(
    batch: &ProposalBatch,
    hier: &PromptHierarchy,
    cfg: &ScorerConfig,
) -> Result<ScoredBatch, ScoreError> {
    cfg.validate()?;
    if batch.relation.dim() != hier.dim() {
        return Err(ScoreError::DimensionMismatch {
            expected: hier.dim(),
            found: batch.relation.dim(),
        });
    }
    if hier.num_pairs() == 0 {
        return Err(ScoreError::InvalidBatch("hierarchy has no super pairs".into()));
    }
    let mut region_row_ids: Vec<usize> = (0..hier.num_pairs())
        .flat_map(|j| (0..hier.num_predicates()).flat_map(move |p| hier.region_rows(j, p).iter().copied()))
        .collect();
    region_row_ids.sort_unstable();
    region_row_ids.dedup();

    let rows: Vec<(Vec<f64>, ProposalAudit)> = batch
        .proposals
        .par_iter()
        .enumerate()
        .map(|(i, p)| score_one(i, p, batch, hier, cfg, &region_row_ids))
        .collect();
    let cp = hier.num_predicates();
    let mut data = Vec::with_capacity(rows.len() * cp);
    let mut audit = Vec::with_capacity(rows.len());
    for (scores, a) in rows {
        data.extend(scores);
        audit.push(a);
    }
    Ok(ScoredBatch {
        scores: ScoreTensor::new(audit.len(), cp, data),
        audit,
    })
}
