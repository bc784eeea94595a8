//! Recall@K and mean Recall@K under PredCLS and SGDet matching.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{apply_graph_constraint, SceneGraphOut};
use crate::losses::BBox;
use crate::prompts::{PredicateSplit, Vocabulary};

pub const RECALL_KS: [usize; 2] = [50, 100];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("protocol violation in image {image_id}: {reason}")]
    ProtocolViolation { image_id: String, reason: String },
    #[error("invalid scene {image_id}: {reason}")]
    InvalidScene { image_id: String, reason: String },
    #[error("unknown predicate {0:?}")]
    UnknownPredicate(String),
    #[error("duplicate image id {0:?}")]
    DuplicateImage(String),
    #[error("prediction for image {0:?} has no ground truth")]
    UnknownImage(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

impl EvalError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::ProtocolViolation { .. } => "ProtocolViolation",
            Self::InvalidScene { .. } => "InvalidScene",
            Self::UnknownPredicate(_) => "UnknownPredicate",
            Self::DuplicateImage(_) => "DuplicateImage",
            Self::UnknownImage(_) => "UnknownImage",
            Self::Io { .. } => "IoFailure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    PredCls,
    SgDet,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::PredCls => "predcls",
            Self::SgDet => "sgdet",
        })
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "predcls" => Ok(Self::PredCls),
            "sgdet" => Ok(Self::SgDet),
            other => Err(format!("unknown protocol {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtEntity {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GtRelation {
    pub subj: usize,
    pub obj: usize,
    pub predicate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScene {
    pub image_id: String,
    pub entities: Vec<GtEntity>,
    pub relations: Vec<GtRelation>,
}

impl GroundTruthScene {
    pub fn validate(&self, num_predicates: usize) -> Result<(), EvalError> {
        let bad = |reason: String| EvalError::InvalidScene {
            image_id: self.image_id.clone(),
            reason,
        };
        let n = self.entities.len();
        for (i, r) in self.relations.iter().enumerate() {
            if r.subj >= n || r.obj >= n {
                return Err(bad(format!("relation {i} references a missing entity")));
            }
            if r.subj == r.obj {
                return Err(bad(format!("relation {i} is a self-relation")));
            }
            if r.predicate >= num_predicates {
                return Err(bad(format!("relation {i} has predicate index {}", r.predicate)));
            }
        }
        Ok(())
    }
}

/// Wire format of a ground-truth file; predicates are named.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub images: Vec<GroundTruthImage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthImage {
    pub image_id: String,
    pub entities: Vec<GtEntity>,
    pub relations: Vec<NamedRelation>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NamedRelation {
    pub subj: usize,
    pub obj: usize,
    pub predicate: String,
}

impl GroundTruthFile {
    pub fn resolve(&self, vocab: &Vocabulary) -> Result<Vec<GroundTruthScene>, EvalError> {
        self.images
            .iter()
            .map(|img| {
                let relations = img
                    .relations
                    .iter()
                    .map(|r| {
                        let predicate = vocab
                            .predicate_index(&r.predicate)
                            .ok_or_else(|| EvalError::UnknownPredicate(r.predicate.clone()))?;
                        Ok(GtRelation { subj: r.subj, obj: r.obj, predicate })
                    })
                    .collect::<Result<_, EvalError>>()?;
                let scene = GroundTruthScene {
                    image_id: img.image_id.clone(),
                    entities: img.entities.clone(),
                    relations,
                };
                scene.validate(vocab.num_predicates())?;
                Ok(scene)
            })
            .collect()
    }

    pub fn from_scenes(scenes: &[GroundTruthScene], vocab: &Vocabulary) -> Self {
        let names = vocab.predicate_names();
        Self {
            images: scenes
                .iter()
                .map(|s| GroundTruthImage {
                    image_id: s.image_id.clone(),
                    entities: s.entities.clone(),
                    relations: s
                        .relations
                        .iter()
                        .map(|r| NamedRelation {
                            subj: r.subj,
                            obj: r.obj,
                            predicate: names[r.predicate].clone(),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let io = |message: String| EvalError::Io {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| io(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| io(e.to_string()))
    }
}

/// Per-image matching outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatch {
    /// Predicate of each GT relation.
    pub gt_predicates: Vec<usize>,
    /// Rank of the prediction that claimed each GT relation.
    pub matched_rank: Vec<Option<usize>>,
}

impl ImageMatch {
    pub fn hits_within(&self, k: usize) -> impl Iterator<Item = bool> + '_ {
        self.matched_rank.iter().map(move |r| r.is_some_and(|r| r < k))
    }
}

fn check_predcls(pred: &SceneGraphOut, gt: &GroundTruthScene) -> Result<(), EvalError> {
    let same = pred.entities.len() == gt.entities.len()
        && pred
            .entities
            .iter()
            .zip(&gt.entities)
            .all(|(p, g)| p.label == g.label && p.bbox == g.bbox);
    if same {
        Ok(())
    } else {
        Err(EvalError::ProtocolViolation {
            image_id: gt.image_id.clone(),
            reason: "predicted entities differ from ground truth".to_string(),
        })
    }
}

/// Greedy rank-order matching; each GT relation is claimed at most once,
/// by the lowest-index unclaimed GT relation a prediction qualifies for.
///
/// Under PredCLS the entity lists are identical, so subject and object must
/// be the very same entities. Under SGDet labels must agree and both boxes
/// must reach `iou_thresh`.
pub fn match_triplets(
    pred: &SceneGraphOut,
    gt: &GroundTruthScene,
    protocol: Protocol,
    iou_thresh: f64,
) -> Result<ImageMatch, EvalError> {
    if protocol == Protocol::PredCls {
        check_predcls(pred, gt)?;
    }
    let n_pred = pred.entities.len();
    let mut matched_rank = vec![None; gt.relations.len()];
    for (rank, t) in pred.triplets.iter().enumerate() {
        if t.subj >= n_pred || t.obj >= n_pred {
            return Err(EvalError::InvalidScene {
                image_id: pred.image_id.clone(),
                reason: format!("triplet {rank} references a missing entity"),
            });
        }
        let hit = gt.relations.iter().enumerate().position(|(g, r)| {
            if matched_rank[g].is_some() || r.predicate != t.pred {
                return false;
            }
            match protocol {
                Protocol::PredCls => r.subj == t.subj && r.obj == t.obj,
                Protocol::SgDet => {
                    let (ps, po) = (&pred.entities[t.subj], &pred.entities[t.obj]);
                    let (gs, go) = (&gt.entities[r.subj], &gt.entities[r.obj]);
                    ps.label == gs.label
                        && po.label == go.label
                        && ps.bbox.iou(&gs.bbox) >= iou_thresh
                        && po.bbox.iou(&go.bbox) >= iou_thresh
                }
            }
        });
        if let Some(g) = hit {
            matched_rank[g] = Some(rank);
        }
    }
    Ok(ImageMatch {
        gt_predicates: gt.relations.iter().map(|r| r.predicate).collect(),
        matched_rank,
    })
}

/// Mean over images of the matched fraction of GT relations whose predicate
/// is in `split`. Images without such relations are skipped; `None` if none
/// remain.
pub fn recall_at_k(matches: &[ImageMatch], k: usize, split: &BTreeSet<usize>) -> Option<f64> {
    let mut total = 0.0;
    let mut images = 0usize;
    for m in matches {
        let (mut hit, mut n) = (0usize, 0usize);
        for (p, h) in m.gt_predicates.iter().zip(m.hits_within(k)) {
            if split.contains(p) {
                n += 1;
                hit += h as usize;
            }
        }
        if n > 0 {
            total += hit as f64 / n as f64;
            images += 1;
        }
    }
    (images > 0).then(|| total / images as f64)
}

/// Per-predicate `(gt instances, hits within k)` over the corpus.
pub fn predicate_hits(matches: &[ImageMatch], k: usize) -> BTreeMap<usize, (usize, usize)> {
    let mut table: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for m in matches {
        for (&p, h) in m.gt_predicates.iter().zip(m.hits_within(k)) {
            let e = table.entry(p).or_default();
            e.0 += 1;
            e.1 += h as usize;
        }
    }
    table
}

/// Mean of per-predicate recalls over split predicates with at least one
/// GT instance; `None` if there are none.
pub fn mean_recall_at_k(matches: &[ImageMatch], k: usize, split: &BTreeSet<usize>) -> Option<f64> {
    let recalls: Vec<f64> = predicate_hits(matches, k)
        .into_iter()
        .filter(|(p, _)| split.contains(p))
        .map(|(_, (n, hit))| hit as f64 / n as f64)
        .collect();
    (!recalls.is_empty()).then(|| recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredicateRecall {
    pub gt_instances: usize,
    pub recall_at_50: f64,
    pub recall_at_100: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub recall_at_50: Option<f64>,
    pub recall_at_100: Option<f64>,
    pub mean_recall_at_50: Option<f64>,
    pub mean_recall_at_100: Option<f64>,
    pub num_predicates: usize,
    pub predicates_with_gt: usize,
    pub gt_relations: usize,
    pub per_predicate: BTreeMap<String, PredicateRecall>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: Protocol,
    pub iou_thresh: f64,
    pub graph_constraint: bool,
    pub num_images: usize,
    pub total: SplitReport,
    pub base: SplitReport,
    pub novel: SplitReport,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn split_report(matches: &[ImageMatch], split: &BTreeSet<usize>, names: &[String]) -> SplitReport {
    let at50 = predicate_hits(matches, 50);
    let at100 = predicate_hits(matches, 100);
    let mut per_predicate = BTreeMap::new();
    let mut gt_relations = 0;
    for (&p, &(n, hit100)) in at100.iter().filter(|(p, _)| split.contains(p)) {
        let hit50 = at50[&p].1;
        gt_relations += n;
        per_predicate.insert(
            names[p].clone(),
            PredicateRecall {
                gt_instances: n,
                recall_at_50: hit50 as f64 / n as f64,
                recall_at_100: hit100 as f64 / n as f64,
            },
        );
    }
    SplitReport {
        recall_at_50: recall_at_k(matches, 50, split),
        recall_at_100: recall_at_k(matches, 100, split),
        mean_recall_at_50: mean_recall_at_k(matches, 50, split),
        mean_recall_at_100: mean_recall_at_k(matches, 100, split),
        num_predicates: split.len(),
        predicates_with_gt: per_predicate.len(),
        gt_relations,
        per_predicate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub protocol: Protocol,
    pub iou_thresh: f64,
    pub graph_constraint: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::PredCls,
            iou_thresh: 0.5,
            graph_constraint: false,
        }
    }
}

/// Evaluates predictions against ground truth, pairing by image id.
/// Images without predictions count as empty predictions.
pub fn evaluate_corpus(
    preds: &[SceneGraphOut],
    gts: &[GroundTruthScene],
    vocab: &Vocabulary,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let mut gt_by_id: BTreeMap<&str, &GroundTruthScene> = BTreeMap::new();
    for g in gts {
        g.validate(vocab.num_predicates())?;
        if gt_by_id.insert(&g.image_id, g).is_some() {
            return Err(EvalError::DuplicateImage(g.image_id.clone()));
        }
    }
    let mut pred_by_id: BTreeMap<&str, &SceneGraphOut> = BTreeMap::new();
    for p in preds {
        if !gt_by_id.contains_key(p.image_id.as_str()) {
            return Err(EvalError::UnknownImage(p.image_id.clone()));
        }
        if pred_by_id.insert(&p.image_id, p).is_some() {
            return Err(EvalError::DuplicateImage(p.image_id.clone()));
        }
    }

    let matches: Vec<ImageMatch> = gt_by_id
        .par_iter()
        .map(|(id, gt)| {
            let mut pred = match pred_by_id.get(id) {
                Some(p) => (*p).clone(),
                None => SceneGraphOut {
                    image_id: id.to_string(),
                    entities: gt
                        .entities
                        .iter()
                        .map(|e| crate::inference::SceneEntity { label: e.label.clone(), bbox: e.bbox, prob: 1.0 })
                        .collect(),
                    triplets: Vec::new(),
                },
            };
            if opts.graph_constraint {
                pred.triplets = apply_graph_constraint(pred.triplets, |t| (t.subj, t.obj));
            }
            match_triplets(&pred, gt, opts.protocol, opts.iou_thresh)
        })
        .collect::<Result<_, _>>()?;

    let names = vocab.predicate_names();
    let all: BTreeSet<usize> = (0..vocab.num_predicates()).collect();
    let base: BTreeSet<usize> = vocab.split_predicates(PredicateSplit::Base).into_iter().collect();
    let novel: BTreeSet<usize> = vocab.split_predicates(PredicateSplit::Novel).into_iter().collect();
    Ok(EvalReport {
        protocol: opts.protocol,
        iou_thresh: opts.iou_thresh,
        graph_constraint: opts.graph_constraint,
        num_images: matches.len(),
        total: split_report(&matches, &all, &names),
        base: split_report(&matches, &base, &names),
        novel: split_report(&matches, &novel, &names),
        metadata: BTreeMap::new(),
    })
}

/// A partial scorer configuration evaluated by [`sweep`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorerOverride {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// `usize::MAX` means every available prompt.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// Runs `evaluate` once per override and tags each report with it.
pub fn sweep<E>(
    overrides: &[ScorerOverride],
    mut evaluate: impl FnMut(&ScorerOverride) -> Result<EvalReport, E>,
) -> Result<Vec<EvalReport>, E> {
    overrides
        .iter()
        .map(|o| {
            let mut report = evaluate(o)?;
            report
                .metadata
                .insert("override".to_string(), serde_json::to_value(o).expect("override serializes"));
            Ok(report)
        })
        .collect()
}
