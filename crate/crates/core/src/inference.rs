//! Turning per-relation predicate scores into a ranked scene graph.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::losses::{softmax, BBox};

/// `softmax(scores / temperature)`.
pub fn to_probabilities(scores: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    softmax(&scaled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredTriplet {
    pub subj_index: usize,
    pub obj_index: usize,
    pub predicate: usize,
    pub subj_prob: f64,
    pub obj_prob: f64,
    pub pred_prob: f64,
    pub combined: f64,
}

impl ScoredTriplet {
    pub fn new(subj_index: usize, obj_index: usize, predicate: usize, subj_prob: f64, obj_prob: f64, pred_prob: f64) -> Self {
        Self {
            subj_index,
            obj_index,
            predicate,
            subj_prob,
            obj_prob,
            pred_prob,
            combined: subj_prob * obj_prob * pred_prob,
        }
    }

    fn key(&self) -> (usize, usize, usize) {
        (self.subj_index, self.obj_index, self.predicate)
    }
}

/// Descending combined score, then ascending `(subj, obj, predicate)`.
pub fn rank_order(a: &ScoredTriplet, b: &ScoredTriplet) -> Ordering {
    b.combined
        .total_cmp(&a.combined)
        .then_with(|| a.key().cmp(&b.key()))
}

/// Drops self-edges and keeps the best-scoring copy of each
/// `(subj, predicate, obj)`. Output follows first-seen order.
pub fn postprocess(candidates: Vec<ScoredTriplet>) -> Vec<ScoredTriplet> {
    let mut best: BTreeMap<(usize, usize, usize), usize> = BTreeMap::new();
    let mut out: Vec<ScoredTriplet> = Vec::new();
    for t in candidates {
        if t.subj_index == t.obj_index {
            continue;
        }
        match best.get(&t.key()) {
            Some(&i) => {
                if rank_order(&t, &out[i]) == Ordering::Less {
                    out[i] = t;
                }
            }
            None => {
                best.insert(t.key(), out.len());
                out.push(t);
            }
        }
    }
    out
}

/// Sorts by [`rank_order`] and keeps the first `m`.
pub fn rank_and_select(mut filtered: Vec<ScoredTriplet>, m: usize) -> Vec<ScoredTriplet> {
    assert!(m >= 1, "m must be at least 1");
    filtered.sort_by(rank_order);
    filtered.truncate(m);
    filtered
}

/// Keeps only the highest-ranked predicate per ordered entity pair.
/// Input must already be rank-ordered.
pub fn apply_graph_constraint<T>(ranked: Vec<T>, pair: impl Fn(&T) -> (usize, usize)) -> Vec<T> {
    let mut seen = BTreeSet::new();
    ranked.into_iter().filter(|t| seen.insert(pair(t))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneEntity {
    pub label: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphTriplet {
    pub subj: usize,
    pub pred: usize,
    pub obj: usize,
    pub score: f64,
}

impl From<&ScoredTriplet> for GraphTriplet {
    fn from(t: &ScoredTriplet) -> Self {
        Self {
            subj: t.subj_index,
            pred: t.predicate,
            obj: t.obj_index,
            score: t.combined,
        }
    }
}

/// A predicted scene graph; `triplets` are in rank order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneGraphOut {
    pub image_id: String,
    pub entities: Vec<SceneEntity>,
    pub triplets: Vec<GraphTriplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub top_m: usize,
    pub temperature: f64,
    pub graph_constraint: bool,
    /// Also drop triplets whose subject and object share a label.
    pub drop_same_label: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            top_m: 100,
            temperature: 1.0,
            graph_constraint: false,
            drop_same_label: false,
        }
    }
}

/// One scored relation proposal: entity indices plus raw predicate scores.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationScores<'a> {
    pub subj: usize,
    pub obj: usize,
    pub scores: &'a [f64],
}

/// Builds the output graph for one image.
pub fn infer_image(
    image_id: &str,
    entities: Vec<SceneEntity>,
    relations: &[RelationScores<'_>],
    opts: &InferOptions,
) -> SceneGraphOut {
    let mut candidates = Vec::new();
    for rel in relations {
        if opts.drop_same_label && entities[rel.subj].label == entities[rel.obj].label {
            continue;
        }
        let probs = to_probabilities(rel.scores, opts.temperature);
        let (ps, po) = (entities[rel.subj].prob, entities[rel.obj].prob);
        for (p, &pp) in probs.iter().enumerate() {
            candidates.push(ScoredTriplet::new(rel.subj, rel.obj, p, ps, po, pp));
        }
    }
    let mut ranked = postprocess(candidates);
    ranked.sort_by(rank_order);
    if opts.graph_constraint {
        ranked = apply_graph_constraint(ranked, |t| (t.subj_index, t.obj_index));
    }
    ranked.truncate(opts.top_m);
    SceneGraphOut {
        image_id: image_id.to_string(),
        entities,
        triplets: ranked.iter().map(GraphTriplet::from).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: usize, o: usize, p: usize, c: f64) -> ScoredTriplet {
        ScoredTriplet::new(s, o, p, 1.0, 1.0, c)
    }

    #[test]
    fn uniform_probabilities() {
        for p in to_probabilities(&[0.3; 5], 1.0) {
            assert!((p - 0.2).abs() < 1e-15);
        }
        let sharp = to_probabilities(&[1.0, 0.0], 1e-3);
        assert!(sharp[0] > 1.0 - 1e-12 && sharp[1] < 1e-12);
    }

    #[test]
    fn self_edges_and_duplicates() {
        let out = postprocess(vec![t(3, 3, 0, 0.9), t(0, 1, 2, 0.4), t(0, 1, 2, 0.7), t(1, 0, 2, 0.1)]);
        assert_eq!(out, vec![t(0, 1, 2, 0.7), t(1, 0, 2, 0.1)]);
        assert!(postprocess(Vec::new()).is_empty());
    }

    #[test]
    fn select_top_m() {
        let xs = vec![t(0, 1, 0, 0.2), t(0, 1, 1, 0.9), t(1, 2, 0, 0.5)];
        assert_eq!(rank_and_select(xs.clone(), 2), vec![t(0, 1, 1, 0.9), t(1, 2, 0, 0.5)]);
        assert_eq!(rank_and_select(xs, 10).len(), 3);
    }

    #[test]
    fn ties_break_on_indices() {
        let out = rank_and_select(vec![t(2, 0, 0, 0.5), t(0, 2, 1, 0.5), t(0, 2, 0, 0.5)], 3);
        let keys: Vec<_> = out.iter().map(|x| x.key()).collect();
        assert_eq!(keys, vec![(0, 2, 0), (0, 2, 1), (2, 0, 0)]);
    }

    #[test]
    fn graph_constraint_keeps_best_per_pair() {
        let ranked = rank_and_select(vec![t(0, 1, 0, 0.2), t(0, 1, 1, 0.9), t(1, 0, 0, 0.5)], 10);
        let kept = apply_graph_constraint(ranked, |x| (x.subj_index, x.obj_index));
        assert_eq!(kept, vec![t(0, 1, 1, 0.9), t(1, 0, 0, 0.5)]);
    }

    #[test]
    fn infer_builds_ranked_graph() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        let ents = vec![
            SceneEntity { label: "man".into(), bbox: b, prob: 0.9 },
            SceneEntity { label: "horse".into(), bbox: b, prob: 0.8 },
            SceneEntity { label: "man".into(), bbox: b, prob: 1.0 },
        ];
        let s = [2.0, 0.0, 1.0];
        let rels = [
            RelationScores { subj: 0, obj: 1, scores: &s },
            RelationScores { subj: 1, obj: 1, scores: &s },
            RelationScores { subj: 0, obj: 2, scores: &s },
        ];
        let opts = InferOptions { top_m: 4, ..Default::default() };
        let g = infer_image("img", ents.clone(), &rels, &opts);
        assert_eq!(g.triplets.len(), 4);
        assert_eq!((g.triplets[0].subj, g.triplets[0].obj, g.triplets[0].pred), (0, 2, 0));
        assert!(g.triplets.windows(2).all(|w| w[0].score >= w[1].score));
        assert!(g.triplets.iter().all(|x| x.subj != x.obj));

        let opts = InferOptions { drop_same_label: true, ..Default::default() };
        let g = infer_image("img", ents, &rels, &opts);
        assert!(g.triplets.iter().all(|x| x.obj == 1));
    }
}
