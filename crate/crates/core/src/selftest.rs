//! Small embedded checks from every module, run by the `selftest` command.

use std::sync::Arc;

use serde::Serialize;

use crate::clustering::{kmeans_rows, KMeansParams, SuperEntityMap};
use crate::embedding::{cosine, io, EmbeddingMatrix};
use crate::eval::{match_triplets, GroundTruthScene, GtEntity, GtRelation, Protocol};
use crate::gradcheck::{run_all, GradCheckParams};
use crate::inference::{infer_image, InferOptions, RelationScores, SceneEntity};
use crate::losses::{bbox_loss, entity_ce, predicate_focal, BBox};
use crate::miner::parse_region_descriptions;
use crate::prompts::{entity_prompt, index_hierarchy, PredicateSplit, RegionDescriptionSet, Vocabulary};
use crate::scorer::{score_batch, Proposal, ProposalBatch, ScorerConfig};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub module: &'static str,
    pub check: &'static str,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, msg: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.to_string())
    }
}

fn embedding_round_trip() -> Result<(), String> {
    let m = EmbeddingMatrix::from_rows(3, vec!["a".into(), "b".into()], vec![vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 0.25]], false)
        .map_err(|e| e.to_string())?;
    let back = io::decode_binary(&io::encode_binary(&m)).map_err(|e| e.to_string())?;
    ensure(back.as_slice() == m.as_slice() && back.labels() == m.labels(), "binary round trip changed the matrix")
}

fn cosine_range() -> Result<(), String> {
    let c = cosine(&[1.0, 2.0], &[-2.0, -4.0]).map_err(|e| e.to_string())?;
    ensure((c + 1.0).abs() < 1e-15 && c >= -1.0, "antiparallel vectors must give -1")
}

fn kmeans_two_blobs() -> Result<(), String> {
    let pts = [[0.0, 1.0], [0.1, 1.0], [5.0, 1.0], [5.1, 1.0]];
    let rows: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
    let r = kmeans_rows(&rows, 2, 0, &KMeansParams::default()).map_err(|e| e.to_string())?;
    ensure(
        r.assignment[0] == r.assignment[1] && r.assignment[2] == r.assignment[3] && r.assignment[0] != r.assignment[2],
        "blobs were split incorrectly",
    )?;
    ensure(r.sse_history.windows(2).all(|w| w[1] <= w[0]), "sse increased")
}

fn prompt_template() -> Result<(), String> {
    ensure(
        entity_prompt("male", "riding", "ground transport") == "A photo of a male riding a ground transport",
        "entity template drifted",
    )
}

fn tiny_scoring() -> Result<(), String> {
    let vocab = Vocabulary::new(
        vec!["man".into(), "horse".into()],
        vec![("on".into(), PredicateSplit::Base), ("riding".into(), PredicateSplit::Novel)],
    )
    .map_err(|e| e.to_string())?;
    let smap = SuperEntityMap {
        super_names: vec!["male".into(), "animal".into()],
        assignment: [("man".to_string(), 0), ("horse".to_string(), 1)].into(),
        centroids: Vec::new(),
    };
    let prompts = crate::prompts::all_prompt_strings(&vocab, &smap, &RegionDescriptionSet::default());
    let encoder = crate::synth::HashEncoder::new(16, 1);
    let text = Arc::new(encoder.encode_all(&prompts).map_err(|e| e.to_string())?);
    let hier = index_hierarchy(&vocab, &smap, &RegionDescriptionSet::default(), text).map_err(|e| e.to_string())?;
    let target = hier.entity_embedding(hier.pair_for_labels("man", "horse").unwrap(), 1).to_vec();
    let feats = EmbeddingMatrix::from_rows(16, vec!["r".into()], vec![target], false).map_err(|e| e.to_string())?;
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let proposal = Proposal {
        subj_box: b,
        obj_box: b,
        union_box: b,
        subj_label: Some("man".into()),
        obj_label: Some("horse".into()),
        feature_row: 0,
    };
    let batch = ProposalBatch::new(vec![proposal], feats.clone(), feats).map_err(|e| e.to_string())?;
    let scored = score_batch(&batch, &hier, &ScorerConfig::default()).map_err(|e| e.to_string())?;
    let row = scored.scores.row(0);
    ensure(row[1] > row[0] && (row[1] - 1.0).abs() < 1e-12, "planted predicate not recovered")
}

fn loss_identities() -> Result<(), String> {
    let b = BBox::new(1.0, 1.0, 3.0, 4.0).unwrap();
    ensure(bbox_loss(&b, &b).value == 0.0, "bbox_loss(b, b) must be 0")?;
    let z = [0.2, -0.7, 1.5];
    let ce = entity_ce(&z, 1).map_err(|e| e.to_string())?.value;
    let fl = predicate_focal(&z, 1, 0.0, 1.0).map_err(|e| e.to_string())?.value;
    ensure(ce.to_bits() == fl.to_bits(), "focal(gamma=0) must equal cross-entropy")
}

fn gradients() -> Result<(), String> {
    let report = run_all(&GradCheckParams { points: 10, ..Default::default() });
    ensure(report.passed(), "finite-difference mismatch")
}

fn inference_filters() -> Result<(), String> {
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let ents = vec![
        SceneEntity { label: "a".into(), bbox: b, prob: 1.0 },
        SceneEntity { label: "b".into(), bbox: b, prob: 1.0 },
    ];
    let s = [0.0, 1.0];
    let rels = [RelationScores { subj: 0, obj: 0, scores: &s }, RelationScores { subj: 0, obj: 1, scores: &s }];
    let g = infer_image("x", ents, &rels, &InferOptions::default());
    ensure(g.triplets.len() == 2 && g.triplets.iter().all(|t| t.subj != t.obj), "self edges survived")
}

fn predcls_match() -> Result<(), String> {
    let b = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
    let ents = vec![
        SceneEntity { label: "a".into(), bbox: b, prob: 1.0 },
        SceneEntity { label: "b".into(), bbox: b, prob: 1.0 },
    ];
    let s = [0.0, 1.0];
    let g = infer_image("x", ents, &[RelationScores { subj: 0, obj: 1, scores: &s }], &InferOptions::default());
    let gt = GroundTruthScene {
        image_id: "x".into(),
        entities: vec![GtEntity { label: "a".into(), bbox: b }, GtEntity { label: "b".into(), bbox: b }],
        relations: vec![GtRelation { subj: 0, obj: 1, predicate: 1 }],
    };
    let m = match_triplets(&g, &gt, Protocol::PredCls, 0.5).map_err(|e| e.to_string())?;
    ensure(m.matched_rank == vec![Some(0)], "top prediction should match")
}

fn miner_parse() -> Result<(), String> {
    let parsed = parse_region_descriptions("Region Descriptions: [\"one\", \"two\"]");
    ensure(parsed == Some(vec!["one".into(), "two".into()]), "description list not parsed")
}

const CHECKS: [(&str, &str, Check); 11] = [
    ("embedding", "binary round trip", embedding_round_trip),
    ("embedding", "cosine range", cosine_range),
    ("clustering", "two blobs", kmeans_two_blobs),
    ("prompts", "entity template", prompt_template),
    ("miner", "description parsing", miner_parse),
    ("scorer", "planted predicate", tiny_scoring),
    ("losses", "identities", loss_identities),
    ("losses", "finite differences", gradients),
    ("inference", "self-edge filter", inference_filters),
    ("evaluation", "predcls match", predcls_match),
    ("evaluation", "protocol parse", || ensure("sgdet".parse::<Protocol>() == Ok(Protocol::SgDet), "protocol name")),
];

pub fn run_selftest() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(module, check, f)| {
            let outcome = f();
            CheckResult {
                module,
                check,
                passed: outcome.is_ok(),
                detail: outcome.err(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_check_passes() {
        for r in super::run_selftest() {
            assert!(r.passed, "{}/{}: {:?}", r.module, r.check, r.detail);
        }
    }
}
