//! On-disk proposal, score, and prediction files and the glue between them.

use std::path::Path;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingMatrix, ScoreTensor};
use crate::inference::{infer_image, InferOptions, RelationScores, SceneEntity, SceneGraphOut};
use crate::losses::BBox;
use crate::scorer::{Proposal, ProposalBatch, ScoreError};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus: {0}")]
    Invalid(String),
    #[error("cannot read or write {path}: {message}")]
    Io { path: String, message: String },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
}

impl CorpusError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Invalid(_) => "InvalidCorpus",
            Self::Io { .. } => "IoFailure",
            Self::Parse { .. } => "ParseFailure",
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CorpusError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn default_prob() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalEntity {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default = "default_prob")]
    pub prob: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalRelation {
    pub subj: usize,
    pub obj: usize,
    pub feature_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalImage {
    pub image_id: String,
    pub entities: Vec<ProposalEntity>,
    pub relations: Vec<ProposalRelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalFile {
    pub images: Vec<ProposalImage>,
}

impl ProposalFile {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let mut ids = std::collections::BTreeSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id.as_str()) {
                return Err(CorpusError::Invalid(format!("duplicate image id {:?}", img.image_id)));
            }
            for (i, e) in img.entities.iter().enumerate() {
                if !(0.0..=1.0).contains(&e.prob) {
                    return Err(CorpusError::Invalid(format!(
                        "image {:?} entity {i} has probability {}",
                        img.image_id, e.prob
                    )));
                }
            }
            let n = img.entities.len();
            for (i, r) in img.relations.iter().enumerate() {
                if r.subj >= n || r.obj >= n {
                    return Err(CorpusError::Invalid(format!(
                        "image {:?} relation {i} references a missing entity",
                        img.image_id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_relations(&self) -> usize {
        self.images.iter().map(|i| i.relations.len()).sum()
    }

    /// Flattens every relation, in file order, into one scoring batch.
    pub fn to_batch(&self, relation: EmbeddingMatrix, union: EmbeddingMatrix) -> Result<ProposalBatch, ScoreError> {
        self.validate().map_err(|e| ScoreError::InvalidBatch(e.to_string()))?;
        let proposals = self
            .images
            .iter()
            .flat_map(|img| {
                img.relations.iter().map(move |r| {
                    let (s, o) = (&img.entities[r.subj], &img.entities[r.obj]);
                    Proposal {
                        subj_box: s.bbox,
                        obj_box: o.bbox,
                        union_box: s.bbox.union(&o.bbox),
                        subj_label: s.label.clone(),
                        obj_label: o.label.clone(),
                        feature_row: r.feature_row,
                    }
                })
            })
            .collect();
        ProposalBatch::new(proposals, relation, union)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationScoreRecord {
    pub subj: usize,
    pub obj: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub image_id: String,
    pub relations: Vec<RelationScoreRecord>,
}

/// Raw predicate scores per relation, grouped by image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoresFile {
    pub predicates: Vec<String>,
    pub images: Vec<ImageScores>,
}

impl ScoresFile {
    /// Regroups a flat score tensor produced from [`ProposalFile::to_batch`].
    pub fn from_tensor(proposals: &ProposalFile, scores: &ScoreTensor, predicates: Vec<String>) -> Self {
        let mut row = 0;
        let images = proposals
            .images
            .iter()
            .map(|img| ImageScores {
                image_id: img.image_id.clone(),
                relations: img
                    .relations
                    .iter()
                    .map(|r| {
                        let rec = RelationScoreRecord {
                            subj: r.subj,
                            obj: r.obj,
                            scores: scores.row(row).to_vec(),
                        };
                        row += 1;
                        rec
                    })
                    .collect(),
            })
            .collect();
        Self { predicates, images }
    }
}

/// Runs inference image by image; output follows proposal-file order.
pub fn infer_corpus(
    proposals: &ProposalFile,
    scores: &ScoresFile,
    opts: &InferOptions,
) -> Result<Vec<SceneGraphOut>, CorpusError> {
    proposals.validate()?;
    if proposals.images.len() != scores.images.len() {
        return Err(CorpusError::Invalid(format!(
            "{} proposal images but {} scored images",
            proposals.images.len(),
            scores.images.len()
        )));
    }
    let cp = scores.predicates.len();
    proposals
        .images
        .par_iter()
        .zip(&scores.images)
        .map(|(img, sc)| {
            if img.image_id != sc.image_id || img.relations.len() != sc.relations.len() {
                return Err(CorpusError::Invalid(format!(
                    "scores do not line up with proposals for image {:?}",
                    img.image_id
                )));
            }
            let mut rels = Vec::with_capacity(sc.relations.len());
            for (r, s) in img.relations.iter().zip(&sc.relations) {
                if (r.subj, r.obj) != (s.subj, s.obj) || s.scores.len() != cp {
                    return Err(CorpusError::Invalid(format!(
                        "malformed score record in image {:?}",
                        img.image_id
                    )));
                }
                rels.push(RelationScores {
                    subj: s.subj,
                    obj: s.obj,
                    scores: &s.scores,
                });
            }
            let entities = img
                .entities
                .iter()
                .map(|e| SceneEntity {
                    label: e.label.clone().unwrap_or_default(),
                    bbox: e.bbox,
                    prob: e.prob,
                })
                .collect();
            Ok(infer_image(&img.image_id, entities, &rels, opts))
        })
        .collect()
}

/// Reads predictions from a JSON array, a single graph object, or a
/// directory of such files (in file-name order).
pub fn load_predictions(path: &Path) -> Result<Vec<SceneGraphOut>, CorpusError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        Many(Vec<SceneGraphOut>),
        One(SceneGraphOut),
    }
    let read = |p: &Path| -> Result<Vec<SceneGraphOut>, CorpusError> {
        Ok(match read_json::<OneOrMany>(p)? {
            OneOrMany::Many(v) => v,
            OneOrMany::One(g) => vec![g],
        })
    };
    if !path.is_dir() {
        return read(path);
    }
    let io = |e: std::io::Error| CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut files: Vec<_> = std::fs::read_dir(path)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    files.retain(|p| p.extension().is_some_and(|x| x == "json"));
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(read(&f)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entity(label: &str, x: f64) -> ProposalEntity {
        ProposalEntity {
            label: Some(label.into()),
            bbox: BBox::new(x, 0.0, x + 1.0, 1.0).unwrap(),
            prob: 1.0,
        }
    }

    fn file() -> ProposalFile {
        ProposalFile {
            images: vec![ProposalImage {
                image_id: "a".into(),
                entities: vec![entity("man", 0.0), entity("horse", 2.0)],
                relations: vec![
                    ProposalRelation { subj: 0, obj: 1, feature_row: 0 },
                    ProposalRelation { subj: 1, obj: 0, feature_row: 1 },
                ],
            }],
        }
    }

    #[test]
    fn union_boxes_cover_both() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let m = || EmbeddingMatrix::from_rows(2, vec!["0".into(), "1".into()], rows.clone(), false).unwrap();
        let batch = file().to_batch(m(), m()).unwrap();
        assert_eq!(batch.proposals[0].union_box.coords(), [0.0, 0.0, 3.0, 1.0]);
    }

    #[test]
    fn validation_catches_bad_indices() {
        let mut f = file();
        f.images[0].relations[0].obj = 5;
        assert!(f.validate().is_err());
        let mut f = file();
        f.images.push(f.images[0].clone());
        assert!(f.validate().is_err());
    }

    #[test]
    fn scores_regroup_and_infer() {
        let f = file();
        let t = ScoreTensor::from_rows(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = ScoresFile::from_tensor(&f, &t, vec!["on".into(), "near".into()]);
        assert_eq!(s.images[0].relations[1].scores, vec![0.0, 1.0]);
        let graphs = infer_corpus(&f, &s, &InferOptions::default()).unwrap();
        assert_eq!(graphs[0].triplets.len(), 4);
        assert_eq!((graphs[0].triplets[0].subj, graphs[0].triplets[0].pred), (0, 0));
    }

    #[test]
    fn predictions_from_file_and_dir() {
        let dir = tempfile::tempdir().unwrap();
        let f = file();
        let t = ScoreTensor::from_rows(2, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let s = ScoresFile::from_tensor(&f, &t, vec!["on".into(), "near".into()]);
        let graphs = infer_corpus(&f, &s, &InferOptions::default()).unwrap();
        let all = dir.path().join("all.json");
        write_json(&all, &graphs).unwrap();
        assert_eq!(load_predictions(&all).unwrap(), graphs);
        let sub = dir.path().join("graphs");
        std::fs::create_dir(&sub).unwrap();
        write_json(&sub.join("a.json"), &graphs[0]).unwrap();
        assert_eq!(load_predictions(&sub).unwrap(), graphs);
    }
}
