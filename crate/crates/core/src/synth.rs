//! Deterministic synthetic fixtures: a hash-seeded stand-in text encoder,
//! region descriptions, and proposal corpora with planted predicates.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::eval::{GroundTruthScene, GtEntity, GtRelation};
use crate::corpus::{ProposalEntity, ProposalFile, ProposalImage, ProposalRelation};
use crate::losses::BBox;
use crate::prompts::{PromptHierarchy, RegionDescriptionSet, RegionKey, Vocabulary};

/// Maps any string to a fixed pseudo-random unit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEncoder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        assert!(dim > 0, "dim must be positive");
        Self { dim, seed }
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(text.as_bytes());
        let digest: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        v
    }

    /// One labeled, normalized row per text.
    pub fn encode_all(&self, texts: &[String]) -> Result<EmbeddingMatrix, EmbeddingError> {
        let rows: Vec<Vec<f64>> = texts.par_iter().map(|t| self.encode(t)).collect();
        EmbeddingMatrix::from_rows(self.dim, texts.to_vec(), rows, true)
    }
}

pub const DESCRIPTIONS_PER_PREDICATE: usize = 6;
pub const MAX_DESCRIPTIONS_PER_TRIPLET: usize = 4;

/// Pool of region descriptions for one predicate.
pub fn description_pool(predicate: &str) -> Vec<String> {
    (0..DESCRIPTIONS_PER_PREDICATE)
        .map(|i| format!("contact cue {i} of something {predicate} something"))
        .collect()
}

/// Between 0 and 4 descriptions per (super, predicate, super) triplet,
/// drawn from the predicate's pool so rows are shared across pairs.
pub fn synthetic_regions(super_names: &[String], vocab: &Vocabulary, seed: u64) -> RegionDescriptionSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pools: Vec<Vec<String>> = vocab.predicate_names().iter().map(|p| description_pool(p)).collect();
    let mut set = RegionDescriptionSet::default();
    for s in super_names {
        for o in super_names {
            for (p, name) in vocab.predicate_names().iter().enumerate() {
                let n = rng.random_range(0..=MAX_DESCRIPTIONS_PER_TRIPLET);
                if n == 0 {
                    continue;
                }
                let picks = rand::seq::index::sample(&mut rng, DESCRIPTIONS_PER_PREDICATE, n);
                let descriptions = picks.iter().map(|i| pools[p][i].clone()).collect();
                set.insert(RegionKey::new(s.clone(), name.clone(), o.clone()), descriptions);
            }
        }
    }
    set
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusParams {
    pub images: usize,
    pub entities_per_image: usize,
    pub proposals_per_image: usize,
    /// Leading proposals of each image that become ground truth.
    pub gt_per_image: usize,
    /// Norm of the Gaussian perturbation added to planted features.
    pub noise: f64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            images: 100,
            entities_per_image: 12,
            proposals_per_image: 100,
            gt_per_image: 10,
            noise: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub proposals: ProposalFile,
    pub relation: EmbeddingMatrix,
    pub union: EmbeddingMatrix,
    pub ground_truth: Vec<GroundTruthScene>,
}

fn perturbed(base: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = noise / (base.len() as f64).sqrt();
    base.iter()
        .map(|&x| x + scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

fn mean_rows(rows: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; rows[0].len()];
    for r in rows {
        out.iter_mut().zip(r.iter()).for_each(|(o, x)| *o += x);
    }
    out.iter_mut().for_each(|o| *o /= rows.len() as f64);
    out
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let x1 = rng.random_range(0..560) as f64;
    let y1 = rng.random_range(0..400) as f64;
    let w = rng.random_range(16..240) as f64;
    let h = rng.random_range(16..240) as f64;
    BBox::new(x1, y1, x1 + w, y1 + h).expect("positive extent")
}

/// Generates labeled proposals whose relation features sit near the entity
/// prompt of a planted predicate and whose union features sit near that
/// predicate's region prompts.
pub fn synthetic_corpus(
    hier: &PromptHierarchy,
    vocab: &Vocabulary,
    params: &CorpusParams,
    seed: u64,
) -> SyntheticCorpus {
    let max_pairs = params.entities_per_image * params.entities_per_image.saturating_sub(1);
    assert!(params.proposals_per_image <= max_pairs, "not enough entity pairs");
    assert!(params.gt_per_image <= params.proposals_per_image);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = hier.dim();
    let cp = vocab.num_predicates();
    let mut images = Vec::with_capacity(params.images);
    let mut ground_truth = Vec::with_capacity(params.images);
    let (mut r_rows, mut u_rows, mut row_labels) = (Vec::new(), Vec::new(), Vec::new());

    for i in 0..params.images {
        let image_id = format!("img{i:05}");
        let entities: Vec<ProposalEntity> = (0..params.entities_per_image)
            .map(|_| ProposalEntity {
                label: Some(vocab.entities.choose(&mut rng).expect("entities").clone()),
                bbox: random_box(&mut rng),
                prob: 1.0,
            })
            .collect();
        let mut pairs: Vec<(usize, usize)> = (0..entities.len())
            .flat_map(|s| (0..entities.len()).filter(move |&o| o != s).map(move |o| (s, o)))
            .collect();
        pairs.shuffle(&mut rng);
        pairs.truncate(params.proposals_per_image);

        let mut relations = Vec::with_capacity(pairs.len());
        let mut gt_relations = Vec::new();
        for (n, &(s, o)) in pairs.iter().enumerate() {
            let planted = rng.random_range(0..cp);
            let labels = (entities[s].label.as_deref().unwrap(), entities[o].label.as_deref().unwrap());
            let pair = hier
                .pair_for_labels(labels.0, labels.1)
                .expect("every vocabulary entity has a super entity");
            r_rows.push(perturbed(hier.entity_embedding(pair, planted), params.noise, &mut rng));
            let regions = hier.region_embeddings(pair, planted);
            let u_base = if regions.is_empty() {
                hier.entity_embedding(pair, planted).to_vec()
            } else {
                mean_rows(&regions)
            };
            u_rows.push(perturbed(&u_base, params.noise, &mut rng));
            row_labels.push(format!("{image_id}/{n}"));
            relations.push(ProposalRelation {
                subj: s,
                obj: o,
                feature_row: r_rows.len() - 1,
            });
            if n < params.gt_per_image {
                gt_relations.push(GtRelation { subj: s, obj: o, predicate: planted });
            }
        }
        ground_truth.push(GroundTruthScene {
            image_id: image_id.clone(),
            entities: entities
                .iter()
                .map(|e| GtEntity {
                    label: e.label.clone().unwrap(),
                    bbox: e.bbox,
                })
                .collect(),
            relations: gt_relations,
        });
        images.push(ProposalImage {
            image_id,
            entities,
            relations,
        });
    }

    let relation = EmbeddingMatrix::from_rows(dim, row_labels.clone(), r_rows, false)
        .expect("perturbed rows are finite and nonzero");
    let union = EmbeddingMatrix::from_rows(dim, row_labels, u_rows, false)
        .expect("perturbed rows are finite and nonzero");
    SyntheticCorpus {
        proposals: ProposalFile { images },
        relation,
        union,
        ground_truth,
    }
}

/// Entity embeddings for clustering, one row per vocabulary entity.
pub fn entity_embeddings(vocab: &Vocabulary, encoder: &HashEncoder) -> Result<EmbeddingMatrix, EmbeddingError> {
    encoder.encode_all(&vocab.entities)
}
