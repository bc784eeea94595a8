//! Two-level prompt hierarchy.
//!
//! Entity-aware prompts instantiate one sentence per (super-subject,
//! super-object, predicate) triplet. Region-aware prompts wrap mined region
//! descriptions of the same triplets. [`index_hierarchy`] resolves every
//! prompt string to a row of a text-embedding matrix labeled by prompt text.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::SuperEntityMap;
use crate::embedding::EmbeddingMatrix;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("no embedding row for prompt {0:?}")]
    MissingEmbedding(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("invalid region descriptions: {0}")]
    InvalidRegions(String),
    #[error("i/o failure on {path}: {message}")]
    Io { path: String, message: String },
}

impl PromptError {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::MissingEmbedding(_) => "MissingEmbedding",
            Self::DimensionMismatch { .. } => "DimensionMismatch",
            Self::InvalidVocabulary(_) => "InvalidVocabulary",
            Self::InvalidRegions(_) => "InvalidRegions",
            Self::Io { .. } => "IoFailure",
        }
    }
}

fn read_file(path: &Path) -> Result<String, PromptError> {
    std::fs::read_to_string(path).map_err(|e| PromptError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredicateSplit {
    Base,
    Novel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub name: String,
    pub split: PredicateSplit,
}

/// Entity and predicate vocabularies with the base/novel predicate split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile")]
pub struct Vocabulary {
    pub entities: Vec<String>,
    pub predicates: Vec<Predicate>,
}

#[derive(Deserialize)]
struct VocabularyFile {
    entities: Vec<String>,
    predicates: Vec<Predicate>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = PromptError;

    fn try_from(f: VocabularyFile) -> Result<Self, Self::Error> {
        let v = Vocabulary {
            entities: f.entities,
            predicates: f.predicates,
        };
        v.validate()?;
        Ok(v)
    }
}

impl Vocabulary {
    pub fn new(
        entities: Vec<String>,
        predicates: Vec<(String, PredicateSplit)>,
    ) -> Result<Self, PromptError> {
        let v = Self {
            entities,
            predicates: predicates
                .into_iter()
                .map(|(name, split)| Predicate { name, split })
                .collect(),
        };
        v.validate()?;
        Ok(v)
    }

    fn validate(&self) -> Result<(), PromptError> {
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.entities.iter().find(|e| !seen.insert(e.as_str())) {
            return Err(PromptError::InvalidVocabulary(format!("duplicate entity {dup:?}")));
        }
        let mut seen = BTreeSet::new();
        if let Some(dup) = self.predicates.iter().find(|p| !seen.insert(p.name.as_str())) {
            return Err(PromptError::InvalidVocabulary(format!(
                "duplicate predicate {:?}",
                dup.name
            )));
        }
        if !self.predicates.iter().any(|p| p.split == PredicateSplit::Base) {
            return Err(PromptError::InvalidVocabulary("no base predicate".into()));
        }
        Ok(())
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn predicate_names(&self) -> Vec<String> {
        self.predicates.iter().map(|p| p.name.clone()).collect()
    }

    pub fn predicate_index(&self, name: &str) -> Option<usize> {
        self.predicates.iter().position(|p| p.name == name)
    }

    /// Indices of the predicates in `split`.
    pub fn split_predicates(&self, split: PredicateSplit) -> Vec<usize> {
        self.predicates
            .iter()
            .enumerate()
            .filter(|(_, p)| p.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("vocabulary serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, PromptError> {
        serde_json::from_str(s).map_err(|e| PromptError::InvalidVocabulary(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&read_file(path)?)
    }
}

/// Ordered (super-subject, super-object) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SuperPair {
    pub subject: usize,
    pub object: usize,
}

impl SuperPair {
    pub fn new(subject: usize, object: usize) -> Self {
        Self { subject, object }
    }

    /// Row-major index among the `num_super^2` pairs.
    pub fn index(self, num_super: usize) -> usize {
        self.subject * num_super + self.object
    }

    pub fn from_index(j: usize, num_super: usize) -> Self {
        Self::new(j / num_super, j % num_super)
    }
}

/// "an" before a vowel-initial surface form, "a" otherwise.
pub fn article(noun: &str) -> &'static str {
    match noun.trim_start().chars().next().map(|c| c.to_ascii_lowercase()) {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

pub fn entity_prompt(subject: &str, predicate: &str, object: &str) -> String {
    format!(
        "A photo of {} {subject} {predicate} {} {object}",
        article(subject),
        article(object)
    )
}

pub fn region_prompt(description: &str) -> String {
    format!("A region that reflects {description}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityPrompt {
    pub pair: SuperPair,
    pub predicate: usize,
    pub text: String,
}

/// Every entity-aware prompt, pairs in row-major order and predicates in
/// vocabulary order within each pair.
pub fn build_entity_prompts(vocab: &Vocabulary, smap: &SuperEntityMap) -> Vec<EntityPrompt> {
    let n = smap.num_super();
    let mut out = Vec::with_capacity(n * n * vocab.num_predicates());
    for (s, subj) in smap.super_names.iter().enumerate() {
        for (o, obj) in smap.super_names.iter().enumerate() {
            for (p, pred) in vocab.predicates.iter().enumerate() {
                out.push(EntityPrompt {
                    pair: SuperPair::new(s, o),
                    predicate: p,
                    text: entity_prompt(subj, &pred.name, obj),
                });
            }
        }
    }
    out
}

/// A (super-subject, predicate, super-object) triplet by name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RegionKey {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl RegionKey {
    pub fn new(subject: impl Into<String>, predicate: impl Into<String>, object: impl Into<String>) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split('|');
        let key = Self::new(parts.next()?, parts.next()?, parts.next()?);
        parts.next().is_none().then_some(key)
    }
}

impl fmt::Display for RegionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}|{}", self.subject, self.predicate, self.object)
    }
}

/// Mined region descriptions per triplet.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RegionDescriptionSet {
    pub entries: BTreeMap<RegionKey, Vec<String>>,
}

impl RegionDescriptionSet {
    pub fn insert(&mut self, key: RegionKey, descriptions: Vec<String>) {
        self.entries.insert(key, descriptions);
    }

    pub fn get(&self, key: &RegionKey) -> &[String] {
        self.entries.get(key).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn merge(&mut self, other: RegionDescriptionSet) {
        self.entries.extend(other.entries);
    }

    /// Checks keys against super names and predicates and rejects empty descriptions.
    pub fn validate(&self, vocab: &Vocabulary, smap: &SuperEntityMap) -> Result<(), PromptError> {
        let supers: BTreeSet<&str> = smap.super_names.iter().map(String::as_str).collect();
        for (key, descriptions) in &self.entries {
            if !supers.contains(key.subject.as_str()) || !supers.contains(key.object.as_str()) {
                return Err(PromptError::InvalidRegions(format!("{key}: unknown super entity")));
            }
            if vocab.predicate_index(&key.predicate).is_none() {
                return Err(PromptError::InvalidRegions(format!("{key}: unknown predicate")));
            }
            if descriptions.iter().any(|d| d.trim().is_empty()) {
                return Err(PromptError::InvalidRegions(format!("{key}: empty description")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &Vec<String>> =
            self.entries.iter().map(|(k, v)| (k.to_string(), v)).collect();
        serde_json::to_string_pretty(&map).expect("regions serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, PromptError> {
        let raw: BTreeMap<String, Vec<String>> =
            serde_json::from_str(s).map_err(|e| PromptError::InvalidRegions(e.to_string()))?;
        let mut out = Self::default();
        for (k, v) in raw {
            let key = RegionKey::parse(&k)
                .ok_or_else(|| PromptError::InvalidRegions(format!("bad key {k:?}")))?;
            out.insert(key, v);
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self, PromptError> {
        Self::from_json(&read_file(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrompts {
    pub key: RegionKey,
    pub prompts: Vec<String>,
}

/// Wraps every description in the region template, preserving order.
pub fn build_region_prompts(regions: &RegionDescriptionSet) -> Vec<RegionPrompts> {
    regions
        .entries
        .iter()
        .map(|(key, descriptions)| RegionPrompts {
            key: key.clone(),
            prompts: descriptions.iter().map(|d| region_prompt(d)).collect(),
        })
        .collect()
}

/// All distinct prompt strings (entity then region), first-seen order.
pub fn all_prompt_strings(
    vocab: &Vocabulary,
    smap: &SuperEntityMap,
    regions: &RegionDescriptionSet,
) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let entity = build_entity_prompts(vocab, smap).into_iter().map(|p| p.text);
    let region = build_region_prompts(regions).into_iter().flat_map(|r| r.prompts);
    entity.chain(region).filter(|t| seen.insert(t.clone())).collect()
}

/// Prompt texts and embedding-row references for every super pair.
#[derive(Debug, Clone)]
pub struct PromptHierarchy {
    super_names: Vec<String>,
    predicates: Vec<String>,
    assignment: BTreeMap<String, usize>,
    text_emb: Arc<EmbeddingMatrix>,
    /// `[pair * C_p + predicate]` -> text_emb row
    entity_rows: Vec<usize>,
    /// `[pair * C_p + predicate]` -> text_emb rows in description order
    region_rows: Vec<Vec<usize>>,
}

/// Resolves every entity and region prompt to a row of `text_emb` by label.
pub fn index_hierarchy(
    vocab: &Vocabulary,
    smap: &SuperEntityMap,
    regions: &RegionDescriptionSet,
    text_emb: Arc<EmbeddingMatrix>,
) -> Result<PromptHierarchy, PromptError> {
    regions.validate(vocab, smap)?;
    let lookup = |text: &str| {
        text_emb
            .find(text)
            .ok_or_else(|| PromptError::MissingEmbedding(text.to_string()))
    };
    let n = smap.num_super();
    let cp = vocab.num_predicates();
    let mut entity_rows = Vec::with_capacity(n * n * cp);
    for prompt in build_entity_prompts(vocab, smap) {
        entity_rows.push(lookup(&prompt.text)?);
    }
    let super_index: BTreeMap<&str, usize> = smap
        .super_names
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut region_rows = vec![Vec::new(); n * n * cp];
    for rp in build_region_prompts(regions) {
        let pair = SuperPair::new(super_index[rp.key.subject.as_str()], super_index[rp.key.object.as_str()]);
        let p = vocab.predicate_index(&rp.key.predicate).expect("validated");
        let rows = rp.prompts.iter().map(|t| lookup(t)).collect::<Result<Vec<_>, _>>()?;
        region_rows[pair.index(n) * cp + p] = rows;
    }
    Ok(PromptHierarchy {
        super_names: smap.super_names.clone(),
        predicates: vocab.predicate_names(),
        assignment: smap.assignment.clone(),
        text_emb,
        entity_rows,
        region_rows,
    })
}

impl PromptHierarchy {
    pub fn num_super(&self) -> usize {
        self.super_names.len()
    }

    pub fn num_pairs(&self) -> usize {
        self.super_names.len() * self.super_names.len()
    }

    pub fn num_predicates(&self) -> usize {
        self.predicates.len()
    }

    pub fn dim(&self) -> usize {
        self.text_emb.dim()
    }

    pub fn super_names(&self) -> &[String] {
        &self.super_names
    }

    pub fn predicates(&self) -> &[String] {
        &self.predicates
    }

    pub fn text_emb(&self) -> &EmbeddingMatrix {
        &self.text_emb
    }

    pub fn pair(&self, j: usize) -> SuperPair {
        SuperPair::from_index(j, self.num_super())
    }

    pub fn pair_name(&self, j: usize) -> String {
        let p = self.pair(j);
        format!("{}|{}", self.super_names[p.subject], self.super_names[p.object])
    }

    /// Pair index implied by two entity labels, when both map to supers.
    pub fn pair_for_labels(&self, subject: &str, object: &str) -> Option<usize> {
        let s = *self.assignment.get(subject)?;
        let o = *self.assignment.get(object)?;
        Some(SuperPair::new(s, o).index(self.num_super()))
    }

    pub fn entity_row(&self, pair: usize, predicate: usize) -> usize {
        self.entity_rows[pair * self.num_predicates() + predicate]
    }

    pub fn entity_embedding(&self, pair: usize, predicate: usize) -> &[f64] {
        self.text_emb.row(self.entity_row(pair, predicate))
    }

    pub fn entity_prompt(&self, pair: usize, predicate: usize) -> &str {
        self.text_emb.label(self.entity_row(pair, predicate))
    }

    pub fn region_rows(&self, pair: usize, predicate: usize) -> &[usize] {
        &self.region_rows[pair * self.num_predicates() + predicate]
    }

    pub fn region_embeddings(&self, pair: usize, predicate: usize) -> Vec<&[f64]> {
        self.region_rows(pair, predicate)
            .iter()
            .map(|&r| self.text_emb.row(r))
            .collect()
    }

    pub fn total_region_prompts(&self) -> usize {
        self.region_rows.iter().map(Vec::len).sum()
    }

    /// The same hierarchy with every region prompt removed.
    pub fn without_regions(&self) -> Self {
        Self {
            region_rows: vec![Vec::new(); self.region_rows.len()],
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smap(names: &[&str]) -> SuperEntityMap {
        SuperEntityMap {
            super_names: names.iter().map(|s| s.to_string()).collect(),
            assignment: names
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("{s}-entity"), i))
                .collect(),
            centroids: vec![],
        }
    }

    fn vocab(preds: &[&str]) -> Vocabulary {
        Vocabulary::new(
            vec!["x".into()],
            preds.iter().map(|p| (p.to_string(), PredicateSplit::Base)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn entity_template() {
        assert_eq!(
            entity_prompt("male", "sitting on", "seating furniture"),
            "A photo of a male sitting on a seating furniture"
        );
        assert_eq!(
            entity_prompt("accessory", "on", "table"),
            "A photo of an accessory on a table"
        );
        assert_eq!(entity_prompt("Umbrella", "over", "elephant"), "A photo of an Umbrella over an elephant");
    }

    #[test]
    fn entity_prompt_count() {
        let prompts = build_entity_prompts(&vocab(&["on", "near"]), &smap(&["a", "b"]));
        assert_eq!(prompts.len(), 8);
        assert_eq!(prompts[1].pair, SuperPair::new(0, 0));
        assert_eq!(prompts[2].pair, SuperPair::new(0, 1));
        assert_eq!(prompts[2].text, "A photo of an a on a b");
    }

    #[test]
    fn region_template_and_order() {
        let mut regions = RegionDescriptionSet::default();
        let key = RegionKey::new("human", "holding", "wild animal");
        regions.insert(key.clone(), vec!["human holding the animal with hands".into(), "second".into()]);
        regions.insert(RegionKey::new("a", "b", "c"), vec![]);
        let built = build_region_prompts(&regions);
        let held = built.iter().find(|r| r.key == key).unwrap();
        assert_eq!(
            held.prompts,
            vec![
                "A region that reflects human holding the animal with hands",
                "A region that reflects second"
            ]
        );
        assert!(built.iter().find(|r| r.key.subject == "a").unwrap().prompts.is_empty());
    }

    #[test]
    fn region_key_round_trip() {
        let k = RegionKey::new("wild animal", "sitting on", "table");
        assert_eq!(RegionKey::parse(&k.to_string()), Some(k));
        assert_eq!(RegionKey::parse("a|b"), None);
        assert_eq!(RegionKey::parse("a|b|c|d"), None);
    }

    #[test]
    fn vocabulary_rejects_bad_input() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()], vec![("on".into(), PredicateSplit::Base)]).is_err());
        assert!(Vocabulary::new(vec![], vec![("on".into(), PredicateSplit::Novel)]).is_err());
        let raw = r#"{"entities":["a"],"predicates":[{"name":"on","split":"base"},{"name":"on","split":"novel"}]}"#;
        assert!(Vocabulary::from_json(raw).is_err());
    }

    #[test]
    fn missing_embedding_is_named() {
        let v = vocab(&["on"]);
        let m = smap(&["a"]);
        let emb = EmbeddingMatrix::from_rows(2, vec!["unrelated".into()], vec![vec![1.0, 0.0]], false).unwrap();
        let err = index_hierarchy(&v, &m, &RegionDescriptionSet::default(), Arc::new(emb)).unwrap_err();
        match err {
            PromptError::MissingEmbedding(s) => assert_eq!(s, "A photo of an a on an a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn colliding_prompts_share_one_row() {
        // ("red car", "near", X) and ("red", "car near", X) render identically
        let v = vocab(&["near", "car near"]);
        let m = smap(&["red car", "red"]);
        let strings = all_prompt_strings(&v, &m, &RegionDescriptionSet::default());
        assert_eq!(strings.len(), 6);
        let rows: Vec<Vec<f64>> = (0..strings.len())
            .map(|i| {
                let mut r = vec![0.0; 8];
                r[i] = 1.0;
                r
            })
            .collect();
        let emb = EmbeddingMatrix::from_rows(8, strings, rows, true).unwrap();
        let h = index_hierarchy(&v, &m, &RegionDescriptionSet::default(), Arc::new(emb)).unwrap();
        let n = h.num_super();
        let a = h.entity_embedding(SuperPair::new(0, 0).index(n), 0);
        let b = h.entity_embedding(SuperPair::new(1, 0).index(n), 1);
        assert_eq!(h.entity_prompt(0, 0), "A photo of a red car near a red car");
        assert!(std::ptr::eq(a, b));
    }

    #[test]
    fn unknown_region_super_is_rejected() {
        let v = vocab(&["on"]);
        let m = smap(&["a"]);
        let mut regions = RegionDescriptionSet::default();
        regions.insert(RegionKey::new("zzz", "on", "a"), vec!["d".into()]);
        assert!(matches!(regions.validate(&v, &m), Err(PromptError::InvalidRegions(_))));
    }
}
