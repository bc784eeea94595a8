//! Canned vocabularies and splits for Visual Genome and Open Images v6.

use crate::prompts::{PredicateSplit, Vocabulary};

/// The 30 Visual Genome super entities.
pub const VG_SUPER_ENTITIES: [&str; 30] = [
    "male",
    "female",
    "children",
    "pets",
    "wild animal",
    "ground transport",
    "water transport",
    "air transport",
    "sports equipment",
    "seating furniture",
    "decorative item",
    "table",
    "upper body clothing",
    "lower body clothing",
    "footwear",
    "accessory",
    "fruit",
    "vegetable",
    "prepared food",
    "beverage",
    "utensils",
    "container",
    "textile",
    "landscape",
    "urban feature",
    "plant",
    "structure",
    "household item",
    "head part",
    "limb and appendage",
];

/// The 53 Open Images v6 super entities (spelling as published).
pub const OIV6_SUPER_ENTITIES: [&str; 53] = [
    "male",
    "female",
    "children",
    "head feature",
    "limb feature",
    "torso feature",
    "accessorie",
    "mammal",
    "bird",
    "reptile",
    "insect",
    "marine animal",
    "bike",
    "ground vehicle",
    "watercraft",
    "aircraft",
    "vehicle part item",
    "ball-related sport item",
    "water sport item",
    "winter sport item",
    "seating furniture",
    "table furniture",
    "storage furniture",
    "bedding",
    "upper body clothing",
    "lower body clothing",
    "footwear",
    "fruit",
    "vegetable",
    "prepared food",
    "beverage",
    "appliance",
    "utensil",
    "decorative item",
    "textile",
    "hand tool",
    "power tool",
    "kitchen tool",
    "personal electronic",
    "home electronic",
    "office electronic",
    "land vehicle",
    "water vehicle",
    "air vehicle",
    "string instrument",
    "wind instrument",
    "percussion instrument",
    "firearm",
    "container",
    "toy",
    "stationery",
    "landscape",
    "urban feature",
];

/// The standard 150 Visual Genome entity categories.
pub const VG_ENTITIES: [&str; 150] = [
    "airplane", "animal", "arm", "bag", "banana", "basket", "beach", "bear", "bed", "bench",
    "bike", "bird", "board", "boat", "book", "boot", "bottle", "bowl", "box", "boy",
    "branch", "building", "bus", "cabinet", "cap", "car", "cat", "chair", "child", "clock",
    "coat", "counter", "cow", "cup", "curtain", "desk", "dog", "door", "drawer", "ear",
    "elephant", "engine", "eye", "face", "fence", "finger", "flag", "flower", "food", "fork",
    "fruit", "giraffe", "girl", "glass", "glove", "guy", "hair", "hand", "handle", "hat",
    "head", "helmet", "hill", "horse", "house", "jacket", "jean", "kid", "kite", "lady",
    "lamp", "laptop", "leaf", "leg", "letter", "light", "logo", "man", "men", "motorcycle",
    "mountain", "mouth", "neck", "nose", "number", "orange", "pant", "paper", "paw", "people",
    "person", "phone", "pillow", "pizza", "plane", "plant", "plate", "player", "pole", "post",
    "pot", "racket", "railing", "rock", "roof", "room", "screen", "seat", "sheep", "shelf",
    "shirt", "shoe", "short", "sidewalk", "sign", "sink", "skateboard", "ski", "skier", "sneaker",
    "snow", "sock", "stand", "street", "surfboard", "table", "tail", "tie", "tile", "tire",
    "toilet", "towel", "tower", "track", "train", "tree", "truck", "trunk", "umbrella", "vase",
    "vegetable", "vehicle", "wave", "wheel", "window", "windshield", "wing", "wire", "woman", "zebra",
];

pub const VG_PREDCLS_BASE: [&str; 35] = [
    "above",
    "against",
    "at",
    "attached to",
    "behind",
    "belonging to",
    "between",
    "carrying",
    "covered in",
    "covering",
    "for",
    "from",
    "hanging from",
    "has",
    "holding",
    "in",
    "in front of",
    "looking at",
    "made of",
    "near",
    "of",
    "on",
    "over",
    "parked on",
    "playing",
    "riding",
    "sitting on",
    "standing on",
    "to",
    "under",
    "walking on",
    "watching",
    "wearing",
    "wears",
    "with",
];

pub const VG_PREDCLS_NOVEL: [&str; 15] = [
    "across",
    "along",
    "and",
    "eating",
    "flying in",
    "growing on",
    "laying on",
    "lying on",
    "mounted on",
    "on back of",
    "painted on",
    "part of",
    "says",
    "using",
    "walking in",
];

pub const VG_SGDET_BASE: [&str; 35] = [
    "between",
    "to",
    "made of",
    "looking at",
    "along",
    "laying on",
    "using",
    "carrying",
    "against",
    "mounted on",
    "sitting on",
    "flying in",
    "covering",
    "from",
    "over",
    "near",
    "hanging from",
    "across",
    "at",
    "above",
    "watching",
    "covered in",
    "wearing",
    "holding",
    "and",
    "standing on",
    "lying on",
    "growing on",
    "under",
    "on back of",
    "with",
    "has",
    "in front of",
    "behind",
    "parked on",
];

pub const VG_SGDET_NOVEL: [&str; 15] = [
    "belonging to",
    "part of",
    "riding",
    "walking in",
    "in",
    "of",
    "painted on",
    "playing",
    "for",
    "walking on",
    "says",
    "attached to",
    "eating",
    "on",
    "wears",
];

pub const OIV6_BASE: [&str; 9] = [
    "at",
    "holds",
    "wears",
    "holding hands",
    "on",
    "highfive",
    "contain",
    "handshake",
    "talk on phone",
];

pub const OIV6_NOVEL: [&str; 21] = [
    "surf",
    "hang",
    "drink",
    "ride",
    "dance",
    "skateboard",
    "catch",
    "inside of",
    "eat",
    "cut",
    "kiss",
    "interacts with",
    "under",
    "hug",
    "throw",
    "hits",
    "snowboard",
    "kick",
    "ski",
    "plays",
    "read",
];

fn vocabulary(entities: &[&str], base: &[&str], novel: &[&str]) -> Vocabulary {
    let mut predicates: Vec<(String, PredicateSplit)> = base
        .iter()
        .map(|p| (p.to_string(), PredicateSplit::Base))
        .chain(novel.iter().map(|p| (p.to_string(), PredicateSplit::Novel)))
        .collect();
    predicates.sort_by(|a, b| a.0.cmp(&b.0));
    Vocabulary::new(entities.iter().map(|e| e.to_string()).collect(), predicates)
        .expect("canned vocabulary is valid")
}

/// VG150 entities with the 50 predicates split for PredCLS, predicates in
/// alphabetical order.
pub fn vg_predcls_vocabulary() -> Vocabulary {
    vocabulary(&VG_ENTITIES, &VG_PREDCLS_BASE, &VG_PREDCLS_NOVEL)
}

/// VG150 entities with the 50 predicates split for SGDet.
pub fn vg_sgdet_vocabulary() -> Vocabulary {
    vocabulary(&VG_ENTITIES, &VG_SGDET_BASE, &VG_SGDET_NOVEL)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn set<'a>(xs: &[&'a str]) -> BTreeSet<&'a str> {
        xs.iter().copied().collect()
    }

    #[test]
    fn vg_splits_partition_the_same_fifty_predicates() {
        let predcls: BTreeSet<_> = set(&VG_PREDCLS_BASE).union(&set(&VG_PREDCLS_NOVEL)).copied().collect();
        let sgdet: BTreeSet<_> = set(&VG_SGDET_BASE).union(&set(&VG_SGDET_NOVEL)).copied().collect();
        assert_eq!(predcls.len(), 50);
        assert_eq!(predcls, sgdet);
        assert!(set(&VG_PREDCLS_BASE).is_disjoint(&set(&VG_PREDCLS_NOVEL)));
        assert!(set(&VG_SGDET_BASE).is_disjoint(&set(&VG_SGDET_NOVEL)));
    }

    #[test]
    fn canned_lists_are_unique() {
        assert_eq!(set(&VG_ENTITIES).len(), 150);
        assert_eq!(set(&VG_SUPER_ENTITIES).len(), 30);
        assert_eq!(set(&OIV6_SUPER_ENTITIES).len(), 53);
        assert_eq!(set(&OIV6_BASE).len() + set(&OIV6_NOVEL).len(), 30);
    }

    #[test]
    fn vocabularies_build() {
        let v = vg_predcls_vocabulary();
        assert_eq!(v.num_predicates(), 50);
        assert_eq!(v.split_predicates(PredicateSplit::Base).len(), 35);
        assert_eq!(v.split_predicates(PredicateSplit::Novel).len(), 15);
    }
}
