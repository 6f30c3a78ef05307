//! Closed vocabulary shared by the controlled grammar, the synthetic scene
//! generator, and the toy text encoder. Versioned in `data/vocab.json` so
//! golden tests never drift.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::sync::OnceLock;

const VOCAB_JSON: &str = include_str!("../data/vocab.json");

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationDef {
    pub name: String,
    pub words: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub version: u32,
    pub categories: Vec<String>,
    pub colors: Vec<String>,
    pub materials: Vec<String>,
    pub sizes: Vec<String>,
    pub relations: Vec<RelationDef>,
    pub determiners: Vec<String>,
    pub pronouns: Vec<String>,
    pub copulas: Vec<String>,
    pub mask_token: String,
}

impl Vocab {
    pub fn builtin() -> &'static Vocab {
        static V: OnceLock<Vocab> = OnceLock::new();
        V.get_or_init(|| serde_json::from_str(VOCAB_JSON).expect("builtin vocab is valid"))
    }

    /// Hash of the raw vocab file, recorded in checkpoints.
    pub fn hash() -> String {
        let mut h = Sha256::new();
        h.update(VOCAB_JSON.as_bytes());
        format!("{:x}", h.finalize())
    }

    pub fn is_category(&self, w: &str) -> bool {
        self.categories.iter().any(|c| c == w) || w == self.mask_token
    }

    pub fn is_attribute_word(&self, w: &str) -> bool {
        self.colors.iter().any(|c| c == w)
            || self.materials.iter().any(|c| c == w)
            || self.sizes.iter().any(|c| c == w)
    }

    pub fn is_determiner(&self, w: &str) -> bool {
        self.determiners.iter().any(|c| c == w)
    }

    pub fn is_pronoun(&self, w: &str) -> bool {
        self.pronouns.iter().any(|c| c == w)
    }

    pub fn is_copula(&self, w: &str) -> bool {
        self.copulas.iter().any(|c| c == w)
    }

    /// Relation whose word sequence starts at `tokens[at]`, if any.
    pub fn relation_at(&self, tokens: &[String], at: usize) -> Option<&RelationDef> {
        self.relations.iter().find(|r| {
            tokens.len() >= at + r.words.len()
                && r.words.iter().zip(&tokens[at..]).all(|(a, b)| a == b)
        })
    }

    /// Every surface word the toy text encoder must embed, plus the padding
    /// and null (no-match) slots. Index 0 is padding, index 1 is the null
    /// feature used for the reserved final position.
    pub fn word_index(&self) -> &'static HashMap<String, usize> {
        static IDX: OnceLock<HashMap<String, usize>> = OnceLock::new();
        IDX.get_or_init(|| {
            let v = Vocab::builtin();
            let mut map = HashMap::new();
            map.insert("<pad>".to_string(), 0);
            map.insert("<null>".to_string(), 1);
            let mut next = 2;
            let add = |w: &str, map: &mut HashMap<String, usize>, next: &mut usize| {
                if !map.contains_key(w) {
                    map.insert(w.to_string(), *next);
                    *next += 1;
                }
            };
            for w in v
                .categories
                .iter()
                .chain(&v.colors)
                .chain(&v.materials)
                .chain(&v.sizes)
                .chain(&v.determiners)
                .chain(&v.pronouns)
                .chain(&v.copulas)
            {
                add(w, &mut map, &mut next);
            }
            for r in &v.relations {
                for w in &r.words {
                    add(w, &mut map, &mut next);
                }
            }
            add(&v.mask_token, &mut map, &mut next);
            add(".", &mut map, &mut next);
            map
        })
    }

    pub const PAD_ID: usize = 0;
    pub const NULL_ID: usize = 1;

    pub fn vocab_size(&self) -> usize {
        self.word_index().len()
    }

    pub fn word_id(&self, w: &str) -> usize {
        *self.word_index().get(w).unwrap_or(&Self::PAD_ID)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_loads_and_is_closed() {
        let v = Vocab::builtin();
        assert_eq!(v.categories.len(), 12);
        assert_eq!(v.colors.len(), 6);
        assert_eq!(v.materials.len(), 4);
        assert_eq!(v.sizes.len(), 3);
        assert_eq!(v.relations.len(), 6);
        assert!(v.is_category("object"));
        assert!(!v.is_category("banana"));
    }

    #[test]
    fn word_index_is_stable_and_total() {
        let v = Vocab::builtin();
        assert_eq!(v.word_id("<pad>"), Vocab::PAD_ID);
        assert_eq!(v.word_id("<null>"), Vocab::NULL_ID);
        assert!(v.word_id("chair") >= 2);
        // unknown words collapse to padding
        assert_eq!(v.word_id("banana"), Vocab::PAD_ID);
    }
}
