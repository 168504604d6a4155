//! Entity-relation world generation.

use super::{CorpusConfig, Paragraph};
use crate::error::{Error, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Role words for entity-valued relations.
const ENTITY_RELATION_POOL: [&str; 12] = [
    "mentor", "patron", "rival", "editor", "sponsor", "curator", "advisor", "herald", "envoy",
    "scribe", "warden", "broker",
];

/// Attribute words for numeric-valued relations.
const NUMERIC_ATTRIBUTE_POOL: [&str; 8] = [
    "founding", "height", "tenure", "rank", "budget", "mileage", "census", "score",
];

const CONSONANTS: [char; 14] = [
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z',
];
const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];

/// Numeric attribute values are drawn from a narrow year-like range so that
/// equal-valued pairs occur naturally for comparison questions.
const VALUE_LO: u32 = 1900;
const VALUE_HI: u32 = 1919;

/// A closed world of entities and facts.
///
/// Every fact reads `(subject, relation) -> value` where the value is either
/// another entity (entity-valued relations) or a numeric literal (attribute
/// relations). Paragraphs are pre-rendered one per entity, one sentence per
/// fact, in a seed-deterministic order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub entities: Vec<String>,
    pub entity_relations: Vec<String>,
    pub numeric_attributes: Vec<String>,
    /// subject -> relation -> value
    pub relations: BTreeMap<String, BTreeMap<String, String>>,
    /// Pre-rendered fact sentences per entity, in paragraph order.
    pub paragraphs: BTreeMap<String, Vec<String>>,
    pub rng_seed: u64,
}

pub fn fact_sentence(relation: &str, subject: &str, value: &str) -> String {
    format!("the {relation} of {subject} is {value} .")
}

impl World {
    /// All relation names, entity-valued first.
    pub fn attribute_vocabulary(&self) -> Vec<String> {
        let mut v = self.entity_relations.clone();
        v.extend(self.numeric_attributes.iter().cloned());
        v
    }

    pub fn value_of(&self, subject: &str, relation: &str) -> Option<&str> {
        self.relations
            .get(subject)
            .and_then(|m| m.get(relation))
            .map(|s| s.as_str())
    }

    pub fn paragraph(&self, entity: &str) -> Paragraph {
        Paragraph {
            title: entity.to_string(),
            sentences: self.paragraphs[entity].clone(),
        }
    }

    /// Index of the sentence stating `(subject, relation)` in the subject's
    /// paragraph.
    pub fn sentence_index(&self, subject: &str, relation: &str) -> Option<usize> {
        let value = self.value_of(subject, relation)?;
        let sentence = fact_sentence(relation, subject, value);
        self.paragraphs
            .get(subject)?
            .iter()
            .position(|s| *s == sentence)
    }

    pub fn is_entity(&self, token: &str) -> bool {
        self.entities.iter().any(|e| e == token)
    }

    /// Whether a paragraph mentions the given token anywhere (as subject or
    /// object of a fact).
    pub fn paragraph_mentions(&self, entity: &str, token: &str) -> bool {
        if entity == token {
            return true;
        }
        self.paragraphs[entity]
            .iter()
            .any(|s| super::contains_word(s, token))
    }
}

/// Deterministically generate a world from the corpus config.
pub fn generate_world(config: &CorpusConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let entities = generate_entity_names(config.n_entities, &mut rng);

    let n_entity_rels = config.n_relations.div_ceil(2).min(ENTITY_RELATION_POOL.len());
    let n_numeric = (config.n_relations / 2).min(NUMERIC_ATTRIBUTE_POOL.len());
    if n_entity_rels + n_numeric < config.n_relations {
        return Err(Error::Corpus(format!(
            "n_relations = {} exceeds the built-in relation name pools",
            config.n_relations
        )));
    }
    let entity_relations: Vec<String> = ENTITY_RELATION_POOL[..n_entity_rels]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let numeric_attributes: Vec<String> = NUMERIC_ATTRIBUTE_POOL[..n_numeric]
        .iter()
        .map(|s| s.to_string())
        .collect();

    // Assign facts: every entity gets up to two entity-valued facts plus up
    // to two numeric attributes, so paragraphs run 2-4 sentences.
    let mut relations: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for subject in &entities {
        let mut facts = BTreeMap::new();
        let n_rel_facts = if entity_relations.is_empty() {
            0
        } else {
            rng.random_range(1..=2.min(entity_relations.len()))
        };
        let mut rel_names: Vec<&String> = entity_relations.iter().collect();
        rel_names.shuffle(&mut rng);
        for rel in rel_names.into_iter().take(n_rel_facts) {
            let target = loop {
                let t = entities.choose(&mut rng).expect("entities nonempty");
                if t != subject {
                    break t.clone();
                }
            };
            facts.insert(rel.clone(), target);
        }
        if !numeric_attributes.is_empty() {
            let n_attr_facts = rng.random_range(1..=2.min(numeric_attributes.len()));
            let mut attr_names: Vec<&String> = numeric_attributes.iter().collect();
            attr_names.shuffle(&mut rng);
            for attr in attr_names.into_iter().take(n_attr_facts) {
                let value = rng.random_range(VALUE_LO..=VALUE_HI).to_string();
                facts.insert(attr.clone(), value);
            }
        }
        relations.insert(subject.clone(), facts);
    }

    // Render paragraphs with a shuffled sentence order per entity.
    let mut paragraphs = BTreeMap::new();
    for subject in &entities {
        let mut sentences: Vec<String> = relations[subject]
            .iter()
            .map(|(rel, value)| fact_sentence(rel, subject, value))
            .collect();
        sentences.shuffle(&mut rng);
        paragraphs.insert(subject.clone(), sentences);
    }

    let world = World {
        entities,
        entity_relations,
        numeric_attributes,
        relations,
        paragraphs,
        rng_seed: config.seed,
    };
    debug_assert!(world_names_are_substring_free(&world));
    Ok(world)
}

/// Fixed-length CVCVCV names: equal length plus uniqueness means no entity
/// name can be a substring of another, which keeps span decoding unambiguous.
fn generate_entity_names<R: Rng>(n: usize, rng: &mut R) -> Vec<String> {
    let mut names = Vec::with_capacity(n);
    let mut seen = std::collections::HashSet::new();
    while names.len() < n {
        let mut name = String::with_capacity(6);
        for _ in 0..3 {
            name.push(*CONSONANTS.choose(rng).expect("nonempty"));
            name.push(*VOWELS.choose(rng).expect("nonempty"));
        }
        if seen.insert(name.clone()) {
            names.push(name);
        }
    }
    names
}

fn world_names_are_substring_free(world: &World) -> bool {
    for a in &world.entities {
        for b in &world.entities {
            if a != b && b.contains(a.as_str()) {
                return false;
            }
        }
    }
    true
}
