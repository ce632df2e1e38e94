//! Planted-fact retrieval task.
//!
//! Every entity gets one knowledge item stating its answer word; the query is
//! `"<entity> <relation> <answer>"` with the entity's image. The answer can
//! only be produced for unseen queries by retrieving the right item. The
//! three corpora differ in surface form and relation vocabulary, so the
//! relation word tells the gate which corpus to favour.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::losses::PseudoPair;
use super::step::TrainExample;
use crate::encoders::{featurize_text, Query};
use crate::error::{Error, Result};
use crate::memory::KnowledgeItem;
use crate::model::ModelConfig;

/// Candidate answer words; the first [`NUM_ANSWERS`] whose tokens do not
/// collide with any other task word are used.
pub const ANSWER_POOL: [&str; 40] = [
    "red", "blue", "green", "amber", "violet", "silver", "copper", "ivory", "olive", "coral", "slate", "teal", "maroon",
    "ochre", "indigo", "umber", "beige", "plum", "jade", "khaki", "sepia", "cream", "navy", "rust", "azure", "lilac",
    "mauve", "peach", "tan", "cyan", "lime", "rose", "gold", "bronze", "pearl", "onyx", "ruby", "sand", "mint", "wine",
];

pub const NUM_ANSWERS: usize = 16;

/// Relation words per corpus.
const RELATIONS: [[&str; 2]; 3] = [["resides_in", "works_with"], ["wearing", "holding"], ["located_in", "member_of"]];

/// Fixed words used by the three surface styles.
const STYLE_WORDS: [&str; 12] = [
    "the", "archive", "notes", "that", "record", "photo", "showing", "a", "kind", "answer", "old", "of",
];

#[derive(Clone, Debug)]
pub struct SyntheticConfig {
    pub entities: usize,
    pub held_out: usize,
    pub num_corpora: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            entities: 256,
            held_out: 64,
            num_corpora: 3,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub items: Vec<KnowledgeItem>,
    /// One query per entity, in entity order; `gold` is always set.
    pub examples: Vec<TrainExample>,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    /// Answer word per entity.
    pub answers: Vec<&'static str>,
    /// The answer vocabulary actually in use.
    pub answer_words: Vec<&'static str>,
    pub entity_names: Vec<String>,
}

impl SyntheticTask {
    /// Builds the task. Entity names are re-drawn until every word of the
    /// task hashes to its own token id.
    pub fn generate(cfg: &SyntheticConfig, model: &ModelConfig) -> Result<Self> {
        if cfg.num_corpora != 3 || model.num_corpora != 3 {
            return Err(Error::InvalidArgument("the synthetic task uses exactly 3 corpora".into()));
        }
        if cfg.held_out >= cfg.entities {
            return Err(Error::InvalidArgument("held-out split must leave training queries".into()));
        }
        let mut used: HashMap<usize, String> = HashMap::new();
        for w in RELATIONS.iter().flatten().chain(STYLE_WORDS.iter()) {
            let t = featurize_text(w, model.vocab)[0];
            if let Some(prev) = used.insert(t, w.to_string()) {
                return Err(Error::InvalidArgument(format!(
                    "vocabulary of {} too small: {w:?} and {prev:?} share a token",
                    model.vocab
                )));
            }
        }
        let mut answer_words: Vec<&'static str> = Vec::with_capacity(NUM_ANSWERS);
        for w in ANSWER_POOL {
            if answer_words.len() == NUM_ANSWERS {
                break;
            }
            if let std::collections::hash_map::Entry::Vacant(v) = used.entry(featurize_text(w, model.vocab)[0]) {
                v.insert(w.to_string());
                answer_words.push(w);
            }
        }
        if answer_words.len() < NUM_ANSWERS {
            return Err(Error::InvalidArgument(format!("vocabulary of {} too small for the task", model.vocab)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut entity_names = Vec::with_capacity(cfg.entities);
        for i in 0..cfg.entities {
            let mut salt = 0u32;
            loop {
                let name = format!("ent{i}{}", if salt == 0 { String::new() } else { format!("x{salt}") });
                let t = featurize_text(&name, model.vocab)[0];
                if let std::collections::hash_map::Entry::Vacant(v) = used.entry(t) {
                    v.insert(name.clone());
                    entity_names.push(name);
                    break;
                }
                salt += 1;
                if salt > 10_000 {
                    return Err(Error::InvalidArgument(format!("vocabulary of {} too small for the task", model.vocab)));
                }
            }
        }

        let mut items = Vec::with_capacity(cfg.entities);
        let mut examples = Vec::with_capacity(cfg.entities);
        let mut answers = Vec::with_capacity(cfg.entities);
        for (i, name) in entity_names.iter().enumerate() {
            let corpus = i % 3;
            let answer = answer_words[rng.gen_range(0..NUM_ANSWERS)];
            let relation = RELATIONS[corpus][rng.gen_range(0..2)];
            let image = format!("img-{name}");
            let id = format!("k{i:03}");
            let item = match corpus {
                0 => KnowledgeItem::passage(&id, 0, format!("the old archive notes that {name} {relation} {answer}")),
                1 => KnowledgeItem::caption(&id, 1, format!("a photo showing {name} {relation} {answer}"), &image),
                _ => KnowledgeItem::triplets(
                    &id,
                    2,
                    vec![
                        (name.clone(), relation.to_string(), answer.to_string()),
                        (answer.to_string(), "kind".to_string(), "answer".to_string()),
                    ],
                ),
            };
            items.push(item);
            examples.push(TrainExample {
                query: Query::from_raw(format!("q{i:03}"), &format!("{name} {relation} {answer}"), Some(&image), model),
                gold: Some(id),
            });
            answers.push(answer);
        }

        let mut order: Vec<usize> = (0..cfg.entities).collect();
        order.shuffle(&mut rng);
        let mut held_out = order[..cfg.held_out].to_vec();
        let mut train = order[cfg.held_out..].to_vec();
        held_out.sort_unstable();
        train.sort_unstable();
        Ok(Self {
            items,
            examples,
            train,
            held_out,
            answers,
            answer_words,
            entity_names,
        })
    }

    pub fn train_examples(&self) -> Vec<TrainExample> {
        self.train.iter().map(|&i| self.examples[i].clone()).collect()
    }

    pub fn held_out_examples(&self) -> Vec<&TrainExample> {
        self.held_out.iter().map(|&i| &self.examples[i]).collect()
    }

    /// Warm-start pair for entity `i`: the query without its answer word.
    pub fn pseudo_pair(&self, i: usize) -> PseudoPair {
        let q = &self.examples[i].query;
        let n = q.text_tokens.len();
        PseudoPair {
            query: Query::new(q.id.clone(), q.text_tokens[..n - 1].to_vec(), q.patches.clone()),
            gt_item_id: self.examples[i].gold.clone().expect("synthetic queries have gold"),
        }
    }

    pub fn pairs(&self, which: &[usize]) -> Vec<PseudoPair> {
        which.iter().map(|&i| self.pseudo_pair(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::featurize_text;

    #[test]
    fn every_gold_item_contains_its_answer_and_entity_tokens() {
        let mcfg = ModelConfig::toy();
        let task = SyntheticTask::generate(&SyntheticConfig::default(), &mcfg).unwrap();
        assert_eq!(task.items.len(), 256);
        assert_eq!(task.held_out.len(), 64);
        assert_eq!(task.train.len(), 192);
        for (i, ex) in task.examples.iter().enumerate() {
            let item = &task.items[i];
            assert_eq!(ex.gold.as_deref(), Some(item.id.as_str()));
            let toks = featurize_text(&item.content_text(), mcfg.vocab);
            let ans = *ex.query.text_tokens.last().unwrap();
            assert!(toks.contains(&ans), "item {} lacks its answer", item.id);
            assert!(toks.contains(&ex.query.text_tokens[0]));
            assert_eq!(ex.query.text_tokens.len(), 3);
        }
        let per_corpus = (0..3).map(|j| task.items.iter().filter(|it| it.corpus_id == j).count()).collect::<Vec<_>>();
        assert_eq!(per_corpus, vec![86, 85, 85]);
    }

    #[test]
    fn entity_tokens_are_unique() {
        let mcfg = ModelConfig::toy();
        let task = SyntheticTask::generate(&SyntheticConfig::default(), &mcfg).unwrap();
        let mut toks: Vec<usize> = task.examples.iter().map(|e| e.query.text_tokens[0]).collect();
        toks.sort_unstable();
        toks.dedup();
        assert_eq!(toks.len(), 256);
        assert_eq!(task.answer_words.len(), NUM_ANSWERS);
        for a in &task.answer_words {
            assert!(!toks.contains(&featurize_text(a, mcfg.vocab)[0]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mcfg = ModelConfig::toy();
        let a = SyntheticTask::generate(&SyntheticConfig::default(), &mcfg).unwrap();
        let b = SyntheticTask::generate(&SyntheticConfig::default(), &mcfg).unwrap();
        assert_eq!(a.items, b.items);
        assert_eq!(a.held_out, b.held_out);
    }
}
