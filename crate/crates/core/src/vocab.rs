//! Index maps for words, lemmas, tags, dependency labels, roles and the
//! per-lemma sense inventories.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::conll::{PredicateInstance, Sentence};
use crate::error::Result;

pub const UNK: &str = "<unk>";
pub const NULL_ROLE: &str = "_";

/// A bijection between strings and `0..len`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Index {
    items: Vec<String>,
    map: HashMap<String, usize>,
}

impl From<Vec<String>> for Index {
    fn from(items: Vec<String>) -> Self {
        let map = items
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Index { items, map }
    }
}

impl From<Index> for Vec<String> {
    fn from(index: Index) -> Self {
        index.items
    }
}

impl Index {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.map.get(s).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.items[i]
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }
}

/// Sorts keys by descending count, ties broken lexicographically.
fn ranked(counts: &HashMap<String, usize>) -> Vec<String> {
    let mut v: Vec<(&String, &usize)> = counts.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
    v.into_iter().map(|(k, _)| k.clone()).collect()
}

fn with_reserved(reserved: &str, counts: &HashMap<String, usize>, min_count: usize) -> Index {
    let mut items = vec![reserved.to_string()];
    items.extend(
        ranked(counts)
            .into_iter()
            .filter(|k| k != reserved && counts[k] >= min_count),
    );
    Index::from(items)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub lowercase: bool,
    pub min_count: usize,
    pub words: Index,
    pub lemmas: Index,
    pub pos: Index,
    pub deprels: Index,
    /// Role 0 is the null role.
    pub roles: Index,
    /// Sense labels per predicted lemma, most frequent first.
    pub senses: BTreeMap<String, Vec<String>>,
    /// Raw word counts before the cutoff.
    pub word_counts: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds index maps from the predicted columns of a training corpus.
    pub fn build(corpus: &[Sentence], min_count: usize, lowercase: bool) -> Self {
        let mut words = HashMap::new();
        let mut lemmas = HashMap::new();
        let mut pos = HashMap::new();
        let mut deprels = HashMap::new();
        let mut roles = HashMap::new();
        let mut senses: HashMap<String, HashMap<String, usize>> = HashMap::new();
        let bump =
            |m: &mut HashMap<String, usize>, k: &str| *m.entry(k.to_string()).or_insert(0) += 1;

        for s in corpus {
            for t in &s.tokens {
                let form = if lowercase {
                    t.form.to_lowercase()
                } else {
                    t.form.clone()
                };
                bump(&mut words, &form);
                bump(&mut lemmas, &t.plemma);
                bump(&mut pos, &t.ppos);
                bump(&mut deprels, &t.pdeprel);
                for a in t.args.iter().flatten() {
                    bump(&mut roles, a);
                }
                if t.fill_pred {
                    if let Some(sense) = &t.sense {
                        bump(senses.entry(t.plemma.clone()).or_default(), sense);
                    }
                }
            }
        }

        Vocabulary {
            lowercase,
            min_count,
            words: with_reserved(UNK, &words, min_count.max(1)),
            lemmas: with_reserved(UNK, &lemmas, 1),
            pos: with_reserved(UNK, &pos, 1),
            deprels: with_reserved(UNK, &deprels, 1),
            roles: with_reserved(NULL_ROLE, &roles, 1),
            senses: senses.iter().map(|(k, v)| (k.clone(), ranked(v))).collect(),
            word_counts: words.into_iter().collect(),
        }
    }

    pub fn num_roles(&self) -> usize {
        self.roles.len()
    }

    pub fn word_id(&self, form: &str) -> usize {
        let key: Cow<str> = if self.lowercase {
            Cow::Owned(form.to_lowercase())
        } else {
            Cow::Borrowed(form)
        };
        self.words.get(&key).unwrap_or(0)
    }

    pub fn pos_id(&self, tag: &str) -> usize {
        self.pos.get(tag).unwrap_or(0)
    }

    pub fn deprel_id(&self, label: &str) -> usize {
        self.deprels.get(label).unwrap_or(0)
    }

    /// Role index of an argument cell; unknown labels map to null.
    pub fn role_id(&self, label: Option<&str>) -> usize {
        label.and_then(|l| self.roles.get(l)).unwrap_or(0)
    }

    pub fn role_name(&self, id: usize) -> Option<&str> {
        (id != 0).then(|| self.roles.name(id))
    }

    /// The sense inventory of `lemma`. Unseen lemmas get the singleton
    /// inventory `<lemma>.01`.
    pub fn sense_inventory(&self, lemma: &str) -> Cow<'_, [String]> {
        match self.senses.get(lemma) {
            Some(s) if !s.is_empty() => Cow::Borrowed(s),
            _ => Cow::Owned(vec![format!("{lemma}.01")]),
        }
    }

    pub fn is_known_predicate(&self, lemma: &str) -> bool {
        self.senses.contains_key(lemma)
    }

    /// Gold role indices per token of an instance.
    pub fn gold_roles(&self, inst: &PredicateInstance) -> Vec<usize> {
        inst.roles
            .iter()
            .map(|r| self.role_id(r.as_deref()))
            .collect()
    }

    /// Gold sense index within the inventory, if the gold sense is in it.
    pub fn gold_sense(&self, inst: &PredicateInstance) -> Option<usize> {
        self.sense_inventory(&inst.predicate().plemma)
            .iter()
            .position(|s| *s == inst.sense)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// SHA-256 of the JSON serialization.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(self.to_json()?.as_bytes()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
