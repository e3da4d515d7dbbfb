//! Synthetic corpora with an argument interaction.
//!
//! Every sentence has one predicate. An optional agent noun (A0) precedes
//! it; an optional object-position noun, the ambiguous slot, follows it.
//! With probability `q` the slot is A0 when no agent is present and A1
//! otherwise; with probability `1 - q` its role is a fair coin. The slot
//! token draws its form, tag and label from the same distribution in both
//! cases, so its local features carry no information about the role.
//! Predicates with two senses take sense 02 exactly when an A2 is present.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conll::{write_corpus, Sentence, Token, EMPTY};
use crate::error::{Error, Result};
use crate::rng::{rng_for, SrlRng};

/// Dependency label carried by the ambiguous slot and nothing else.
pub const SLOT_DEPREL: &str = "OBJ";
pub const ROLES: [&str; 5] = ["_", "A0", "A1", "A2", "AM"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrammarConfig {
    pub seed: u64,
    pub sentences: usize,
    pub agent_nouns: usize,
    pub slot_nouns: usize,
    pub filler_words: usize,
    pub adverbs: usize,
    pub prepositions: usize,
    pub filler_tags: usize,
    pub predicates: usize,
    /// Probability that the slot's role follows the interaction rule.
    pub q: f64,
    pub slot_rate: f64,
    pub agent_rate: f64,
    /// Agent nouns and predicates fall into this many classes; an agent
    /// noun is A0 only for predicates of its own class.
    pub agent_classes: usize,
    /// Probability of a noun from another class in agent position.
    pub decoy_rate: f64,
    pub a2_rate: f64,
    pub am_rate: f64,
    /// Fillers per gap are drawn from `0..=max_fillers`.
    pub max_fillers: usize,
    pub roles: Vec<String>,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        GrammarConfig {
            seed: 7,
            sentences: 260,
            agent_nouns: 30,
            slot_nouns: 4,
            filler_words: 120,
            adverbs: 8,
            prepositions: 4,
            filler_tags: 3,
            predicates: 6,
            q: 1.0,
            slot_rate: 0.8,
            agent_rate: 0.5,
            agent_classes: 1,
            decoy_rate: 0.0,
            a2_rate: 0.4,
            am_rate: 0.3,
            max_fillers: 3,
            roles: ROLES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.roles.len() != ROLES.len() || self.roles.iter().zip(ROLES).any(|(a, b)| a != b) {
            return bad(format!("the role set must be {ROLES:?}"));
        }
        for (name, p) in [
            ("q", self.q),
            ("slot_rate", self.slot_rate),
            ("agent_rate", self.agent_rate),
            ("decoy_rate", self.decoy_rate),
            ("a2_rate", self.a2_rate),
            ("am_rate", self.am_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        for (name, n) in [
            ("agent_nouns", self.agent_nouns),
            ("slot_nouns", self.slot_nouns),
            ("filler_words", self.filler_words),
            ("adverbs", self.adverbs),
            ("prepositions", self.prepositions),
            ("filler_tags", self.filler_tags),
            ("predicates", self.predicates),
            ("agent_classes", self.agent_classes),
        ] {
            if n == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.agent_nouns < self.agent_classes {
            return bad("every agent class needs a noun".into());
        }
        Ok(())
    }

    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "sentences" => self.sentences = num(key, value)?,
            "agent_nouns" => self.agent_nouns = num(key, value)?,
            "slot_nouns" => self.slot_nouns = num(key, value)?,
            "filler_words" => self.filler_words = num(key, value)?,
            "adverbs" => self.adverbs = num(key, value)?,
            "prepositions" => self.prepositions = num(key, value)?,
            "filler_tags" => self.filler_tags = num(key, value)?,
            "predicates" => self.predicates = num(key, value)?,
            "q" => self.q = num(key, value)?,
            "slot_rate" => self.slot_rate = num(key, value)?,
            "agent_rate" => self.agent_rate = num(key, value)?,
            "agent_classes" => self.agent_classes = num(key, value)?,
            "decoy_rate" => self.decoy_rate = num(key, value)?,
            "a2_rate" => self.a2_rate = num(key, value)?,
            "am_rate" => self.am_rate = num(key, value)?,
            "max_fillers" => self.max_fillers = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown grammar key `{key}`"))),
        }
        Ok(())
    }
}

/// What was generated for one sentence, beyond the CoNLL text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub agent: Option<usize>,
    pub slot: Option<usize>,
    /// Whether the slot role followed the interaction rule.
    pub rule_applied: bool,
}

struct Lexicon {
    agents: Vec<String>,
    slots: Vec<String>,
    fillers: Vec<(String, String)>,
    adverbs: Vec<String>,
    preps: Vec<String>,
    predicates: Vec<(String, usize)>,
    classes: usize,
}

impl Lexicon {
    /// A random agent noun whose class equals (or differs from) `class`.
    fn noun_of_class(&self, class: usize, same: bool, rng: &mut SrlRng) -> &str {
        let classes = self.classes;
        let pool: Vec<&String> = self
            .agents
            .iter()
            .enumerate()
            .filter(|(i, _)| (i % classes == class) == same)
            .map(|(_, a)| a)
            .collect();
        pool[rng.random_range(0..pool.len())]
    }

    fn new(cfg: &GrammarConfig) -> Self {
        let names =
            |prefix: &str, n: usize| (0..n).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        let tags = ["JJ", "DT", "NN", "CD", "PRP", "RP"];
        let fillers = (0..cfg.filler_words)
            .map(|i| {
                (
                    format!("w{i}"),
                    tags[i % cfg.filler_tags.min(tags.len())].to_string(),
                )
            })
            .collect();
        let predicates = (0..cfg.predicates)
            .map(|i| (format!("pred{i}"), 1 + i % 2))
            .collect();
        Lexicon {
            agents: names("ag", cfg.agent_nouns),
            slots: names("ob", cfg.slot_nouns),
            fillers,
            adverbs: names("adv", cfg.adverbs),
            preps: names("to", cfg.prepositions),
            predicates,
            classes: cfg.agent_classes,
        }
    }
}

struct Draft {
    form: String,
    lemma: String,
    pos: String,
    deprel: String,
    head: usize,
    role: Option<&'static str>,
}

fn word(form: &str, pos: &str, deprel: &str, role: Option<&'static str>) -> Draft {
    Draft {
        form: form.to_string(),
        lemma: form.to_string(),
        pos: pos.to_string(),
        deprel: deprel.to_string(),
        head: usize::MAX,
        role,
    }
}

fn fillers(lex: &Lexicon, cfg: &GrammarConfig, rng: &mut SrlRng, out: &mut Vec<Draft>) {
    for _ in 0..rng.random_range(0..=cfg.max_fillers) {
        let (f, t) = &lex.fillers[rng.random_range(0..lex.fillers.len())];
        out.push(word(f, t, "NMOD", None));
    }
}

fn sentence(lex: &Lexicon, cfg: &GrammarConfig, rng: &mut SrlRng) -> (Sentence, Layout) {
    let has_agent = rng.random_bool(cfg.agent_rate);
    let has_slot = rng.random_bool(cfg.slot_rate);
    let has_a2 = rng.random_bool(cfg.a2_rate);
    let has_am = rng.random_bool(cfg.am_rate);
    let rule_applied = rng.random_bool(cfg.q);
    let slot_role = if rule_applied {
        if has_agent {
            "A1"
        } else {
            "A0"
        }
    } else if rng.random_bool(0.5) {
        "A0"
    } else {
        "A1"
    };
    let pick = rng.random_range(0..lex.predicates.len());
    let (lemma, senses) = &lex.predicates[pick];
    let class = pick % cfg.agent_classes;
    let has_decoy = cfg.agent_classes > 1 && rng.random_bool(cfg.decoy_rate);

    let mut d = Vec::new();
    let mut layout = Layout {
        agent: None,
        slot: None,
        rule_applied: has_slot && rule_applied,
    };
    let mut nominals = Vec::new();
    if has_agent {
        nominals.push((lex.noun_of_class(class, true, rng), Some("A0")));
    }
    if has_decoy {
        nominals.push((lex.noun_of_class(class, false, rng), None));
    }
    nominals.shuffle(rng);
    fillers(lex, cfg, rng, &mut d);
    for (noun, role) in nominals {
        if role.is_some() {
            layout.agent = Some(d.len());
        }
        d.push(word(noun, "NN", "SBJ", role));
        fillers(lex, cfg, rng, &mut d);
    }
    let pred = d.len();
    d.push(word(lemma, "VB", "ROOT", None));
    fillers(lex, cfg, rng, &mut d);
    if has_slot {
        layout.slot = Some(d.len());
        d.push(word(
            &lex.slots[rng.random_range(0..lex.slots.len())],
            "NN",
            SLOT_DEPREL,
            Some(slot_role),
        ));
    }
    fillers(lex, cfg, rng, &mut d);
    if has_a2 {
        d.push(word(
            &lex.preps[rng.random_range(0..lex.preps.len())],
            "IN",
            "ADV",
            Some("A2"),
        ));
        fillers(lex, cfg, rng, &mut d);
    }
    if has_am {
        d.push(word(
            &lex.adverbs[rng.random_range(0..lex.adverbs.len())],
            "RB",
            "TMP",
            Some("AM"),
        ));
    }

    // Arguments attach to the predicate, fillers to the next argument or
    // the predicate.
    let anchors: Vec<usize> = (0..d.len())
        .filter(|&i| i == pred || d[i].role.is_some())
        .collect();
    for i in 0..d.len() {
        d[i].head = if i == pred {
            0
        } else if d[i].role.is_some() {
            pred + 1
        } else {
            anchors.iter().copied().find(|&a| a > i).unwrap_or(pred) + 1
        };
    }

    let sense = if *senses == 2 && has_a2 { 2 } else { 1 };
    let tokens = d
        .into_iter()
        .enumerate()
        .map(|(i, w)| {
            let is_pred = i == pred;
            Token {
                id: i + 1,
                form: w.form,
                lemma: w.lemma.clone(),
                plemma: w.lemma,
                pos: w.pos.clone(),
                ppos: w.pos,
                feat: EMPTY.into(),
                pfeat: EMPTY.into(),
                head: Some(w.head),
                phead: Some(w.head),
                deprel: w.deprel.clone(),
                pdeprel: w.deprel,
                fill_pred: is_pred,
                sense: is_pred.then(|| format!("{lemma}.{sense:02}")),
                args: vec![w.role.map(str::to_string)],
            }
        })
        .collect();
    (Sentence { tokens }, layout)
}

/// Deterministic sentences and their layouts.
pub fn generate_with_layout(cfg: &GrammarConfig) -> Result<Vec<(Sentence, Layout)>> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg);
    Ok((0..cfg.sentences)
        .into_par_iter()
        .map(|i| sentence(&lex, cfg, &mut rng_for(cfg.seed, &[i as u64])))
        .collect())
}

pub fn generate(cfg: &GrammarConfig) -> Result<Vec<Sentence>> {
    Ok(generate_with_layout(cfg)?
        .into_iter()
        .map(|(s, _)| s)
        .collect())
}

/// CoNLL-2009 text of a generated corpus.
pub fn generate_text(cfg: &GrammarConfig) -> Result<String> {
    Ok(write_corpus(&generate(cfg)?))
}

/// Writes `corpus.conll` and the `manifest.json` sidecar into `dir`.
pub fn write_generated(cfg: &GrammarConfig, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("corpus.conll"), generate_text(cfg)?)?;
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(cfg)? + "\n",
    )?;
    Ok(())
}

/// Seeded shuffle, then contiguous parts of the given fractions. The last
/// part takes the rounding remainder.
pub fn split<T: Clone>(items: &[T], fractions: &[f64], seed: u64) -> Result<Vec<Vec<T>>> {
    let total: f64 = fractions.iter().sum();
    if fractions.is_empty() || (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must sum to 1"
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng_for(seed, &[0x5b11]));
    let n = items.len();
    let mut parts = Vec::with_capacity(fractions.len());
    let mut start = 0;
    for (k, f) in fractions.iter().enumerate() {
        let size = if k + 1 == fractions.len() {
            n - start
        } else {
            ((f * n as f64).round() as usize).min(n - start)
        };
        if size == 0 {
            return Err(Error::Config(format!("split part {k} would be empty")));
        }
        parts.push(
            order[start..start + size]
                .iter()
                .map(|&i| items[i].clone())
                .collect(),
        );
        start += size;
    }
    Ok(parts)
}

/// Rows of the ambiguous slot (identified by its dependency label).
pub fn slot_rows(s: &Sentence) -> Vec<usize> {
    (0..s.len())
        .filter(|&i| s.tokens[i].pdeprel == SLOT_DEPREL)
        .collect()
}

fn role_at(s: &Sentence, i: usize) -> &str {
    s.tokens[i]
        .args
        .first()
        .and_then(|a| a.as_deref())
        .unwrap_or(EMPTY)
}

fn other_agent(s: &Sentence, i: usize) -> bool {
    (0..s.len()).any(|k| k != i && role_at(s, k) == "A0")
}

/// Accuracy on ambiguous slots of two reference predictors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlotCeiling {
    pub slots: usize,
    /// Best predictor over the slot token's own form, tag and label.
    pub factorized: f64,
    /// Predictor that also sees whether another A0 is present.
    pub interaction: f64,
}

/// Majority-vote tables with backoff from the full key to coarser keys.
#[derive(Default)]
struct Backoff {
    levels: Vec<HashMap<Vec<String>, BTreeMap<String, usize>>>,
}

impl Backoff {
    fn add(&mut self, keys: &[Vec<String>], role: &str) {
        self.levels.resize_with(keys.len(), HashMap::new);
        for (level, k) in self.levels.iter_mut().zip(keys) {
            *level
                .entry(k.clone())
                .or_default()
                .entry(role.to_string())
                .or_default() += 1;
        }
    }

    /// Highest count at the finest level that has seen the key; ties go
    /// to the lexicographically smallest role.
    fn predict(&self, keys: &[Vec<String>]) -> String {
        for (level, k) in self.levels.iter().zip(keys) {
            if let Some(m) = level.get(k) {
                let mut best: Option<(&String, usize)> = None;
                for (r, &c) in m {
                    if best.is_none_or(|(_, bc)| c > bc) {
                        best = Some((r, c));
                    }
                }
                if let Some((r, _)) = best {
                    return r.clone();
                }
            }
        }
        EMPTY.to_string()
    }
}

/// Fits majority-vote tables on `train` slots and scores them on `test`
/// slots. The factorized table is keyed by the slot's form, tag and
/// label, backing off to tag and label, then to nothing. The interaction
/// table adds whether another A0 is present at every level.
pub fn slot_ceiling(train: &[Sentence], test: &[Sentence]) -> SlotCeiling {
    let local = |s: &Sentence, i: usize| -> Vec<Vec<String>> {
        let t = &s.tokens[i];
        vec![
            vec![t.form.clone(), t.ppos.clone(), t.pdeprel.clone()],
            vec![t.ppos.clone(), t.pdeprel.clone()],
            vec![],
        ]
    };
    let joint = |s: &Sentence, i: usize| -> Vec<Vec<String>> {
        let flag = other_agent(s, i).to_string();
        local(s, i)
            .into_iter()
            .map(|mut k| {
                k.push(flag.clone());
                k
            })
            .collect()
    };
    let (mut fact_table, mut joint_table) = (Backoff::default(), Backoff::default());
    for s in train {
        for i in slot_rows(s) {
            fact_table.add(&local(s, i), role_at(s, i));
            joint_table.add(&joint(s, i), role_at(s, i));
        }
    }
    let (mut n, mut fact, mut inter) = (0usize, 0usize, 0usize);
    for s in test {
        for i in slot_rows(s) {
            n += 1;
            let gold = role_at(s, i);
            fact += (fact_table.predict(&local(s, i)) == gold) as usize;
            inter += (joint_table.predict(&joint(s, i)) == gold) as usize;
        }
    }
    let rate = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    SlotCeiling {
        slots: n,
        factorized: rate(fact),
        interaction: rate(inter),
    }
}

/// Fraction of ambiguous slots whose predicted role (first argument
/// column of `predicted`) matches `gold`.
pub fn slot_accuracy(gold: &[Sentence], predicted: &[Sentence]) -> Result<f64> {
    if gold.len() != predicted.len() {
        return Err(Error::Misaligned(format!(
            "{} gold sentences, {} predicted",
            gold.len(),
            predicted.len()
        )));
    }
    let (mut n, mut c) = (0usize, 0usize);
    for (g, p) in gold.iter().zip(predicted) {
        for i in slot_rows(g) {
            n += 1;
            c += (role_at(g, i) == role_at(p, i)) as usize;
        }
    }
    Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
}
