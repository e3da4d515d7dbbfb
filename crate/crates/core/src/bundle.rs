//! Trained models together with their vocabulary: checkpointing, cached
//! baseline outputs and decoding.

use rayon::prelude::*;

use crate::baseline::{decode, BaselineModel, Decoded};
use crate::checkpoint::Checkpoint;
use crate::conll::{Prediction, Sentence};
use crate::encoder::{Dims, TokenIds};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::params::ParamStore;
use crate::refiner::{RefineMode, RefinerInputs, RefinerModel};
use crate::rng::rng_for;
use crate::tensor::{softmax_rows, Tensor};
use crate::vocab::Vocabulary;

pub const KIND_BASELINE: &str = "baseline";
pub const KIND_REFINER: &str = "refiner";

/// Gold targets for one predicate.
#[derive(Clone, Debug, PartialEq)]
pub struct PredicateTarget {
    /// 0-based predicate row.
    pub row: usize,
    pub lemma: String,
    pub gold_roles: Vec<usize>,
    /// `None` when the gold sense is outside the lemma's inventory.
    pub gold_sense: Option<usize>,
}

/// A sentence mapped through the vocabulary, with all of its predicates.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub ids: TokenIds,
    pub predicates: Vec<PredicateTarget>,
}

impl Example {
    pub fn from_sentence(s: &Sentence, vocab: &Vocabulary) -> Self {
        let rows = s.predicate_rows();
        let predicates = rows
            .iter()
            .enumerate()
            .map(|(col, &row)| {
                let t = &s.tokens[row];
                let gold_roles = s
                    .tokens
                    .iter()
                    .map(|tok| vocab.role_id(tok.args.get(col).and_then(|a| a.as_deref())))
                    .collect();
                let gold_sense = t.sense.as_ref().and_then(|sense| {
                    vocab
                        .sense_inventory(&t.plemma)
                        .iter()
                        .position(|s| s == sense)
                });
                PredicateTarget {
                    row,
                    lemma: t.plemma.clone(),
                    gold_roles,
                    gold_sense,
                }
            })
            .collect();
        Example {
            ids: TokenIds::from_sentence(s, vocab),
            predicates,
        }
    }
}

pub fn examples(sentences: &[Sentence], vocab: &Vocabulary) -> Vec<Example> {
    sentences
        .iter()
        .map(|s| Example::from_sentence(s, vocab))
        .collect()
}

/// Frozen baseline outputs for one predicate.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineOutput {
    /// `Iᵅ`, `n × r`.
    pub role_logits: Tensor<f32>,
    /// `Iᵖ`, `1 × m`.
    pub sense_logits: Tensor<f32>,
    /// `Π`, `m × d_π`.
    pub senses: Tensor<f32>,
}

/// Frozen baseline outputs for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedSentence {
    /// Embedded sentence.
    pub x: Tensor<f32>,
    pub outputs: Vec<BaselineOutput>,
}

fn parse_meta<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T> {
    ckpt.meta(key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad metadata value for `{key}`")))
}

fn expect_kind(ckpt: &Checkpoint, kind: &str) -> Result<()> {
    let found = ckpt.meta("kind")?;
    if found != kind {
        return Err(Error::Checkpoint(format!(
            "expected a {kind} checkpoint, found {found}"
        )));
    }
    Ok(())
}

fn check_hash(expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch {
            expected: expected.to_string(),
            found: found.to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct BaselineBundle {
    pub vocab: Vocabulary,
    pub model: BaselineModel,
    pub store: ParamStore<f32>,
}

impl BaselineBundle {
    pub fn new(vocab: Vocabulary, dims: &Dims, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = BaselineModel::new(&mut store, &vocab, dims, &mut rng_for(seed, &[0xba5e]))?;
        Ok(BaselineBundle {
            vocab,
            model,
            store,
        })
    }

    pub fn dims(&self) -> &Dims {
        &self.model.dims
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store)
            .with_meta("kind", KIND_BASELINE)
            .with_meta("dims", serde_json::to_string(&self.model.dims)?)
            .with_meta("num_roles", self.model.num_roles.to_string())
            .with_meta("vocab_hash", self.vocab.hash()?))
    }

    /// SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        self.checkpoint()?.content_hash()
    }

    /// Rebuilds a baseline; refuses a vocabulary other than the one it
    /// was trained with.
    pub fn from_checkpoint(ckpt: &Checkpoint, vocab: Vocabulary) -> Result<Self> {
        expect_kind(ckpt, KIND_BASELINE)?;
        check_hash(ckpt.meta("vocab_hash")?, &vocab.hash()?)?;
        let dims: Dims = serde_json::from_str(ckpt.meta("dims")?)?;
        let mut bundle = Self::new(vocab, &dims, 0)?;
        ckpt.restore_into(&mut bundle.store)?;
        Ok(bundle)
    }

    /// Evaluation-mode logits for every predicate of a sentence.
    pub fn run(&self, ex: &Example) -> Result<CachedSentence> {
        let mut g = Graph::new(&self.store);
        let f = self.model.encode_sentence(&mut g, &ex.ids, None)?;
        let mut outputs = Vec::with_capacity(ex.predicates.len());
        for p in &ex.predicates {
            let v = self.model.predicate(&mut g, &f, p.row, &p.lemma)?;
            outputs.push(BaselineOutput {
                role_logits: g.value(v.role_logits).clone(),
                sense_logits: g.value(v.sense_logits).clone(),
                senses: self.model.sense_matrix(&self.store, &p.lemma),
            });
        }
        Ok(CachedSentence {
            x: g.value(f.x).clone(),
            outputs,
        })
    }

    pub fn run_all(&self, examples: &[Example]) -> Result<Vec<CachedSentence>> {
        examples.par_iter().map(|ex| self.run(ex)).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RefinerBundle {
    pub model: RefinerModel,
    pub store: ParamStore<f32>,
    pub baseline_hash: String,
    pub vocab_hash: String,
}

impl RefinerBundle {
    pub fn new(baseline: &BaselineBundle, mode: RefineMode, tied: bool, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let model = RefinerModel::new(
            &mut store,
            baseline.dims(),
            baseline.model.num_roles,
            mode,
            tied,
            &mut rng_for(seed, &[0x5e1f]),
        )?;
        Ok(RefinerBundle {
            model,
            store,
            baseline_hash: baseline.content_hash()?,
            vocab_hash: baseline.vocab.hash()?,
        })
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint::from_store(&self.store)
            .with_meta("kind", KIND_REFINER)
            .with_meta("dims", serde_json::to_string(&self.model.dims)?)
            .with_meta("num_roles", self.model.num_roles.to_string())
            .with_meta("mode", self.model.mode.to_string())
            .with_meta("tied", self.model.tied.to_string())
            .with_meta("baseline_hash", self.baseline_hash.clone())
            .with_meta("vocab_hash", self.vocab_hash.clone()))
    }

    /// Rebuilds a refiner on top of the exact baseline it was trained
    /// against.
    pub fn from_checkpoint(ckpt: &Checkpoint, baseline: &BaselineBundle) -> Result<Self> {
        expect_kind(ckpt, KIND_REFINER)?;
        check_hash(ckpt.meta("baseline_hash")?, &baseline.content_hash()?)?;
        check_hash(ckpt.meta("vocab_hash")?, &baseline.vocab.hash()?)?;
        let mode: RefineMode = ckpt.meta("mode")?.parse()?;
        let tied: bool = parse_meta(ckpt, "tied")?;
        let mut bundle = Self::new(baseline, mode, tied, 0)?;
        ckpt.restore_into(&mut bundle.store)?;
        Ok(bundle)
    }
}

/// Decoded states `0..=iterations` for every predicate of a sentence.
/// State 0 is the baseline.
pub fn refine_sentence(
    refiner: Option<(&RefinerModel, &ParamStore<f32>)>,
    cached: &CachedSentence,
    ex: &Example,
    iterations: usize,
) -> Result<Vec<Vec<Decoded>>> {
    let baseline_only = |o: &BaselineOutput| {
        let r = softmax_rows(&o.role_logits);
        let p = softmax_rows(&o.sense_logits);
        decode(&r, &p)
    };
    let (model, store) = match refiner {
        Some(pair) if iterations > 0 => pair,
        _ => {
            return Ok(cached
                .outputs
                .iter()
                .map(|o| vec![baseline_only(o); iterations + 1])
                .collect())
        }
    };
    let mut g = Graph::new(store);
    let x = g.constant(cached.x.clone());
    let s = model.encode_sentence(&mut g, x, None)?;
    let mut all = Vec::with_capacity(ex.predicates.len());
    for (p, o) in ex.predicates.iter().zip(&cached.outputs) {
        let inputs = RefinerInputs {
            arg_features: s.arg_features,
            pred_features: model.predicate_features(&mut g, &s, p.row)?,
            senses: g.constant(o.senses.clone()),
            role_logits: g.constant(o.role_logits.clone()),
            sense_logits: g.constant(o.sense_logits.clone()),
        };
        let r0 = g.constant(softmax_rows(&o.role_logits));
        let p0 = g.constant(softmax_rows(&o.sense_logits));
        let states = model.iterate(&mut g, &inputs, r0, p0, iterations)?;
        all.push(
            states
                .iter()
                .map(|&(r, p)| decode(g.value(r), g.value(p)))
                .collect(),
        );
    }
    Ok(all)
}

/// Predictions indexed by step then instance, for cached baseline outputs.
pub fn decode_steps(
    vocab: &Vocabulary,
    refiner: Option<(&RefinerModel, &ParamStore<f32>)>,
    examples: &[Example],
    cached: &[CachedSentence],
    iterations: usize,
) -> Result<Vec<Vec<Prediction>>> {
    if examples.len() != cached.len() {
        return Err(Error::Misaligned(format!(
            "{} sentences, {} cached outputs",
            examples.len(),
            cached.len()
        )));
    }
    let per_sentence: Vec<Vec<Vec<Decoded>>> = examples
        .par_iter()
        .zip(cached)
        .map(|(ex, c)| refine_sentence(refiner, c, ex, iterations))
        .collect::<Result<_>>()?;
    let mut steps = vec![Vec::new(); iterations + 1];
    for (ex, decoded) in examples.iter().zip(&per_sentence) {
        for (p, states) in ex.predicates.iter().zip(decoded) {
            for (t, d) in states.iter().enumerate() {
                steps[t].push(d.to_prediction(vocab, &p.lemma));
            }
        }
    }
    Ok(steps)
}

/// Baseline plus an optional refiner, ready to label sentences.
#[derive(Clone, Copy, Debug)]
pub struct Predictor<'a> {
    pub baseline: &'a BaselineBundle,
    pub refiner: Option<&'a RefinerBundle>,
    pub iterations: usize,
}

impl<'a> Predictor<'a> {
    pub fn new(
        baseline: &'a BaselineBundle,
        refiner: Option<&'a RefinerBundle>,
        iterations: usize,
    ) -> Self {
        Predictor {
            baseline,
            refiner,
            iterations,
        }
    }

    /// Predictions for states `0..=iterations`, each in instance order.
    pub fn predict_steps(&self, sentences: &[Sentence]) -> Result<Vec<Vec<Prediction>>> {
        let exs = examples(sentences, &self.baseline.vocab);
        let cached = self.baseline.run_all(&exs)?;
        let refiner = self.refiner.map(|r| (&r.model, &r.store));
        decode_steps(
            &self.baseline.vocab,
            refiner,
            &exs,
            &cached,
            self.iterations,
        )
    }

    pub fn predict(&self, sentences: &[Sentence]) -> Result<Vec<Prediction>> {
        Ok(self.predict_steps(sentences)?.pop().unwrap_or_default())
    }
}
