//! Two-stage training: the baseline first, then the refiner on top of the
//! frozen baseline's cached logits.
//!
//! The refiner sees baseline predictions perturbed with Gumbel noise as
//! its starting state during training; later iterations and all inference
//! use the clean softmax.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{
    decode_steps, examples, BaselineBundle, CachedSentence, Example, PredicateTarget, RefinerBundle,
};
use crate::conll::{extract_instances, Prediction, Sentence};
use crate::encoder::{Dims, WordVectors};
use crate::error::{Error, Result};
use crate::eval::{labeled_f1, EvalReport};
use crate::graph::{Graph, Var};
use crate::optim::Adam;
use crate::params::{Gradients, ParamStore};
use crate::refiner::{RefineMode, RefinerInputs, StepTrace};
use crate::rng::{rng_for, SrlRng};
use crate::tensor::{softmax_rows, Scalar, Tensor};
use crate::vocab::Vocabulary;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Baseline,
    Refiner,
}

impl Stage {
    fn tag(self) -> u64 {
        match self {
            Stage::Baseline => 1,
            Stage::Refiner => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Predicate instances per optimizer step.
    pub batch_size: usize,
    pub iterations: usize,
    pub lambda_role: f64,
    pub lambda_sense: f64,
    pub gumbel: bool,
    pub patience: usize,
    pub seed: u64,
    pub mode: RefineMode,
    pub tied: bool,
    pub min_count: usize,
    pub lowercase: bool,
    pub word_vectors: Option<String>,
    /// Refiner stage only. With two or more folds the train-set inputs come
    /// from baselines that never saw the sentence (cross-fitting).
    pub folds: usize,
    /// Epoch budget of each fold baseline; folds use all of it and keep
    /// their best dev epoch.
    pub fold_epochs: usize,
    pub dims: Dims,
}

impl TrainConfig {
    pub fn baseline() -> Self {
        TrainConfig {
            stage: Stage::Baseline,
            learning_rate: 3e-4,
            epochs: 600,
            batch_size: 32,
            iterations: 2,
            lambda_role: 5.0,
            lambda_sense: 50.0,
            gumbel: true,
            patience: 25,
            seed: 1,
            mode: RefineMode::Structured,
            tied: true,
            min_count: 1,
            lowercase: false,
            word_vectors: None,
            folds: 0,
            fold_epochs: 600,
            dims: Dims::default(),
        }
    }

    pub fn refiner() -> Self {
        TrainConfig {
            stage: Stage::Refiner,
            epochs: 300,
            ..Self::baseline()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Baseline => Self::baseline(),
            Stage::Refiner => Self::refiner(),
        }
    }

    /// Sets one `key = value` entry. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::Config(format!("bad value `{v}` for `{key}`")))
        }
        let d = &mut self.dims;
        match key {
            "stage" => {
                self.stage = match value {
                    "baseline" => Stage::Baseline,
                    "refiner" => Stage::Refiner,
                    _ => return Err(Error::Config(format!("unknown stage `{value}`"))),
                }
            }
            "learning_rate" | "lr" => self.learning_rate = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" | "batch" => self.batch_size = num(key, value)?,
            "iterations" => self.iterations = num(key, value)?,
            "lambda_role" => self.lambda_role = num(key, value)?,
            "lambda_sense" => self.lambda_sense = num(key, value)?,
            "gumbel" => self.gumbel = num(key, value)?,
            "patience" => self.patience = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "tied" => self.tied = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "lowercase" => self.lowercase = num(key, value)?,
            "folds" => self.folds = num(key, value)?,
            "fold_epochs" => self.fold_epochs = num(key, value)?,
            "word_vectors" => self.word_vectors = (!value.is_empty()).then(|| value.to_string()),
            "preset" => {
                *d = match value {
                    "desk" => Dims::desk(),
                    "default" => Dims::default(),
                    "english" => Dims::english(),
                    _ => return Err(Error::Config(format!("unknown preset `{value}`"))),
                }
            }
            "word" => d.word = num(key, value)?,
            "deprel" => d.deprel = num(key, value)?,
            "pos" => d.pos = num(key, value)?,
            "hidden" => d.hidden = num(key, value)?,
            "null_feature" => d.null_feature = num(key, value)?,
            "role_feature" => d.role_feature = num(key, value)?,
            "sense" => d.sense = num(key, value)?,
            "refine_feature" => d.refine_feature = num(key, value)?,
            "refine_hidden" => d.refine_hidden = num(key, value)?,
            "dropout" => d.dropout = num(key, value)?,
            "recurrent_dropout" => d.recurrent_dropout = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let d = &self.dims;
        let stage = match self.stage {
            Stage::Baseline => "baseline",
            Stage::Refiner => "refiner",
        };
        let mut lines = vec![
            format!("stage = {stage}"),
            format!("learning_rate = {}", self.learning_rate),
            format!("epochs = {}", self.epochs),
            format!("batch_size = {}", self.batch_size),
            format!("iterations = {}", self.iterations),
            format!("lambda_role = {}", self.lambda_role),
            format!("lambda_sense = {}", self.lambda_sense),
            format!("gumbel = {}", self.gumbel),
            format!("patience = {}", self.patience),
            format!("seed = {}", self.seed),
            format!("mode = {}", self.mode),
            format!("tied = {}", self.tied),
            format!("min_count = {}", self.min_count),
            format!("lowercase = {}", self.lowercase),
            format!("folds = {}", self.folds),
            format!("fold_epochs = {}", self.fold_epochs),
        ];
        if let Some(p) = &self.word_vectors {
            lines.push(format!("word_vectors = {p}"));
        }
        for (k, v) in [
            ("word", d.word),
            ("deprel", d.deprel),
            ("pos", d.pos),
            ("hidden", d.hidden),
            ("null_feature", d.null_feature),
            ("role_feature", d.role_feature),
            ("sense", d.sense),
            ("refine_feature", d.refine_feature),
            ("refine_hidden", d.refine_hidden),
        ] {
            lines.push(format!("{k} = {v}"));
        }
        lines.push(format!("dropout = {}", d.dropout));
        lines.push(format!("recurrent_dropout = {}", d.recurrent_dropout));
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.lambda_role < 0.0 || self.lambda_sense < 0.0 {
            return bad("Gumbel scales must be nonnegative");
        }
        if self.folds == 1 {
            return bad("folds must be 0 (off) or at least 2");
        }
        if self.stage == Stage::Refiner && self.iterations == 0 {
            return bad("the refiner stage needs at least one iteration");
        }
        for p in [self.dims.dropout, self.dims.recurrent_dropout] {
            if !(0.0..1.0).contains(&p) {
                return bad("dropout rates must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} split={}", self.epoch, self.split)?;
        if let Some(l) = self.loss {
            write!(f, " loss={l:.6}")?;
        }
        for (k, v) in [("P", self.precision), ("R", self.recall), ("F1", self.f1)] {
            if let Some(v) = v {
                write!(f, " {k}={v:.4}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Epoch of the retained parameters; 0 is the initialization.
    pub best_epoch: usize,
    pub best_f1: f64,
    /// Parameters whose update was skipped for a non-finite gradient.
    pub skipped_updates: Vec<String>,
}

impl TrainReport {
    pub fn log_text(&self) -> String {
        self.history.iter().map(|r| format!("{r}\n")).collect()
    }

    /// Dev F1 per epoch.
    pub fn dev_curve(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|r| r.split == "dev")
            .filter_map(|r| r.f1)
            .collect()
    }
}

/// `softmax(logits + λ·ε)` row-wise with standard Gumbel noise `ε`.
pub fn gumbel_softmax<T: Scalar, R: Rng + ?Sized>(
    logits: &Tensor<T>,
    lambda: f64,
    rng: &mut R,
) -> Tensor<T> {
    if lambda == 0.0 {
        return softmax_rows(logits);
    }
    let mut noisy = logits.clone();
    for v in noisy.data_mut() {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        *v = T::of(v.as_f64() - lambda * (-u.ln()).ln());
    }
    softmax_rows(&noisy)
}

/// `−log softmax(z − e_gold)_gold` for a single logit vector.
pub fn margin_loss_value(logits: &[f64], gold: usize) -> f64 {
    let shifted: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &v)| if i == gold { v - 1.0 } else { v })
        .collect();
    cross_entropy_value(&shifted, gold)
}

/// `−log softmax(z)_gold`.
pub fn cross_entropy_value(logits: &[f64], gold: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - logits[gold]
}

/// Softmax-margin loss averaged over rows of `logits`, one gold index per
/// row.
pub fn softmax_margin_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: Var,
    gold: &[usize],
) -> Result<Var> {
    let (n, k) = {
        let v = g.value(logits);
        (v.rows(), v.cols())
    };
    if gold.len() != n || gold.iter().any(|&i| i >= k) {
        return Err(Error::Graph(format!(
            "{} gold labels for {n}×{k} logits",
            gold.len()
        )));
    }
    let mut cost = Tensor::zeros(n, k);
    for (r, &c) in gold.iter().enumerate() {
        cost.set(r, c, T::of(1.0));
    }
    let cost = g.constant(cost);
    let shifted = g.sub(logits, cost)?;
    let log_probs = g.log_softmax(shifted);
    let picked = g.pick(log_probs, gold)?;
    let total = g.sum(picked);
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Per-token mean role loss plus the sense loss when the gold sense is in
/// the inventory.
pub fn instance_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    role_scores: Var,
    sense_scores: Var,
    target: &PredicateTarget,
) -> Result<Var> {
    let roles = softmax_margin_loss(g, role_scores, &target.gold_roles)?;
    match target.gold_sense {
        Some(s) => {
            let sense = softmax_margin_loss(g, sense_scores, &[s])?;
            g.add(roles, sense)
        }
        None => Ok(roles),
    }
}

/// Sum of [`instance_loss`] over refinement steps `1..=T`.
pub fn refine_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    steps: &[StepTrace],
    target: &PredicateTarget,
) -> Result<Var> {
    let terms = steps
        .iter()
        .map(|s| instance_loss(g, s.roles.scores, s.senses.scores, target))
        .collect::<Result<Vec<_>>>()?;
    sum_vars(g, &terms)
}

fn sum_vars<T: Scalar>(g: &mut Graph<'_, T>, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars
        .split_first()
        .ok_or_else(|| Error::Graph("empty loss sum".into()))?;
    rest.iter().try_fold(first, |acc, &v| g.add(acc, v))
}

/// Groups sentences into batches of roughly `batch_size` predicate
/// instances, bucketed by sentence length. Sentences without predicates
/// are dropped.
pub fn make_batches(examples: &[Example], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..examples.len())
        .filter(|&i| !examples[i].predicates.is_empty())
        .collect();
    order.sort_by_key(|&i| (examples[i].ids.len(), i));
    let mut batches = Vec::new();
    let mut current = Vec::new();
    let mut count = 0;
    for i in order {
        current.push(i);
        count += examples[i].predicates.len();
        if count >= batch_size {
            batches.push(std::mem::take(&mut current));
            count = 0;
        }
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Gradient and summed loss of one sentence.
type SentenceGrad = (Gradients<f32>, f64);

/// Mini-batch Adam with dev early stopping. Sentence gradients are
/// computed in parallel and summed in a fixed order.
fn fit<G, E>(
    store: &mut ParamStore<f32>,
    train: &[Example],
    cfg: &TrainConfig,
    grad: G,
    mut evaluate: E,
) -> Result<TrainReport>
where
    G: Fn(&ParamStore<f32>, usize, &mut SrlRng) -> Result<SentenceGrad> + Sync,
    E: FnMut(&ParamStore<f32>) -> Result<EvalReport>,
{
    let tag = cfg.stage.tag();
    let mut report = TrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    let initial = evaluate(store)?;
    report.best_f1 = initial.f1();
    report.history.push(dev_record(0, &initial));
    let mut best = store.clone();
    let mut adam = Adam::new(store);
    let mut batches = make_batches(train, cfg.batch_size);
    let mut stale = 0;

    for epoch in 1..=cfg.epochs {
        batches.shuffle(&mut rng_for(cfg.seed, &[tag, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut epoch_instances = 0usize;
        for (b, batch) in batches.iter().enumerate() {
            let frozen: &ParamStore<f32> = store;
            let parts: Vec<SentenceGrad> = batch
                .par_iter()
                .map(|&i| {
                    grad(
                        frozen,
                        i,
                        &mut rng_for(cfg.seed, &[tag, epoch as u64, i as u64]),
                    )
                })
                .collect::<Result<_>>()?;
            let instances: usize = batch.iter().map(|&i| train[i].predicates.len()).sum();
            let mut total = Gradients::new(store.len());
            let mut loss = 0.0;
            for (gr, l) in &parts {
                total.merge(gr);
                loss += l;
            }
            if !loss.is_finite() {
                log::warn!("{}", Error::NonFiniteLoss { epoch, batch: b });
                break;
            }
            total.scale(1.0 / instances as f32);
            report
                .skipped_updates
                .extend(adam.update(store, &total, cfg.learning_rate));
            epoch_loss += loss;
            epoch_instances += instances;
        }
        let train_record = EpochRecord {
            epoch,
            split: "train".into(),
            loss: Some(epoch_loss / epoch_instances.max(1) as f64),
            precision: None,
            recall: None,
            f1: None,
        };
        log::info!("{train_record}");
        report.history.push(train_record);

        let dev = evaluate(store)?;
        let record = dev_record(epoch, &dev);
        log::info!("{record}");
        report.history.push(record);
        if dev.f1() > report.best_f1 {
            report.best_f1 = dev.f1();
            report.best_epoch = epoch;
            best = store.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!(
                    "early stop at epoch {epoch}, best epoch {}",
                    report.best_epoch
                );
                break;
            }
        }
    }
    *store = best;
    Ok(report)
}

fn dev_record(epoch: usize, r: &EvalReport) -> EpochRecord {
    EpochRecord {
        epoch,
        split: "dev".into(),
        loss: None,
        precision: Some(r.precision()),
        recall: Some(r.recall()),
        f1: Some(r.f1()),
    }
}

fn gold_of(sentences: &[Sentence]) -> Vec<Prediction> {
    extract_instances(sentences)
        .iter()
        .map(|i| i.gold())
        .collect()
}

/// Stage one. The vocabulary is built from `train`.
pub fn train_baseline(
    train: &[Sentence],
    dev: &[Sentence],
    cfg: &TrainConfig,
    vectors: Option<&WordVectors>,
) -> Result<(BaselineBundle, TrainReport)> {
    cfg.validate()?;
    let vocab = Vocabulary::build(train, cfg.min_count, cfg.lowercase);
    let mut bundle = BaselineBundle::new(vocab, &cfg.dims, cfg.seed)?;
    if let Some(v) = vectors {
        let n = bundle
            .model
            .embeddings
            .load_pretrained(&mut bundle.store, &bundle.vocab, v)?;
        log::info!("loaded {n} pretrained word vectors");
    }
    let report = fit_baseline(&mut bundle, train, dev, cfg)?;
    Ok((bundle, report))
}

fn fit_baseline(
    bundle: &mut BaselineBundle,
    train: &[Sentence],
    dev: &[Sentence],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let train_ex = examples(train, &bundle.vocab);
    let dev_ex = examples(dev, &bundle.vocab);
    let dev_gold = gold_of(dev);

    let BaselineBundle {
        vocab,
        model,
        store,
    } = bundle;
    let (vocab, model) = (&*vocab, &*model);
    let grad = |store: &ParamStore<f32>, i: usize, rng: &mut SrlRng| -> Result<SentenceGrad> {
        let ex = &train_ex[i];
        let mut g = Graph::new(store);
        let f = model.encode_sentence(&mut g, &ex.ids, Some(rng))?;
        let mut terms = Vec::with_capacity(ex.predicates.len());
        for p in &ex.predicates {
            let v = model.predicate(&mut g, &f, p.row, &p.lemma)?;
            terms.push(instance_loss(&mut g, v.role_logits, v.sense_logits, p)?);
        }
        let loss = sum_vars(&mut g, &terms)?;
        Ok((g.backward(loss)?, g.value(loss).data()[0] as f64))
    };
    let evaluate = |store: &ParamStore<f32>| -> Result<EvalReport> {
        let view = BaselineBundle {
            vocab: vocab.clone(),
            model: model.clone(),
            store: store.clone(),
        };
        let cached = view.run_all(&dev_ex)?;
        let pred = decode_steps(vocab, None, &dev_ex, &cached, 0)?.remove(0);
        labeled_f1(&dev_gold, &pred)
    };
    fit(store, &train_ex, cfg, grad, evaluate)
}

/// Train-set refiner inputs where sentence `i` is scored by a baseline
/// trained on every fold except `i % folds`. Encoder inputs and sense
/// matrices still come from `baseline`, with words unseen by the fold
/// embedded as unknown.
pub fn cross_fit_cache(
    train: &[Sentence],
    dev: &[Sentence],
    baseline: &BaselineBundle,
    cfg: &TrainConfig,
) -> Result<Vec<CachedSentence>> {
    let folds = cfg.folds;
    if folds < 2 || folds > train.len() {
        return Err(Error::Config(format!(
            "cannot cross-fit {} sentences in {folds} folds",
            train.len()
        )));
    }
    let train_ex = examples(train, &baseline.vocab);
    let mut cache = baseline.run_all(&train_ex)?;
    for f in 0..folds {
        let rest: Vec<Sentence> = train
            .iter()
            .enumerate()
            .filter(|(i, _)| i % folds != f)
            .map(|(_, s)| s.clone())
            .collect();
        let fold_cfg = TrainConfig {
            stage: Stage::Baseline,
            epochs: cfg.fold_epochs,
            patience: cfg.fold_epochs,
            seed: cfg.seed.wrapping_add(f as u64 + 1),
            dims: baseline.dims().clone(),
            ..cfg.clone()
        };
        // Words of the held-out fold must look unknown, as on dev; labels
        // keep the full inventory so logit shapes match.
        let own = Vocabulary::build(&rest, baseline.vocab.min_count, baseline.vocab.lowercase);
        let vocab = Vocabulary {
            words: own.words,
            word_counts: own.word_counts,
            ..baseline.vocab.clone()
        };
        let mut fold = BaselineBundle::new(vocab, &fold_cfg.dims, fold_cfg.seed)?;
        let report = fit_baseline(&mut fold, &rest, dev, &fold_cfg)?;
        log::info!(
            "fold {f}: best epoch {} dev F1 {:.4}",
            report.best_epoch,
            report.best_f1
        );
        let held: Vec<usize> = (f..train.len()).step_by(folds).collect();
        let scored: Vec<(CachedSentence, CachedSentence)> = held
            .par_iter()
            .map(|&i| {
                let s = &train[i];
                let logits = fold.run(&Example::from_sentence(s, &fold.vocab))?;
                // the full baseline's embeddings of words this fold never saw
                // would leak their labels, so they are read as unknown
                let mut ex = train_ex[i].clone();
                for (id, t) in ex.ids.words.iter_mut().zip(&s.tokens) {
                    if fold.vocab.word_id(&t.form) == 0 {
                        *id = 0;
                    }
                }
                Ok((baseline.run(&ex)?, logits))
            })
            .collect::<Result<_>>()?;
        for (&i, (inputs, logits)) in held.iter().zip(scored) {
            cache[i].x = inputs.x;
            for (o, n) in cache[i].outputs.iter_mut().zip(logits.outputs) {
                o.role_logits = n.role_logits;
                o.sense_logits = n.sense_logits;
            }
        }
    }
    Ok(cache)
}

/// Stage-two inputs for `train`: the baseline's own outputs, or
/// cross-fitted ones when `cfg.folds >= 2`.
pub fn refiner_train_cache(
    train: &[Sentence],
    dev: &[Sentence],
    baseline: &BaselineBundle,
    cfg: &TrainConfig,
) -> Result<Vec<CachedSentence>> {
    if cfg.folds >= 2 {
        cross_fit_cache(train, dev, baseline, cfg)
    } else {
        baseline.run_all(&examples(train, &baseline.vocab))
    }
}

/// Stage two. The baseline is only read; its logits are computed once.
pub fn train_refiner(
    train: &[Sentence],
    dev: &[Sentence],
    baseline: &BaselineBundle,
    cfg: &TrainConfig,
) -> Result<(RefinerBundle, TrainReport)> {
    cfg.validate()?;
    let cache = refiner_train_cache(train, dev, baseline, cfg)?;
    train_refiner_cached(train, dev, baseline, cfg, &cache)
}

/// [`train_refiner`] with precomputed train-set inputs, so several
/// refiners can share one cross-fitting pass.
pub fn train_refiner_cached(
    train: &[Sentence],
    dev: &[Sentence],
    baseline: &BaselineBundle,
    cfg: &TrainConfig,
    train_cache: &[CachedSentence],
) -> Result<(RefinerBundle, TrainReport)> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Err(Error::Config(
            "the refiner stage needs at least one iteration".into(),
        ));
    }
    let vocab = &baseline.vocab;
    let train_ex = examples(train, vocab);
    if train_cache.len() != train_ex.len() {
        return Err(Error::Misaligned(format!(
            "{} cached sentences for {} training sentences",
            train_cache.len(),
            train_ex.len()
        )));
    }
    let dev_ex = examples(dev, vocab);
    let dev_cache = baseline.run_all(&dev_ex)?;
    let dev_gold = gold_of(dev);

    let mut bundle = RefinerBundle::new(baseline, cfg.mode, cfg.tied, cfg.seed)?;
    let (lambda_role, lambda_sense) = if cfg.gumbel {
        (cfg.lambda_role, cfg.lambda_sense)
    } else {
        (0.0, 0.0)
    };
    let RefinerBundle { model, store, .. } = &mut bundle;
    let model = &*model;
    let iterations = cfg.iterations;
    let grad = |store: &ParamStore<f32>, i: usize, rng: &mut SrlRng| -> Result<SentenceGrad> {
        let (ex, cached): (&Example, &CachedSentence) = (&train_ex[i], &train_cache[i]);
        let mut g = Graph::new(store);
        let x = g.constant(cached.x.clone());
        let s = model.encode_sentence(&mut g, x, Some(rng))?;
        let mut terms = Vec::with_capacity(ex.predicates.len());
        for (p, o) in ex.predicates.iter().zip(&cached.outputs) {
            let inputs = RefinerInputs {
                arg_features: s.arg_features,
                pred_features: model.predicate_features(&mut g, &s, p.row)?,
                senses: g.constant(o.senses.clone()),
                role_logits: g.constant(o.role_logits.clone()),
                sense_logits: g.constant(o.sense_logits.clone()),
            };
            let r0 = g.constant(gumbel_softmax(&o.role_logits, lambda_role, rng));
            let p0 = g.constant(gumbel_softmax(&o.sense_logits, lambda_sense, rng));
            let steps = model.unroll(&mut g, &inputs, r0, p0, iterations)?;
            terms.push(refine_loss(&mut g, &steps, p)?);
        }
        let loss = sum_vars(&mut g, &terms)?;
        Ok((g.backward(loss)?, g.value(loss).data()[0] as f64))
    };
    let evaluate = |store: &ParamStore<f32>| -> Result<EvalReport> {
        let steps = decode_steps(vocab, Some((model, store)), &dev_ex, &dev_cache, iterations)?;
        labeled_f1(&dev_gold, steps.last().expect("at least one state"))
    };
    let report = fit(store, &train_ex, cfg, grad, evaluate)?;
    Ok((bundle, report))
}

/// How often Gumbel noise changes the baseline's argmax role.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipCounts {
    pub tokens: usize,
    pub flipped: usize,
    /// Tokens whose gold or predicted role is not null.
    pub arguments: usize,
    pub arguments_flipped: usize,
}

impl FlipCounts {
    pub fn rate(&self) -> f64 {
        ratio(self.flipped, self.tokens)
    }

    pub fn argument_rate(&self) -> f64 {
        ratio(self.arguments_flipped, self.arguments)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Draws the baseline role distributions of `sentences` with Gumbel
/// noise of scale `lambda` and counts changed argmax roles.
pub fn gumbel_flip_rate(
    baseline: &BaselineBundle,
    sentences: &[Sentence],
    lambda: f64,
    seed: u64,
) -> Result<FlipCounts> {
    let exs = examples(sentences, &baseline.vocab);
    let cached = baseline.run_all(&exs)?;
    let mut c = FlipCounts::default();
    for (i, (sent, ex)) in cached.iter().zip(&exs).enumerate() {
        let mut rng = rng_for(seed, &[0x9b, i as u64]);
        for (o, p) in sent.outputs.iter().zip(&ex.predicates) {
            let noisy = gumbel_softmax(&o.role_logits, lambda, &mut rng);
            for r in 0..o.role_logits.rows() {
                let before = o.role_logits.argmax_row(r);
                let flip = noisy.argmax_row(r) != before;
                c.tokens += 1;
                c.flipped += flip as usize;
                if before != 0 || p.gold_roles[r] != 0 {
                    c.arguments += 1;
                    c.arguments_flipped += flip as usize;
                }
            }
        }
    }
    Ok(c)
}
