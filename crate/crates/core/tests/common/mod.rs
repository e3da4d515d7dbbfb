//! Checks shared by the focused integration tests and the acceptance run.
//! Each `criterion_*` function returns an [`Outcome`] instead of
//! panicking so the acceptance target can report every line.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use itersrl::baseline::BaselineModel;
use itersrl::bundle::{examples, BaselineBundle, PredicateTarget, RefinerBundle};
use itersrl::checkpoint::Checkpoint;
use itersrl::conll::{extract_instances, parse_corpus, write_corpus, Prediction, Sentence};
use itersrl::encoder::Dims;
use itersrl::eval::{constraint_violations, labeled_f1, Decomposition, ViolationCounts};
use itersrl::gradcheck::gradient_check;
use itersrl::optim::Adam;
use itersrl::refiner::{aggregate_other_roles, RefineMode, RefinerInputs, RefinerModel};
use itersrl::rng::rng_for;
use itersrl::synth::{generate, GrammarConfig};
use itersrl::tensor::softmax_rows;
use itersrl::train::{
    cross_entropy_value, gumbel_softmax, margin_loss_value, refine_loss, softmax_margin_loss,
};
use itersrl::vocab::Vocabulary;
use itersrl::{Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }

    /// Panics with the detail line unless the check passed.
    pub fn assert(&self) {
        assert!(self.pass, "{self}");
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {}: {}", self.name, self.detail)
    }
}

/// Folds several sub-checks into one outcome.
pub fn combine(name: &str, parts: Vec<Outcome>) -> Outcome {
    let pass = parts.iter().all(|p| p.pass);
    let detail = parts
        .iter()
        .map(|p| format!("{}{}", if p.pass { "" } else { "FAILED " }, p.detail))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::new(name, pass, detail)
}

// ---------------------------------------------------------------------
// toys

/// Dims no larger than 8 for gradient checks.
pub fn toy_dims() -> Dims {
    Dims {
        word: 4,
        deprel: 2,
        pos: 2,
        hidden: 3,
        null_feature: 4,
        role_feature: 3,
        sense: 3,
        refine_feature: 3,
        refine_hidden: 4,
        dropout: 0.3,
        recurrent_dropout: 0.3,
    }
}

pub fn toy_corpus(sentences: usize, seed: u64) -> Vec<Sentence> {
    let cfg = GrammarConfig {
        seed,
        sentences,
        max_fillers: 1,
        ..GrammarConfig::default()
    };
    generate(&cfg).expect("valid grammar")
}

fn random_tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = rng_for(seed, &[rows as u64, cols as u64]);
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.5..1.5))
}

// ---------------------------------------------------------------------
// criterion 1: gradients

pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-3;

/// `Σ out ∘ W` for a fixed random `W`, so no gradient is trivially zero.
fn weighted<T: itersrl::Scalar>(g: &mut Graph<'_, T>, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = {
        let v = g.value(out);
        (v.rows(), v.cols())
    };
    let w = random_tensor(r, c, seed);
    let w = g.constant(Tensor::from_fn(r, c, |i, j| T::of(w.get(i, j))));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type OpBuild = fn(&mut Graph<'_, f64>, &[itersrl::ParamId]) -> Result<Var>;

/// Every differentiable graph op on small random parameters.
pub fn op_checks() -> Vec<(&'static str, f64)> {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", random_tensor(3, 4, 1)).unwrap();
    let b = store.add("b", random_tensor(4, 3, 2)).unwrap();
    let c = store.add("c", random_tensor(3, 4, 3)).unwrap();
    let row = store.add("row", random_tensor(1, 4, 4)).unwrap();
    let table = store.add("table", random_tensor(5, 4, 5)).unwrap();
    let ids = [a, b, c, row, table];

    let ops: Vec<(&'static str, OpBuild)> = vec![
        ("gather", |g, p| g.gather(p[4], &[0, 2, 2, 4])),
        ("matmul", |g, p| {
            let (a, b) = (g.param(p[0]), g.param(p[1]));
            g.matmul(a, b)
        }),
        ("matmul_t", |g, p| {
            let (a, c) = (g.param(p[0]), g.param(p[2]));
            g.matmul_t(a, c)
        }),
        ("add", |g, p| {
            let (a, c) = (g.param(p[0]), g.param(p[2]));
            g.add(a, c)
        }),
        ("add_row", |g, p| {
            let (a, r) = (g.param(p[0]), g.param(p[3]));
            g.add_row(a, r)
        }),
        ("sub", |g, p| {
            let (a, c) = (g.param(p[0]), g.param(p[2]));
            g.sub(a, c)
        }),
        ("mul", |g, p| {
            let (a, c) = (g.param(p[0]), g.param(p[2]));
            g.mul(a, c)
        }),
        ("affine", |g, p| {
            let a = g.param(p[0]);
            Ok(g.affine(a, 2.0, -1.0))
        }),
        ("scale", |g, p| {
            let a = g.param(p[0]);
            Ok(g.scale(a, -3.0))
        }),
        ("one_minus", |g, p| {
            let a = g.param(p[0]);
            Ok(g.one_minus(a))
        }),
        ("sigmoid", |g, p| {
            let a = g.param(p[0]);
            Ok(g.sigmoid(a))
        }),
        ("tanh", |g, p| {
            let a = g.param(p[0]);
            Ok(g.tanh(a))
        }),
        ("elu", |g, p| {
            let a = g.param(p[0]);
            Ok(g.elu(a))
        }),
        ("softmax", |g, p| {
            let a = g.param(p[0]);
            Ok(g.softmax(a))
        }),
        ("log_softmax", |g, p| {
            let a = g.param(p[0]);
            Ok(g.log_softmax(a))
        }),
        ("concat_cols", |g, p| {
            let (a, c) = (g.param(p[0]), g.param(p[2]));
            g.concat_cols(&[a, c, a])
        }),
        ("concat_rows", |g, p| {
            let (a, r) = (g.param(p[0]), g.param(p[3]));
            g.concat_rows(&[a, r])
        }),
        ("slice_cols", |g, p| {
            let a = g.param(p[0]);
            g.slice_cols(a, 1, 3)
        }),
        ("slice_rows", |g, p| {
            let a = g.param(p[0]);
            g.slice_rows(a, 1, 3)
        }),
        ("row", |g, p| {
            let a = g.param(p[0]);
            g.row(a, 2)
        }),
        ("sum", |g, p| {
            let a = g.param(p[0]);
            let t = g.tanh(a);
            Ok(g.sum(t))
        }),
        ("sum_rows", |g, p| {
            let a = g.param(p[0]);
            Ok(g.sum_rows(a))
        }),
        ("pick", |g, p| {
            let a = g.param(p[0]);
            g.pick(a, &[1, 0, 3])
        }),
        ("broadcast_rows", |g, p| {
            let r = g.param(p[3]);
            g.broadcast_rows(r, 3)
        }),
        ("reshape", |g, p| {
            let a = g.param(p[0]);
            g.reshape(a, 4, 3)
        }),
        ("dropout", |g, p| {
            let a = g.param(p[0]);
            let mut rng = rng_for(11, &[]);
            g.dropout(a, 0.5, &mut rng)
        }),
        ("softmax_margin", |g, p| {
            let a = g.param(p[0]);
            softmax_margin_loss(g, a, &[0, 3, 1])
        }),
    ];
    ops.into_iter()
        .enumerate()
        .map(|(k, (name, build))| {
            let err = gradient_check(&store, EPSILON, |g| {
                let out = build(g, &ids)?;
                weighted(g, out, 100 + k as u64)
            })
            .unwrap_or_else(|e| panic!("{name}: {e}"));
            (name, err)
        })
        .collect()
}

/// The baseline loss on one toy sentence, with and without dropout.
pub fn baseline_check(dropout: bool) -> f64 {
    let corpus = toy_corpus(4, 3);
    let vocab = Vocabulary::build(&corpus, 1, false);
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(5, &[]);
    let model = BaselineModel::new(&mut store, &vocab, &toy_dims(), &mut rng).unwrap();
    let store = store.cast::<f64>();
    let ex = &examples(&corpus, &vocab)[0];
    assert!(!ex.predicates.is_empty());
    gradient_check(&store, EPSILON, |g| {
        let mut rng = rng_for(9, &[]);
        let f = model.encode_sentence(g, &ex.ids, dropout.then_some(&mut rng))?;
        let mut total: Option<Var> = None;
        for p in &ex.predicates {
            let v = model.predicate(g, &f, p.row, &p.lemma)?;
            let l = itersrl::train::instance_loss(g, v.role_logits, v.sense_logits, p)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        Ok(total.expect("a predicate"))
    })
    .unwrap()
}

/// Refiner loss over `steps` unrolled steps on random frozen inputs.
pub fn refiner_check(mode: RefineMode, tied: bool, steps: usize) -> f64 {
    let dims = toy_dims();
    let (n, r, m) = (5, 4, 3);
    let mut store = ParamStore::<f32>::new();
    let mut rng = rng_for(6, &[]);
    let model = RefinerModel::new(&mut store, &dims, r, mode, tied, &mut rng).unwrap();
    let store = store.cast::<f64>();
    let x = random_tensor(n, dims.input_width(), 20);
    let role_logits = random_tensor(n, r, 21);
    let sense_logits = random_tensor(1, m, 22);
    let senses = random_tensor(m, dims.sense, 23);
    let target = PredicateTarget {
        row: 2,
        lemma: "toy".into(),
        gold_roles: vec![0, 1, 0, 2, 3],
        gold_sense: Some(1),
    };
    gradient_check(&store, EPSILON, |g| {
        let x = g.constant(x.clone());
        let s = model.encode_sentence(g, x, None)?;
        let inputs = RefinerInputs {
            arg_features: s.arg_features,
            pred_features: model.predicate_features(g, &s, target.row)?,
            senses: g.constant(senses.clone()),
            role_logits: g.constant(role_logits.clone()),
            sense_logits: g.constant(sense_logits.clone()),
        };
        let r0 = g.constant(softmax_rows(&role_logits));
        let p0 = g.constant(softmax_rows(&sense_logits));
        let trace = model.unroll(g, &inputs, r0, p0, steps)?;
        refine_loss(g, &trace, &target)
    })
    .unwrap()
}

pub fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut results: Vec<(String, f64)> = op_checks()
        .into_iter()
        .map(|(n, e)| (n.to_string(), e))
        .collect();
    results.push(("baseline".into(), baseline_check(false)));
    results.push(("baseline+dropout".into(), baseline_check(true)));
    for mode in [RefineMode::Structured, RefineMode::SelfRefine] {
        for tied in [true, false] {
            let name = format!("{mode} refine step{}", if tied { "" } else { " untied" });
            results.push((name, refiner_check(mode, tied, 1)));
        }
    }
    results.push((
        "structured two steps".into(),
        refiner_check(RefineMode::Structured, true, 2),
    ));
    let secs = start.elapsed().as_secs_f64();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(n, e)| (n.clone(), *e))
        .unwrap();
    let failed: Vec<&str> = results
        .iter()
        .filter(|(_, e)| e.is_nan() || *e >= GRAD_TOLERANCE)
        .map(|(n, _)| n.as_str())
        .collect();
    Outcome::new(
        "criterion 1 gradient suite",
        failed.is_empty() && secs < 60.0,
        format!(
            "{} graphs, max relative error {worst:.2e} ({worst_name}), {secs:.1} s{}",
            results.len(),
            if failed.is_empty() {
                String::new()
            } else {
                format!(", over tolerance: {failed:?}")
            }
        ),
    )
}

// ---------------------------------------------------------------------
// criterion 2: invariants

pub fn random_logits(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn max_row_sum_error(t: &Tensor<f64>) -> f64 {
    (0..t.rows())
        .map(|r| ((0..t.cols()).map(|c| t.get(r, c)).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

/// `|o_i − Σ_{k≠i} R_k[1:]|` with the sum taken directly.
pub fn exclusion_error(roles: &Tensor<f64>) -> f64 {
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let v = g.constant(roles.clone());
    let o = aggregate_other_roles(&mut g, v).unwrap();
    let o = g.value(o);
    let mut worst = 0.0f64;
    for i in 0..roles.rows() {
        for c in 1..roles.cols() {
            let direct: f64 = (0..roles.rows())
                .filter(|&k| k != i)
                .map(|k| roles.get(k, c))
                .sum();
            worst = worst.max((o.get(i, c - 1) - direct).abs());
        }
    }
    worst
}

/// Role scores are `[null | others]` and refined scores are `M + I`,
/// both bit for bit.
pub fn logit_assembly_exact() -> bool {
    let corpus = toy_corpus(4, 3);
    let vocab = Vocabulary::build(&corpus, 1, false);
    let bundle = BaselineBundle::new(vocab.clone(), &toy_dims(), 2).unwrap();
    let ex = &examples(&corpus, &vocab)[0];
    let m = &bundle.model;
    let mut g = Graph::new(&bundle.store);
    let f = m.encode_sentence(&mut g, &ex.ids, None).unwrap();
    let p = &ex.predicates[0];
    let v = m.predicate(&mut g, &f, p.row, &p.lemma).unwrap();
    let (null, other, roles) = (
        g.value(v.null_logits),
        g.value(v.other_logits),
        g.value(v.role_logits),
    );
    let mut ok = roles.cols() == other.cols() + 1;
    for i in 0..roles.rows() {
        ok &= roles.get(i, 0).to_bits() == null.get(i, 0).to_bits();
        for c in 0..other.cols() {
            ok &= roles.get(i, c + 1).to_bits() == other.get(i, c).to_bits();
        }
    }

    let refiner = RefinerBundle::new(&bundle, RefineMode::Structured, true, 3).unwrap();
    let cached = bundle.run(ex).unwrap();
    let o = &cached.outputs[0];
    let mut g = Graph::new(&refiner.store);
    let x = g.constant(cached.x.clone());
    let s = refiner.model.encode_sentence(&mut g, x, None).unwrap();
    let inputs = RefinerInputs {
        arg_features: s.arg_features,
        pred_features: refiner.model.predicate_features(&mut g, &s, p.row).unwrap(),
        senses: g.constant(o.senses.clone()),
        role_logits: g.constant(o.role_logits.clone()),
        sense_logits: g.constant(o.sense_logits.clone()),
    };
    let r0 = g.constant(softmax_rows(&o.role_logits));
    let p0 = g.constant(softmax_rows(&o.sense_logits));
    let step = refiner.model.step(&mut g, &inputs, r0, p0).unwrap();
    for (logits, base, scores) in [
        (step.roles.logits, &o.role_logits, step.roles.scores),
        (step.senses.logits, &o.sense_logits, step.senses.scores),
    ] {
        let (l, s) = (g.value(logits), g.value(scores));
        for (k, &b) in base.data().iter().enumerate() {
            ok &= (l.data()[k] + b).to_bits() == s.data()[k].to_bits();
        }
    }
    ok
}

/// With every refiner parameter zero, each state equals the baseline
/// distributions exactly.
pub fn zero_refiner_is_no_op() -> bool {
    let corpus = toy_corpus(6, 4);
    let vocab = Vocabulary::build(&corpus, 1, false);
    let bundle = BaselineBundle::new(vocab.clone(), &toy_dims(), 2).unwrap();
    let mut refiner = RefinerBundle::new(&bundle, RefineMode::Structured, true, 3).unwrap();
    let ids: Vec<_> = refiner.store.ids().collect();
    for id in ids {
        for v in refiner.store.get_mut(id).data_mut() {
            *v = 0.0;
        }
    }
    let exs = examples(&corpus, &vocab);
    let mut ok = true;
    for ex in &exs {
        let cached = bundle.run(ex).unwrap();
        let mut g = Graph::new(&refiner.store);
        let x = g.constant(cached.x.clone());
        let s = refiner.model.encode_sentence(&mut g, x, None).unwrap();
        for (p, o) in ex.predicates.iter().zip(&cached.outputs) {
            let inputs = RefinerInputs {
                arg_features: s.arg_features,
                pred_features: refiner.model.predicate_features(&mut g, &s, p.row).unwrap(),
                senses: g.constant(o.senses.clone()),
                role_logits: g.constant(o.role_logits.clone()),
                sense_logits: g.constant(o.sense_logits.clone()),
            };
            let r0 = softmax_rows(&o.role_logits);
            let p0 = softmax_rows(&o.sense_logits);
            let (rv, pv) = (g.constant(r0.clone()), g.constant(p0.clone()));
            let states = refiner.model.iterate(&mut g, &inputs, rv, pv, 3).unwrap();
            for &(r, p) in &states[1..] {
                ok &= g.value(r) == &r0 && g.value(p) == &p0;
            }
        }
    }
    ok
}

pub fn criterion_2(samples: usize) -> Outcome {
    let mut rng = rng_for(2024, &[]);
    let mut softmax_err = 0.0f64;
    let mut gumbel_err = 0.0f64;
    let mut margin_ok = true;
    let mut exclusion = 0.0f64;
    for _ in 0..samples {
        let rows = rng.random_range(1..6);
        let cols = rng.random_range(1..9);
        let scale = [1.0, 10.0, 80.0][rng.random_range(0..3)];
        let t = random_logits(&mut rng, rows, cols, scale);
        let s = softmax_rows(&t);
        softmax_err = softmax_err.max(max_row_sum_error(&s));
        let noisy = gumbel_softmax(&t, 0.0, &mut rng);
        for (a, b) in noisy.data().iter().zip(s.data()) {
            gumbel_err = gumbel_err.max((a - b).abs());
        }
        let row: Vec<f64> = t.data()[..cols].to_vec();
        let gold = rng.random_range(0..cols);
        margin_ok &= margin_loss_value(&row, gold) >= cross_entropy_value(&row, gold);
        if cols >= 2 {
            exclusion = exclusion.max(exclusion_error(&s));
        }
    }
    let assembly = logit_assembly_exact();
    let no_op = zero_refiner_is_no_op();
    combine(
        "criterion 2 algebraic invariants",
        vec![
            Outcome::new(
                "",
                softmax_err <= 1e-6,
                format!("softmax row sums within {softmax_err:.1e}"),
            ),
            Outcome::new(
                "",
                gumbel_err <= 1e-12,
                format!("Gumbel λ=0 vs softmax {gumbel_err:.1e}"),
            ),
            Outcome::new(
                "",
                margin_ok,
                format!("margin ≥ cross-entropy on {samples} vectors"),
            ),
            Outcome::new(
                "",
                exclusion <= 1e-6,
                format!("o_i exclusion {exclusion:.1e}"),
            ),
            Outcome::new("", assembly, "logit assembly bit-exact"),
            Outcome::new("", no_op, "zero refiner leaves R^t = R^0"),
        ],
    )
}

// ---------------------------------------------------------------------
// criterion 3: weight tying

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub struct TyingResult {
    pub role_identical_before: bool,
    pub sense_identical_before: bool,
    pub role_identical_after: bool,
    pub sense_identical_after: bool,
    pub moved: bool,
}

/// 100 Adam steps of refiner training on a small synthetic corpus.
pub fn train_tying(tied: bool, steps: usize) -> TyingResult {
    let corpus = toy_corpus(12, 5);
    let vocab = Vocabulary::build(&corpus, 1, false);
    let baseline = BaselineBundle::new(vocab.clone(), &toy_dims(), 2).unwrap();
    let exs = examples(&corpus, &vocab);
    let cached = baseline.run_all(&exs).unwrap();
    let mut refiner = RefinerBundle::new(&baseline, RefineMode::Structured, tied, 3).unwrap();
    let views = |r: &RefinerBundle| {
        let m = &r.model;
        (
            bits(&m.role_decoder_view(&r.store)),
            bits(&m.role_encoder_view(&r.store)),
            bits(&m.sense_decoder_view(&r.store)),
            bits(&m.sense_encoder_view(&r.store)),
        )
    };
    let before = views(&refiner);
    let start = bits(refiner.store.get(refiner.model.role_in));
    let mut adam = Adam::new(&refiner.store);
    let usable: Vec<usize> = (0..exs.len())
        .filter(|&i| !exs[i].predicates.is_empty())
        .collect();
    for step in 0..steps {
        let i = usable[step % usable.len()];
        let (ex, c) = (&exs[i], &cached[i]);
        let grads = {
            let mut rng = rng_for(8, &[step as u64]);
            let model = &refiner.model;
            let mut g = Graph::new(&refiner.store);
            let x = g.constant(c.x.clone());
            let s = model.encode_sentence(&mut g, x, Some(&mut rng)).unwrap();
            let mut total: Option<Var> = None;
            for (p, o) in ex.predicates.iter().zip(&c.outputs) {
                let inputs = RefinerInputs {
                    arg_features: s.arg_features,
                    pred_features: model.predicate_features(&mut g, &s, p.row).unwrap(),
                    senses: g.constant(o.senses.clone()),
                    role_logits: g.constant(o.role_logits.clone()),
                    sense_logits: g.constant(o.sense_logits.clone()),
                };
                let r0 = g.constant(gumbel_softmax(&o.role_logits, 5.0, &mut rng));
                let p0 = g.constant(gumbel_softmax(&o.sense_logits, 50.0, &mut rng));
                let trace = model.unroll(&mut g, &inputs, r0, p0, 2).unwrap();
                let l = refine_loss(&mut g, &trace, p).unwrap();
                total = Some(match total {
                    Some(t) => g.add(t, l).unwrap(),
                    None => l,
                });
            }
            g.backward(total.unwrap()).unwrap()
        };
        let skipped = adam.update(&mut refiner.store, &grads, 0.01);
        assert!(skipped.is_empty(), "{skipped:?}");
    }
    let after = views(&refiner);
    TyingResult {
        role_identical_before: before.0 == before.1,
        sense_identical_before: before.2 == before.3,
        role_identical_after: after.0 == after.1,
        sense_identical_after: after.2 == after.3,
        moved: bits(refiner.store.get(refiner.model.role_in)) != start,
    }
}

pub fn criterion_3() -> Outcome {
    let tied = train_tying(true, 100);
    let untied = train_tying(false, 100);
    let tied_ok = tied.moved && tied.role_identical_after && tied.sense_identical_after;
    let untied_ok = untied.role_identical_before
        && untied.sense_identical_before
        && !untied.role_identical_after
        && !untied.sense_identical_after;
    combine(
        "criterion 3 weight tying",
        vec![
            Outcome::new(
                "",
                tied_ok,
                format!(
                    "tied after 100 steps: role views identical {}, sense views identical {}",
                    tied.role_identical_after, tied.sense_identical_after
                ),
            ),
            Outcome::new(
                "",
                untied_ok,
                format!(
                    "untied: identical at start {}, role diverged {}, sense diverged {}",
                    untied.role_identical_before && untied.sense_identical_before,
                    !untied.role_identical_after,
                    !untied.sense_identical_after
                ),
            ),
        ],
    )
}

// ---------------------------------------------------------------------
// criteria 5 and 6: brute-force scorer and violation oracles

const LABELS: [&str; 10] = [
    "A0", "A1", "A2", "AA", "AM-TMP", "C-A0", "C-A1", "R-A0", "R-A1", "A3",
];

pub fn random_prediction(rng: &mut impl Rng, len: usize) -> Prediction {
    let roles = (0..len)
        .map(|_| {
            if rng.random_bool(0.45) {
                None
            } else {
                Some(LABELS[rng.random_range(0..LABELS.len())].to_string())
            }
        })
        .collect();
    Prediction {
        sense: format!("v.0{}", rng.random_range(1..3)),
        roles,
    }
}

/// A gold set and a prediction of it with random corruptions.
pub fn random_instance_set(rng: &mut impl Rng) -> (Vec<Prediction>, Vec<Prediction>) {
    let k = rng.random_range(1..6);
    let mut gold = Vec::with_capacity(k);
    let mut pred = Vec::with_capacity(k);
    for _ in 0..k {
        let len = rng.random_range(1..8);
        let g = random_prediction(rng, len);
        let mut p = g.clone();
        if rng.random_bool(0.5) {
            p.sense = format!("v.0{}", rng.random_range(1..3));
        }
        let noise = random_prediction(rng, len);
        for (slot, other) in p.roles.iter_mut().zip(noise.roles) {
            if rng.random_bool(0.3) {
                *slot = other;
            }
        }
        gold.push(g);
        pred.push(p);
    }
    (gold, pred)
}

type Item = (usize, usize, String);

/// Scored items as sets: `(instance, 0, sense)` and
/// `(instance, token + 1, role)`.
fn items(preds: &[Prediction], with_sense: bool) -> Vec<Item> {
    let mut out = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if with_sense {
            out.push((i, 0, format!("sense:{}", p.sense)));
        }
        for (t, r) in p.roles.iter().enumerate() {
            if let Some(r) = r {
                out.push((i, t + 1, r.clone()));
            }
        }
    }
    out
}

fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    // An empty side scores 1 only when the other side is empty too.
    let p = if predicted > 0 {
        correct as f64 / predicted as f64
    } else if gold == 0 {
        1.0
    } else {
        0.0
    };
    let r = if gold > 0 {
        correct as f64 / gold as f64
    } else if predicted == 0 {
        1.0
    } else {
        0.0
    };
    let f = if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    };
    (p, r, f)
}

pub struct OracleScore {
    pub counts: (usize, usize, usize),
    pub prf: (f64, f64, f64),
    pub decomposition: Decomposition,
}

pub fn oracle_score(gold: &[Prediction], pred: &[Prediction]) -> OracleScore {
    let score = |with_sense: bool| {
        let g = items(gold, with_sense);
        let p = items(pred, with_sense);
        let correct = p.iter().filter(|x| g.contains(x)).count();
        (correct, p.len(), g.len())
    };
    let counts = score(true);
    let roles = score(false);
    let (rp, rr, _) = prf(roles.0, roles.1, roles.2);
    let senses = gold
        .iter()
        .zip(pred)
        .filter(|(g, p)| g.sense == p.sense)
        .count();
    OracleScore {
        counts,
        prf: prf(counts.0, counts.1, counts.2),
        decomposition: Decomposition {
            role_precision: rp,
            role_recall: rr,
            sense_accuracy: if gold.is_empty() {
                1.0
            } else {
                senses as f64 / gold.len() as f64
            },
        },
    }
}

/// Violations by exhaustive pair and prefix search.
pub fn oracle_violations(roles: &[Option<String>]) -> ViolationCounts {
    let core = ["A0", "A1", "A2", "A3", "A4", "A5", "AA"];
    let at = |i: usize| roles[i].as_deref();
    let n = roles.len();
    let mut v = ViolationCounts::default();
    for label in core {
        let mut repeated = false;
        for i in 0..n {
            for j in i + 1..n {
                repeated |= at(i) == Some(label) && at(j) == Some(label);
            }
        }
        v.unique += repeated as usize;
    }
    for i in 0..n {
        let Some(l) = at(i) else { continue };
        if l.len() > 2 && &l[..2] == "C-" {
            let base = &l[2..];
            v.continuation += (0..i).all(|k| at(k) != Some(base)) as usize;
        }
        if l.len() > 2 && &l[..2] == "R-" {
            let base = &l[2..];
            v.reference += (0..n).all(|k| at(k) != Some(base)) as usize;
        }
    }
    v
}

pub fn oracle_violations_all(preds: &[Prediction]) -> ViolationCounts {
    let mut total = ViolationCounts::default();
    for p in preds {
        total += oracle_violations(&p.roles);
    }
    total
}

pub fn criterion_6(sets: usize) -> Outcome {
    let mut rng = rng_for(66, &[]);
    let mut mismatches = Vec::new();
    for k in 0..sets {
        let (gold, pred) = random_instance_set(&mut rng);
        let report = labeled_f1(&gold, &pred).unwrap();
        let oracle = oracle_score(&gold, &pred);
        let l = report.labeled;
        if (l.correct, l.predicted, l.gold) != oracle.counts
            || (report.precision(), report.recall(), report.f1()) != oracle.prf
        {
            mismatches.push(format!("set {k}: labeled_f1"));
        }
        if itersrl::eval::decompose(&gold, &pred).unwrap() != oracle.decomposition {
            mismatches.push(format!("set {k}: decompose"));
        }
        if constraint_violations(&pred) != oracle_violations_all(&pred) {
            mismatches.push(format!("set {k}: violations"));
        }
    }
    Outcome::new(
        "criterion 6 scorer oracle",
        mismatches.is_empty(),
        if mismatches.is_empty() {
            format!("labeled_f1, decompose and violations agree on {sets} random sets")
        } else {
            format!("{} mismatches, first {}", mismatches.len(), mismatches[0])
        },
    )
}

// ---------------------------------------------------------------------
// criterion 7: round trips

pub fn fixtures() -> Vec<(String, String)> {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures");
    let mut out: Vec<(String, String)> = std::fs::read_dir(&dir)
        .expect("fixture directory")
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "conll"))
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read_to_string(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

/// `parse → write → parse` gives the same sentences and writing again
/// gives the same bytes.
pub fn round_trips(text: &str) -> std::result::Result<(), String> {
    let first = parse_corpus(text).map_err(|e| e.to_string())?;
    let written = write_corpus(&first);
    let second = parse_corpus(&written).map_err(|e| e.to_string())?;
    if first != second {
        return Err("reparsed sentences differ".into());
    }
    if write_corpus(&second) != written {
        return Err("second write differs".into());
    }
    Ok(())
}

pub fn generated_corpora() -> Vec<(String, String)> {
    let mut out = Vec::new();
    for (seed, q, fillers) in [(7, 1.0, 3), (8, 0.5, 0), (9, 0.0, 6)] {
        let cfg = GrammarConfig {
            seed,
            sentences: 60,
            q,
            max_fillers: fillers,
            ..GrammarConfig::default()
        };
        out.push((
            format!("synth seed {seed}"),
            itersrl::synth::generate_text(&cfg).unwrap(),
        ));
    }
    out
}

/// Saves and reloads both checkpoint kinds; bytes, tensors and
/// predictions must match exactly.
pub fn checkpoints_bit_exact(dir: &std::path::Path) -> std::result::Result<(), String> {
    let corpus = toy_corpus(10, 6);
    let vocab = Vocabulary::build(&corpus, 1, false);
    let baseline = BaselineBundle::new(vocab.clone(), &toy_dims(), 2).unwrap();
    let refiner = RefinerBundle::new(&baseline, RefineMode::Structured, false, 3).unwrap();
    let check = |name: &str, ckpt: &Checkpoint| -> std::result::Result<Checkpoint, String> {
        let path = dir.join(name);
        let hash = ckpt.save(&path).map_err(|e| e.to_string())?;
        let back = Checkpoint::load(&path).map_err(|e| e.to_string())?;
        if back.to_bytes().unwrap() != ckpt.to_bytes().unwrap() {
            return Err(format!("{name}: bytes differ after reload"));
        }
        if back.content_hash().unwrap() != hash {
            return Err(format!("{name}: hash differs after reload"));
        }
        Ok(back)
    };
    let b = check("baseline.ckpt", &baseline.checkpoint().unwrap())?;
    let b = BaselineBundle::from_checkpoint(&b, vocab.clone()).map_err(|e| e.to_string())?;
    for ((_, n1, t1), (_, n2, t2)) in baseline.store.iter().zip(b.store.iter()) {
        if n1 != n2 || bits(t1) != bits(t2) || t1.shape() != t2.shape() {
            return Err(format!("baseline tensor {n1} differs"));
        }
    }
    let r = check("refiner.ckpt", &refiner.checkpoint().unwrap())?;
    let r = RefinerBundle::from_checkpoint(&r, &b).map_err(|e| e.to_string())?;
    for ((_, n1, t1), (_, n2, t2)) in refiner.store.iter().zip(r.store.iter()) {
        if n1 != n2 || bits(t1) != bits(t2) {
            return Err(format!("refiner tensor {n1} differs"));
        }
    }
    let before = itersrl::bundle::Predictor::new(&baseline, Some(&refiner), 2)
        .predict_steps(&corpus)
        .unwrap();
    let after = itersrl::bundle::Predictor::new(&b, Some(&r), 2)
        .predict_steps(&corpus)
        .unwrap();
    if before != after {
        return Err("predictions differ after reload".into());
    }
    Ok(())
}

pub fn criterion_7() -> Outcome {
    let mut failures = Vec::new();
    let fx = fixtures();
    for (name, text) in fx.iter().chain(&generated_corpora()) {
        if let Err(e) = round_trips(text) {
            failures.push(format!("{name}: {e}"));
        }
    }
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = checkpoints_bit_exact(tmp.path());
    if let Err(e) = &ckpt {
        failures.push(e.clone());
    }
    Outcome::new(
        "criterion 7 I/O round trip",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "{} fixtures and 3 generated corpora are fixpoints; checkpoints bit-exact",
                fx.len()
            )
        } else {
            failures.join("; ")
        },
    )
}

/// Gold predictions of every instance.
pub fn gold_of(sentences: &[Sentence]) -> Vec<Prediction> {
    extract_instances(sentences)
        .iter()
        .map(|i| i.gold())
        .collect()
}

/// Counts of gold labels, for messages.
pub fn label_counts(preds: &[Prediction]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for p in preds {
        for r in p.roles.iter().flatten() {
            *m.entry(r.clone()).or_default() += 1;
        }
    }
    m
}
