//! Sentence encoding shared by the baseline and the refiner.
//!
//! Tokens are embedded by concatenating word, dependency-label and POS
//! vectors, encoded by a three-layer highway BiLSTM, and turned into
//! task features by one-layer ELU MLPs.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conll::Sentence;
use crate::error::{Error, Result};
use crate::graph::{dropout_mask, Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SrlRng;
use crate::tensor::{Scalar, Tensor};
use crate::vocab::Vocabulary;

/// Number of stacked BiLSTM layers.
pub const LAYERS: usize = 3;

/// Layer widths and dropout rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub word: usize,
    pub deprel: usize,
    pub pos: usize,
    /// BiLSTM hidden size per direction.
    pub hidden: usize,
    pub null_feature: usize,
    pub role_feature: usize,
    pub sense: usize,
    pub refine_feature: usize,
    pub refine_hidden: usize,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl Default for Dims {
    /// Sizes used for the non-English CoNLL-2009 languages.
    fn default() -> Self {
        Dims {
            word: 300,
            deprel: 64,
            pos: 64,
            hidden: 428,
            null_feature: 300,
            role_feature: 128,
            sense: 128,
            refine_feature: 200,
            refine_hidden: 200,
            dropout: 0.3,
            recurrent_dropout: 0.3,
        }
    }
}

impl Dims {
    /// The larger English configuration.
    pub fn english() -> Self {
        Dims {
            word: 1024,
            hidden: 500,
            ..Self::default()
        }
    }

    /// Small sizes for synthetic corpora and tests.
    pub fn desk() -> Self {
        Dims {
            word: 24,
            deprel: 8,
            pos: 8,
            hidden: 24,
            null_feature: 24,
            role_feature: 16,
            sense: 16,
            refine_feature: 16,
            refine_hidden: 32,
            dropout: 0.3,
            recurrent_dropout: 0.3,
        }
    }

    pub fn input_width(&self) -> usize {
        self.word + self.deprel + self.pos
    }

    pub fn encoded_width(&self) -> usize {
        2 * self.hidden
    }
}

/// Vocabulary indices of one sentence's model inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenIds {
    pub words: Vec<usize>,
    pub deprels: Vec<usize>,
    pub pos: Vec<usize>,
}

impl TokenIds {
    /// Uses the predicted POS and dependency columns.
    pub fn from_sentence(s: &Sentence, vocab: &Vocabulary) -> Self {
        TokenIds {
            words: s.tokens.iter().map(|t| vocab.word_id(&t.form)).collect(),
            deprels: s
                .tokens
                .iter()
                .map(|t| vocab.deprel_id(&t.pdeprel))
                .collect(),
            pos: s.tokens.iter().map(|t| vocab.pos_id(&t.ppos)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EmbeddingTables {
    pub words: ParamId,
    pub deprels: ParamId,
    pub pos: ParamId,
}

impl EmbeddingTables {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        prefix: &str,
        vocab: &Vocabulary,
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        let std = |d: usize| 1.0 / (d as f64).sqrt();
        Ok(EmbeddingTables {
            words: store.add_normal(
                format!("{prefix}/words"),
                vocab.words.len(),
                dims.word,
                std(dims.word),
                rng,
            )?,
            deprels: store.add_normal(
                format!("{prefix}/deprels"),
                vocab.deprels.len(),
                dims.deprel,
                std(dims.deprel),
                rng,
            )?,
            pos: store.add_normal(
                format!("{prefix}/pos"),
                vocab.pos.len(),
                dims.pos,
                std(dims.pos),
                rng,
            )?,
        })
    }

    /// Copies pretrained vectors into the word table and freezes those
    /// rows. Returns the number of rows loaded. The unknown-word row stays
    /// trainable.
    pub fn load_pretrained(
        &self,
        store: &mut ParamStore<f32>,
        vocab: &Vocabulary,
        vectors: &WordVectors,
    ) -> Result<usize> {
        let table = store.get_mut(self.words);
        if vectors.dim != table.cols() {
            return Err(Error::shape(
                "load_pretrained",
                table.shape(),
                &[vectors.dim],
            ));
        }
        let mut frozen = vec![false; table.rows()];
        for (i, word) in vocab.words.items().iter().enumerate().skip(1) {
            if let Some(v) = vectors.get(word) {
                table.row_slice_mut(i).copy_from_slice(v);
                frozen[i] = true;
            }
        }
        let loaded = frozen.iter().filter(|&&f| f).count();
        store.set_frozen_rows(self.words, frozen);
        Ok(loaded)
    }

    /// Concatenated `n × (d_w + d_δ + d_p)` token representations.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<'_, T>, ids: &TokenIds) -> Result<Var> {
        let w = g.gather(self.words, &ids.words)?;
        let d = g.gather(self.deprels, &ids.deprels)?;
        let p = g.gather(self.pos, &ids.pos)?;
        g.concat_cols(&[w, d, p])
    }
}

/// Static word vectors read from `token v1 … v_d` lines. A first line of
/// two integers (`count dim`, as in fastText `.vec` files) is skipped.
#[derive(Clone, Debug, Default)]
pub struct WordVectors {
    pub dim: usize,
    vectors: HashMap<String, Vec<f32>>,
}

fn is_header(line: &str) -> bool {
    let fields: Vec<&str> = line.split_whitespace().collect();
    fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = WordVectors::default();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else { continue };
            if i == 0 && is_header(line) {
                continue;
            }
            let values: Vec<f32> = fields
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("bad vector component: {e}"),
                })?;
            if out.dim == 0 {
                out.dim = values.len();
            }
            if values.len() != out.dim || values.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("expected {} components, found {}", out.dim, values.len()),
                });
            }
            out.vectors.insert(word.to_string(), values);
        }
        Ok(out)
    }

    pub fn get(&self, word: &str) -> Option<&[f32]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

/// One direction of one highway LSTM layer.
///
/// Gate order in the packed matrices: input, forget, output, candidate,
/// highway transform. The layer output is
/// `t ⊙ (o ⊙ tanh c) + (1 − t) ⊙ proj(x)`, which is also the recurrent
/// state.
#[derive(Clone, Debug)]
pub struct LstmDirection {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub bias: ParamId,
    /// Input projection for the highway path; `None` when widths agree.
    pub proj: Option<ParamId>,
    pub hidden: usize,
    pub reverse: bool,
}

impl LstmDirection {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        prefix: &str,
        input: usize,
        hidden: usize,
        reverse: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w_x = store.add_glorot(format!("{prefix}/w_x"), input, 5 * hidden, rng)?;
        let w_h = store.add_glorot(format!("{prefix}/w_h"), hidden, 5 * hidden, rng)?;
        let mut b = Tensor::zeros(1, 5 * hidden);
        for k in hidden..2 * hidden {
            b.data_mut()[k] = 1.0;
        }
        let bias = store.add(format!("{prefix}/bias"), b)?;
        let proj = if input != hidden {
            Some(store.add_glorot(format!("{prefix}/proj"), input, hidden, rng)?)
        } else {
            None
        };
        Ok(LstmDirection {
            w_x,
            w_h,
            bias,
            proj,
            hidden,
            reverse,
        })
    }

    /// Runs over the rows of `x`, returning an `n × hidden` matrix whose
    /// row `t` is the state after reading token `t`.
    pub fn run<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        rng: Option<&mut SrlRng>,
        recurrent_dropout: f64,
    ) -> Result<Var> {
        let n = g.value(x).rows();
        let h = self.hidden;
        let w_x = g.param(self.w_x);
        let w_h = g.param(self.w_h);
        let bias = g.param(self.bias);
        let xw = g.matmul(x, w_x)?;
        let pre_x = g.add_row(xw, bias)?;
        let highway_in = match self.proj {
            Some(p) => {
                let p = g.param(p);
                g.matmul(x, p)?
            }
            None => x,
        };
        let mask = match rng {
            Some(rng) if recurrent_dropout > 0.0 => {
                Some(g.constant(dropout_mask(1, h, recurrent_dropout, rng)))
            }
            _ => None,
        };

        let mut state = g.constant(Tensor::zeros(1, h));
        let mut cell = g.constant(Tensor::zeros(1, h));
        let mut outputs = vec![state; n];
        let order: Vec<usize> = if self.reverse {
            (0..n).rev().collect()
        } else {
            (0..n).collect()
        };
        for t in order {
            let prev = match mask {
                Some(m) => g.mul(state, m)?,
                None => state,
            };
            let rec = g.matmul(prev, w_h)?;
            let xt = g.row(pre_x, t)?;
            let gates = g.add(xt, rec)?;
            let i = g.slice_cols(gates, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(gates, h, 2 * h)?;
            let f = g.sigmoid(f);
            let o = g.slice_cols(gates, 2 * h, 3 * h)?;
            let o = g.sigmoid(o);
            let c_hat = g.slice_cols(gates, 3 * h, 4 * h)?;
            let c_hat = g.tanh(c_hat);
            let carry = g.slice_cols(gates, 4 * h, 5 * h)?;
            let carry = g.sigmoid(carry);

            let kept = g.mul(f, cell)?;
            let written = g.mul(i, c_hat)?;
            cell = g.add(kept, written)?;
            let squashed = g.tanh(cell);
            let lstm_out = g.mul(o, squashed)?;
            let gated = g.mul(carry, lstm_out)?;
            let skip = g.one_minus(carry);
            let skip_in = g.row(highway_in, t)?;
            let skipped = g.mul(skip, skip_in)?;
            state = g.add(gated, skipped)?;
            outputs[t] = state;
        }
        g.concat_rows(&outputs)
    }
}

#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

/// Three stacked highway BiLSTM layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<BiLstmLayer>,
    pub dropout: f64,
    pub recurrent_dropout: f64,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        prefix: &str,
        input: usize,
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(LAYERS);
        let mut width = input;
        for l in 0..LAYERS {
            layers.push(BiLstmLayer {
                forward: LstmDirection::new(
                    store,
                    &format!("{prefix}/l{l}/fw"),
                    width,
                    dims.hidden,
                    false,
                    rng,
                )?,
                backward: LstmDirection::new(
                    store,
                    &format!("{prefix}/l{l}/bw"),
                    width,
                    dims.hidden,
                    true,
                    rng,
                )?,
            });
            width = 2 * dims.hidden;
        }
        Ok(Encoder {
            layers,
            dropout: dims.dropout,
            recurrent_dropout: dims.recurrent_dropout,
        })
    }

    pub fn output_width(&self) -> usize {
        2 * self.layers[0].forward.hidden
    }

    /// `n × 2·hidden` contextual representations. Passing an RNG selects
    /// training mode (dropout on; one recurrent mask per sequence, layer
    /// and direction).
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mut rng: Option<&mut SrlRng>,
    ) -> Result<Var> {
        let mut input = x;
        for layer in &self.layers {
            if let Some(r) = rng.as_deref_mut() {
                input = g.dropout(input, self.dropout, r)?;
            }
            let fw = layer
                .forward
                .run(g, input, rng.as_deref_mut(), self.recurrent_dropout)?;
            let bw = layer
                .backward
                .run(g, input, rng.as_deref_mut(), self.recurrent_dropout)?;
            input = g.concat_cols(&[fw, bw])?;
        }
        Ok(input)
    }
}

/// A one-layer MLP with ELU activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Mlp {
            weight: store.add_glorot(format!("{name}/w"), input, output, rng)?,
            bias: store.add_zeros(format!("{name}/b"), 1, output)?,
            input,
            output,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if g.value(x).cols() != self.input {
            return Err(Error::shape(
                "mlp",
                g.value(x).shape(),
                &[self.input, self.output],
            ));
        }
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let lin = g.matmul(x, w)?;
        let pre = g.add_row(lin, b)?;
        Ok(g.elu(pre))
    }
}

/// Named MLP feature extractors.
#[derive(Clone, Debug, Default)]
pub struct Extractors {
    mlps: BTreeMap<String, Mlp>,
}

impl Extractors {
    pub fn insert(&mut self, name: &str, mlp: Mlp) {
        self.mlps.insert(name.to_string(), mlp);
    }

    pub fn get(&self, name: &str) -> Result<&Mlp> {
        self.mlps
            .get(name)
            .ok_or_else(|| Error::UnknownExtractor(name.to_string()))
    }

    pub fn apply<T: Scalar>(&self, g: &mut Graph<'_, T>, name: &str, x: Var) -> Result<Var> {
        self.get(name)?.forward(g, x)
    }
}
