//! Factorized baseline: biaffine role scoring split into a null scorer and
//! an other-roles scorer, merged into one softmax, plus predicate-specific
//! sense disambiguation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::conll::Prediction;
use crate::encoder::{Dims, EmbeddingTables, Encoder, Extractors, Mlp, TokenIds};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SrlRng;
use crate::tensor::{argmax, softmax_rows, Scalar, Tensor};
use crate::vocab::Vocabulary;

pub const ARG_NULL: &str = "arg_null";
pub const ARG_ROLE: &str = "arg_role";
pub const PRED_NULL: &str = "pred_null";
pub const PRED_ROLE: &str = "pred_role";
pub const PRED_SENSE: &str = "pred_sense";

/// `score_k(p, a) = pᵀ U_k a + w_k · [p; a] + b_k` for `k` in `0..outputs`.
#[derive(Clone, Debug)]
pub struct Biaffine {
    /// `d_p × (outputs · d_a)`, block `k` holds `U_k`.
    pub bilinear: ParamId,
    pub pred_linear: ParamId,
    pub arg_linear: ParamId,
    pub bias: ParamId,
    pub pred_dim: usize,
    pub arg_dim: usize,
    pub outputs: usize,
}

impl Biaffine {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        name: &str,
        pred_dim: usize,
        arg_dim: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Biaffine {
            bilinear: store.add_glorot(format!("{name}/u"), pred_dim, outputs * arg_dim, rng)?,
            pred_linear: store.add_glorot(format!("{name}/w_pred"), pred_dim, outputs, rng)?,
            arg_linear: store.add_glorot(format!("{name}/w_arg"), arg_dim, outputs, rng)?,
            bias: store.add_zeros(format!("{name}/b"), 1, outputs)?,
            pred_dim,
            arg_dim,
            outputs,
        })
    }

    /// Scores every argument row against one predicate vector, giving
    /// `n × outputs` logits.
    pub fn score<T: Scalar>(&self, g: &mut Graph<'_, T>, pred: Var, args: Var) -> Result<Var> {
        let u = g.param(self.bilinear);
        let pu = g.matmul(pred, u)?;
        let blocks = g.reshape(pu, self.outputs, self.arg_dim)?;
        let bilinear = g.matmul_t(args, blocks)?;
        let wa = g.param(self.arg_linear);
        let arg_lin = g.matmul(args, wa)?;
        let wp = g.param(self.pred_linear);
        let pred_lin = g.matmul(pred, wp)?;
        let b = g.param(self.bias);
        let row = g.add(pred_lin, b)?;
        let sum = g.add(bilinear, arg_lin)?;
        g.add_row(sum, row)
    }
}

/// Graph handles for one encoded sentence.
#[derive(Clone, Copy, Debug)]
pub struct SentenceFeatures {
    /// Embedded sentence, reused by the refiner.
    pub x: Var,
    /// Encoder output.
    pub h: Var,
    pub arg_null: Var,
    pub arg_role: Var,
}

/// Graph handles for one predicate.
#[derive(Clone, Copy, Debug)]
pub struct BaselineVars {
    pub null_logits: Var,
    pub other_logits: Var,
    /// `n × r`: null column followed by the other roles.
    pub role_logits: Var,
    /// `1 × m`.
    pub sense_logits: Var,
}

#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub dims: Dims,
    pub num_roles: usize,
    pub embeddings: EmbeddingTables,
    pub encoder: Encoder,
    pub extractors: Extractors,
    pub null_scorer: Biaffine,
    pub role_scorer: Biaffine,
    /// Sense embedding matrix per predicate lemma.
    pub senses: BTreeMap<String, ParamId>,
}

impl BaselineModel {
    pub const PREFIX: &'static str = "baseline";

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        vocab: &Vocabulary,
        dims: &Dims,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Self::PREFIX;
        let r = vocab.num_roles();
        if r < 2 {
            return Err(Error::Config(
                "the role inventory needs at least one non-null role".into(),
            ));
        }
        let embeddings = EmbeddingTables::new(store, &format!("{p}/emb"), vocab, dims, rng)?;
        let encoder = Encoder::new(
            store,
            &format!("{p}/encoder"),
            dims.input_width(),
            dims,
            rng,
        )?;
        let enc = encoder.output_width();
        let mut extractors = Extractors::default();
        for (name, width) in [
            (ARG_NULL, dims.null_feature),
            (ARG_ROLE, dims.role_feature),
            (PRED_NULL, dims.null_feature),
            (PRED_ROLE, dims.role_feature),
            (PRED_SENSE, dims.sense),
        ] {
            extractors.insert(
                name,
                Mlp::new(store, &format!("{p}/{name}"), enc, width, rng)?,
            );
        }
        let null_scorer = Biaffine::new(
            store,
            &format!("{p}/null"),
            dims.null_feature,
            dims.null_feature,
            1,
            rng,
        )?;
        let role_scorer = Biaffine::new(
            store,
            &format!("{p}/roles"),
            dims.role_feature,
            dims.role_feature,
            r - 1,
            rng,
        )?;

        let normal = Normal::new(0.0, 0.1).expect("valid std");
        let mut senses = BTreeMap::new();
        for (k, (lemma, inventory)) in vocab.senses.iter().enumerate() {
            let t = Tensor::from_fn(inventory.len(), dims.sense, |_, _| {
                normal.sample(rng) as f32
            });
            senses.insert(lemma.clone(), store.add(format!("{p}/sense/{k}"), t)?);
        }
        Ok(BaselineModel {
            dims: dims.clone(),
            num_roles: r,
            embeddings,
            encoder,
            extractors,
            null_scorer,
            role_scorer,
            senses,
        })
    }

    /// Embeds and encodes a sentence and extracts argument-side features.
    pub fn encode_sentence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        ids: &TokenIds,
        mut rng: Option<&mut SrlRng>,
    ) -> Result<SentenceFeatures> {
        let x = self.embeddings.embed(g, ids)?;
        let mut h = self.encoder.encode(g, x, rng.as_deref_mut())?;
        if let Some(r) = rng {
            h = g.dropout(h, self.dims.dropout, r)?;
        }
        Ok(SentenceFeatures {
            x,
            h,
            arg_null: self.extractors.apply(g, ARG_NULL, h)?,
            arg_role: self.extractors.apply(g, ARG_ROLE, h)?,
        })
    }

    /// Role logits `I^α` for the predicate at 0-based `row`.
    pub fn score_roles<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f: &SentenceFeatures,
        row: usize,
    ) -> Result<(Var, Var, Var)> {
        let hj = g.row(f.h, row)?;
        let pred_null = self.extractors.apply(g, PRED_NULL, hj)?;
        let pred_role = self.extractors.apply(g, PRED_ROLE, hj)?;
        let null_logits = self.null_scorer.score(g, pred_null, f.arg_null)?;
        let other_logits = self.role_scorer.score(g, pred_role, f.arg_role)?;
        let roles = g.concat_cols(&[null_logits, other_logits])?;
        Ok((null_logits, other_logits, roles))
    }

    /// Sense logits `I^π = Π · MLP(h_j)`. Unseen lemmas get a single
    /// constant zero logit.
    pub fn score_senses<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f: &SentenceFeatures,
        row: usize,
        lemma: &str,
    ) -> Result<Var> {
        match self.senses.get(lemma) {
            Some(&pi) => {
                let hj = g.row(f.h, row)?;
                let feat = self.extractors.apply(g, PRED_SENSE, hj)?;
                let pi = g.param(pi);
                g.matmul_t(feat, pi)
            }
            None => Ok(g.constant(Tensor::zeros(1, 1))),
        }
    }

    pub fn predicate<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f: &SentenceFeatures,
        row: usize,
        lemma: &str,
    ) -> Result<BaselineVars> {
        let (null_logits, other_logits, role_logits) = self.score_roles(g, f, row)?;
        let sense_logits = self.score_senses(g, f, row, lemma)?;
        Ok(BaselineVars {
            null_logits,
            other_logits,
            role_logits,
            sense_logits,
        })
    }

    /// The sense embedding matrix of `lemma`, or a single zero row for
    /// lemmas without an inventory.
    pub fn sense_matrix<T: Scalar>(&self, store: &ParamStore<T>, lemma: &str) -> Tensor<T> {
        match self.senses.get(lemma) {
            Some(&id) => store.get(id).clone(),
            None => Tensor::zeros(1, self.dims.sense),
        }
    }
}

/// Row-wise softmax of role logits.
pub fn role_distribution<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    softmax_rows(logits)
}

/// Argmax readout; ties resolve to the lowest index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub roles: Vec<usize>,
    pub sense: usize,
}

pub fn decode<T: Scalar>(roles: &Tensor<T>, senses: &Tensor<T>) -> Decoded {
    Decoded {
        roles: (0..roles.rows()).map(|i| roles.argmax_row(i)).collect(),
        sense: argmax(senses.data()),
    }
}

impl Decoded {
    pub fn to_prediction(&self, vocab: &Vocabulary, lemma: &str) -> Prediction {
        let inventory = vocab.sense_inventory(lemma);
        Prediction {
            sense: inventory[self.sense.min(inventory.len() - 1)].clone(),
            roles: self
                .roles
                .iter()
                .map(|&r| vocab.role_name(r).map(str::to_string))
                .collect(),
        }
    }
}
