//! Role and sense refinement networks.
//!
//! Given the previous role matrix `R` (`n × r`, row-stochastic) and sense
//! distribution `P` (`1 × m`), the role network builds for every token
//!
//! ```text
//! z_i = R_i ∘ o_i ∘ gα_i ∘ gπ ∘ Πᵀ·P        o_i = Σ_{k≠i} R_k[1:]
//! M_i = Wᵅ · σ(W_α · z_i)                   R' = softmax(M + Iᵅ)
//! ```
//!
//! and the sense network
//!
//! ```text
//! z = Πᵀ·P ∘ Σ_k R_k[1:] ∘ gπ               P' = softmax(Π · Wᵖ · σ(W_π · z) + Iᵖ)
//! ```
//!
//! where `∘` is concatenation and `Iᵅ`, `Iᵖ` are the frozen baseline
//! logits. With weight tying, `Wᵅ` is the transpose of the columns of
//! `W_α` that read `R_i`, and `Wᵖ` the transpose of the columns of `W_π`
//! that read `Πᵀ·P`; both views share storage with the encoder side.
//!
//! Self-refinement drops `o_i` from the role input and `Σ_k R_k[1:]` from
//! the sense input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Dims, Encoder, Mlp};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::SrlRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineMode {
    /// Uses other-token role aggregates.
    Structured,
    /// Per-token refinement without argument interaction.
    #[serde(rename = "self")]
    SelfRefine,
}

impl std::str::FromStr for RefineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured" => Ok(RefineMode::Structured),
            "self" => Ok(RefineMode::SelfRefine),
            other => Err(Error::Config(format!("unknown refinement mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for RefineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RefineMode::Structured => "structured",
            RefineMode::SelfRefine => "self",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RefinerModel {
    pub dims: Dims,
    pub num_roles: usize,
    pub mode: RefineMode,
    pub tied: bool,
    pub encoder: Encoder,
    pub arg_feature: Mlp,
    pub pred_feature: Mlp,
    /// `W_α`: `d_r × width(z^α)`.
    pub role_in: ParamId,
    /// Untied decoder, stored transposed as `d_r × r`.
    pub role_out: Option<ParamId>,
    /// `W_π`: `d_r × width(z^π)`.
    pub sense_in: ParamId,
    /// Untied decoder, stored transposed as `d_r × d_π`.
    pub sense_out: Option<ParamId>,
}

/// Refiner encoder output for one sentence.
#[derive(Clone, Copy, Debug)]
pub struct RefinerSentence {
    pub h: Var,
    /// `gα`, `n × d_g`.
    pub arg_features: Var,
}

/// Frozen per-instance inputs shared by all refinement steps.
#[derive(Clone, Copy, Debug)]
pub struct RefinerInputs {
    /// `n × d_g`.
    pub arg_features: Var,
    /// `1 × d_g`.
    pub pred_features: Var,
    /// Sense embeddings `Π`, `m × d_π`.
    pub senses: Var,
    /// Baseline role logits `Iᵅ`, `n × r`.
    pub role_logits: Var,
    /// Baseline sense logits `Iᵖ`, `1 × m`.
    pub sense_logits: Var,
}

/// Intermediate values of one role refinement step.
#[derive(Clone, Copy, Debug)]
pub struct RoleTrace {
    pub others: Option<Var>,
    pub input: Var,
    /// `Mᵅ`.
    pub logits: Var,
    /// `Mᵅ + Iᵅ`.
    pub scores: Var,
    pub output: Var,
}

/// Intermediate values of one sense refinement step.
#[derive(Clone, Copy, Debug)]
pub struct SenseTrace {
    pub role_mass: Option<Var>,
    pub input: Var,
    /// `Mᵖ`.
    pub logits: Var,
    /// `Mᵖ + Iᵖ`.
    pub scores: Var,
    pub output: Var,
}

/// One refinement step.
#[derive(Clone, Copy, Debug)]
pub struct StepTrace {
    pub roles: RoleTrace,
    pub senses: SenseTrace,
}

/// `o_i = Σ_{k≠i} R_k[1:]`, computed as the column sums minus the row.
pub fn aggregate_other_roles<T: Scalar>(g: &mut Graph<'_, T>, roles: Var) -> Result<Var> {
    let (n, r) = {
        let v = g.value(roles);
        (v.rows(), v.cols())
    };
    let non_null = g.slice_cols(roles, 1, r)?;
    let totals = g.sum_rows(non_null);
    let spread = g.broadcast_rows(totals, n)?;
    g.sub(spread, non_null)
}

/// `Σ_k R_k[1:]`.
pub fn role_mass<T: Scalar>(g: &mut Graph<'_, T>, roles: Var) -> Result<Var> {
    let r = g.value(roles).cols();
    let non_null = g.slice_cols(roles, 1, r)?;
    Ok(g.sum_rows(non_null))
}

impl RefinerModel {
    pub const PREFIX: &'static str = "refiner";

    pub fn role_input_width(dims: &Dims, r: usize, mode: RefineMode) -> usize {
        match mode {
            RefineMode::Structured => 2 * r - 1 + 2 * dims.refine_feature + dims.sense,
            RefineMode::SelfRefine => r + 2 * dims.refine_feature + dims.sense,
        }
    }

    pub fn sense_input_width(dims: &Dims, r: usize, mode: RefineMode) -> usize {
        match mode {
            RefineMode::Structured => r - 1 + dims.refine_feature + dims.sense,
            RefineMode::SelfRefine => dims.refine_feature + dims.sense,
        }
    }

    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        dims: &Dims,
        num_roles: usize,
        mode: RefineMode,
        tied: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let p = Self::PREFIX;
        let encoder = Encoder::new(
            store,
            &format!("{p}/encoder"),
            dims.input_width(),
            dims,
            rng,
        )?;
        let enc = encoder.output_width();
        let arg_feature = Mlp::new(
            store,
            &format!("{p}/arg_feature"),
            enc,
            dims.refine_feature,
            rng,
        )?;
        let pred_feature = Mlp::new(
            store,
            &format!("{p}/pred_feature"),
            enc,
            dims.refine_feature,
            rng,
        )?;
        let role_width = Self::role_input_width(dims, num_roles, mode);
        let sense_width = Self::sense_input_width(dims, num_roles, mode);
        let role_in =
            store.add_glorot(format!("{p}/role_in"), dims.refine_hidden, role_width, rng)?;
        let sense_in = store.add_glorot(
            format!("{p}/sense_in"),
            dims.refine_hidden,
            sense_width,
            rng,
        )?;
        let (role_out, sense_out) = if tied {
            (None, None)
        } else {
            // Untied decoders start as copies of the tied views.
            let r_view = column_block(store.get(role_in), num_roles);
            let s_view = column_block(store.get(sense_in), dims.sense);
            (
                Some(store.add(format!("{p}/role_out"), r_view)?),
                Some(store.add(format!("{p}/sense_out"), s_view)?),
            )
        };
        Ok(RefinerModel {
            dims: dims.clone(),
            num_roles,
            mode,
            tied,
            encoder,
            arg_feature,
            pred_feature,
            role_in,
            role_out,
            sense_in,
            sense_out,
        })
    }

    /// Encodes a sentence and extracts `gα` for every token.
    pub fn encode_sentence<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        mut rng: Option<&mut SrlRng>,
    ) -> Result<RefinerSentence> {
        let mut h = self.encoder.encode(g, x, rng.as_deref_mut())?;
        if let Some(r) = rng {
            h = g.dropout(h, self.dims.dropout, r)?;
        }
        let arg_features = self.arg_feature.forward(g, h)?;
        Ok(RefinerSentence { h, arg_features })
    }

    /// `gπ` for the predicate at 0-based `row`.
    pub fn predicate_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        s: &RefinerSentence,
        row: usize,
    ) -> Result<Var> {
        let hj = g.row(s.h, row)?;
        self.pred_feature.forward(g, hj)
    }

    fn role_decoder<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        match self.role_out {
            Some(id) => Ok(g.param(id)),
            None => {
                let w = g.param(self.role_in);
                g.slice_cols(w, 0, self.num_roles)
            }
        }
    }

    fn sense_decoder<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        match self.sense_out {
            Some(id) => Ok(g.param(id)),
            None => {
                let w = g.param(self.sense_in);
                g.slice_cols(w, 0, self.dims.sense)
            }
        }
    }

    pub fn refine_roles<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inp: &RefinerInputs,
        roles: Var,
        senses: Var,
    ) -> Result<RoleTrace> {
        let n = g.value(roles).rows();
        let relaxed = g.matmul(senses, inp.senses)?;
        let relaxed = g.broadcast_rows(relaxed, n)?;
        let pred = g.broadcast_rows(inp.pred_features, n)?;
        let others = match self.mode {
            RefineMode::Structured => Some(aggregate_other_roles(g, roles)?),
            RefineMode::SelfRefine => None,
        };
        let input = match others {
            Some(o) => g.concat_cols(&[roles, o, inp.arg_features, pred, relaxed])?,
            None => g.concat_cols(&[roles, inp.arg_features, pred, relaxed])?,
        };
        let w_in = g.param(self.role_in);
        let pre = g.matmul_t(input, w_in)?;
        let hidden = g.sigmoid(pre);
        let w_out = self.role_decoder(g)?;
        let logits = g.matmul(hidden, w_out)?;
        let scores = g.add(logits, inp.role_logits)?;
        let output = g.softmax(scores);
        Ok(RoleTrace {
            others,
            input,
            logits,
            scores,
            output,
        })
    }

    pub fn refine_senses<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inp: &RefinerInputs,
        roles: Var,
        senses: Var,
    ) -> Result<SenseTrace> {
        let relaxed = g.matmul(senses, inp.senses)?;
        let mass = match self.mode {
            RefineMode::Structured => Some(role_mass(g, roles)?),
            RefineMode::SelfRefine => None,
        };
        let input = match mass {
            Some(m) => g.concat_cols(&[relaxed, m, inp.pred_features])?,
            None => g.concat_cols(&[relaxed, inp.pred_features])?,
        };
        let w_in = g.param(self.sense_in);
        let pre = g.matmul_t(input, w_in)?;
        let hidden = g.sigmoid(pre);
        let w_out = self.sense_decoder(g)?;
        let projected = g.matmul(hidden, w_out)?;
        let logits = g.matmul_t(projected, inp.senses)?;
        let scores = g.add(logits, inp.sense_logits)?;
        let output = g.softmax(scores);
        Ok(SenseTrace {
            role_mass: mass,
            input,
            logits,
            scores,
            output,
        })
    }

    /// One refinement step from state `t` to `t + 1`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inp: &RefinerInputs,
        roles: Var,
        senses: Var,
    ) -> Result<StepTrace> {
        Ok(StepTrace {
            roles: self.refine_roles(g, inp, roles, senses)?,
            senses: self.refine_senses(g, inp, roles, senses)?,
        })
    }

    /// Traces of steps `1..=iterations`.
    pub fn unroll<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inp: &RefinerInputs,
        mut roles: Var,
        mut senses: Var,
        iterations: usize,
    ) -> Result<Vec<StepTrace>> {
        let mut steps = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let s = self.step(g, inp, roles, senses)?;
            roles = s.roles.output;
            senses = s.senses.output;
            steps.push(s);
        }
        Ok(steps)
    }

    /// States `0..=iterations`, starting from `(roles, senses)`. The same
    /// parameters are used at every step.
    pub fn iterate<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        inp: &RefinerInputs,
        roles: Var,
        senses: Var,
        iterations: usize,
    ) -> Result<Vec<(Var, Var)>> {
        let steps = self.unroll(g, inp, roles, senses, iterations)?;
        let mut states = vec![(roles, senses)];
        states.extend(steps.iter().map(|s| (s.roles.output, s.senses.output)));
        Ok(states)
    }

    /// The role decoder as used in the forward pass, as an `r × d_r` matrix.
    pub fn role_decoder_view(&self, store: &ParamStore<f32>) -> Tensor<f32> {
        match self.role_out {
            Some(id) => store.get(id).transpose(),
            None => column_block(store.get(self.role_in), self.num_roles).transpose(),
        }
    }

    /// `W_αᵀ[:r]`.
    pub fn role_encoder_view(&self, store: &ParamStore<f32>) -> Tensor<f32> {
        column_block(store.get(self.role_in), self.num_roles).transpose()
    }

    /// The sense decoder as used in the forward pass, `d_π × d_r`.
    pub fn sense_decoder_view(&self, store: &ParamStore<f32>) -> Tensor<f32> {
        match self.sense_out {
            Some(id) => store.get(id).transpose(),
            None => column_block(store.get(self.sense_in), self.dims.sense).transpose(),
        }
    }

    /// `W_πᵀ[:d_π]`.
    pub fn sense_encoder_view(&self, store: &ParamStore<f32>) -> Tensor<f32> {
        column_block(store.get(self.sense_in), self.dims.sense).transpose()
    }
}

/// The first `k` columns of `w`.
fn column_block<T: Scalar>(w: &Tensor<T>, k: usize) -> Tensor<T> {
    Tensor::from_fn(w.rows(), k, |r, c| w.get(r, c))
}
