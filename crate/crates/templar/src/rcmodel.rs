//! Observation-action value network.
//!
//! The observation is treated as a reading-comprehension context and the
//! template verb phrase as the query. A shared LayerNorm+BiGRU encoder block
//! processes both; bidirectional attention between them plus residual
//! self-attention yields a verb-contextualized observation sequence; two
//! placeholder-specific BiGRUs embed each candidate object (by the head
//! indices of its mentions) and a linear head maps the concatenated argument
//! vectors to a scalar value.
//!
//! Scoring a batch of candidate object pairs for one template reuses the
//! verb-contextualized sequence, so the per-action cost is one pooling and
//! one dot product.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actions::{ObjId, Template, TemplateAction};
use crate::autodiff::{GruWeights, ParamId, Tape, Tensor, Var};
use crate::checkpoint::{self, CheckpointError};
use crate::text::{EmbeddingTable, ObservationDoc, Vocab};

pub mod gradsuite;

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RcError {
    #[error("empty document")]
    EmptyDoc,
    #[error("empty sequence")]
    EmptySequence,
    #[error("object {0:?} has no span in the document")]
    UnknownObject(ObjId),
}

/// Model dimensions and ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub repr_dim: usize,
    pub use_self_attention: bool,
    pub use_arg_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 100,
            repr_dim: 128,
            use_self_attention: true,
            use_arg_embeddings: true,
        }
    }
}

impl ModelConfig {
    /// BiGRU hidden size per direction; two directions make up `repr_dim`.
    pub fn hidden(&self) -> usize {
        assert_eq!(self.repr_dim % 2, 0, "repr_dim must be even");
        self.repr_dim / 2
    }

    pub fn toy(embed_dim: usize, repr_dim: usize) -> Self {
        ModelConfig {
            embed_dim,
            repr_dim,
            ..Default::default()
        }
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct BiGruParams {
    pub fwd: GruWeights,
    pub bwd: GruWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub ln_gain: Tensor,
    pub ln_bias: Tensor,
    pub gru: BiGruParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// context logit vector (d x 1)
    pub w1: Tensor,
    /// query logit vector (d x 1)
    pub w2: Tensor,
    /// elementwise-interaction logit vector (1 x d)
    pub w3: Tensor,
    /// projection of [o, c, o*c, q*c] (4d x d)
    pub w4: Tensor,
    pub b4: Tensor,
    /// encoder block applied after the projection
    pub enc: EncoderParams,
}

/// Every learnable tensor of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct RcModelParams {
    pub config: ModelConfig,
    pub enc_shared: EncoderParams,
    pub bidaf: AttentionParams,
    pub self_att: AttentionParams,
    pub arg0: BiGruParams,
    pub arg1: BiGruParams,
    /// value head over [h_arg0, h_arg1] (2d x 1)
    pub w5: Tensor,
    pub b5: Tensor,
}

fn init_gru(input: usize, hidden: usize, rng: &mut impl Rng) -> GruWeights {
    GruWeights {
        w: Tensor::uniform(input, 3 * hidden, 1.0 / (input as f64).sqrt(), rng),
        u: Tensor::uniform(hidden, 3 * hidden, 1.0 / (hidden as f64).sqrt(), rng),
        b: Tensor::zeros(1, 3 * hidden),
    }
}

fn init_bigru(input: usize, hidden: usize, rng: &mut impl Rng) -> BiGruParams {
    BiGruParams {
        fwd: init_gru(input, hidden, rng),
        bwd: init_gru(input, hidden, rng),
    }
}

fn init_encoder(input: usize, hidden: usize, rng: &mut impl Rng) -> EncoderParams {
    EncoderParams {
        ln_gain: Tensor::from_vec(1, input, vec![1.0; input]),
        ln_bias: Tensor::zeros(1, input),
        gru: init_bigru(input, hidden, rng),
    }
}

fn init_attention(d: usize, hidden: usize, rng: &mut impl Rng) -> AttentionParams {
    let bound = 1.0 / (d as f64).sqrt();
    AttentionParams {
        w1: Tensor::uniform(d, 1, bound, rng),
        w2: Tensor::uniform(d, 1, bound, rng),
        w3: Tensor::uniform(1, d, bound, rng),
        w4: Tensor::uniform(4 * d, d, 1.0 / (4.0 * d as f64).sqrt(), rng),
        b4: Tensor::zeros(1, d),
        enc: init_encoder(d, hidden, rng),
    }
}

impl RcModelParams {
    /// Fresh parameters: matrices uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)),
    /// biases zero, layer-norm gain one.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = config.repr_dim;
        let h = config.hidden();
        RcModelParams {
            config,
            enc_shared: init_encoder(config.embed_dim, h, &mut rng),
            bidaf: init_attention(d, h, &mut rng),
            self_att: init_attention(d, h, &mut rng),
            arg0: init_bigru(d, h, &mut rng),
            arg1: init_bigru(d, h, &mut rng),
            w5: Tensor::uniform(2 * d, 1, 1.0 / (2.0 * d as f64).sqrt(), &mut rng),
            b5: Tensor::zeros(1, 1),
        }
    }

    /// Named tensors in registry order. The order defines parameter ids and
    /// the checkpoint layout; [`RcModelParams::tensors_mut`] must match it.
    pub fn entries(&self) -> Vec<(&'static str, Tensor)> {
        let names = Self::names();
        let mut params = self.clone();
        names
            .iter()
            .zip(params.tensors_mut())
            .map(|(&n, t)| (n, t.clone()))
            .collect()
    }

    pub fn names() -> [&'static str; 48] {
        [
            "enc_shared.ln_gain",
            "enc_shared.ln_bias",
            "enc_shared.gru.fwd.w",
            "enc_shared.gru.fwd.u",
            "enc_shared.gru.fwd.b",
            "enc_shared.gru.bwd.w",
            "enc_shared.gru.bwd.u",
            "enc_shared.gru.bwd.b",
            "bidaf.w1",
            "bidaf.w2",
            "bidaf.w3",
            "bidaf.w4",
            "bidaf.b4",
            "bidaf.enc.ln_gain",
            "bidaf.enc.ln_bias",
            "bidaf.enc.gru.fwd.w",
            "bidaf.enc.gru.fwd.u",
            "bidaf.enc.gru.fwd.b",
            "bidaf.enc.gru.bwd.w",
            "bidaf.enc.gru.bwd.u",
            "bidaf.enc.gru.bwd.b",
            "self_att.w1",
            "self_att.w2",
            "self_att.w3",
            "self_att.w4",
            "self_att.b4",
            "self_att.enc.ln_gain",
            "self_att.enc.ln_bias",
            "self_att.enc.gru.fwd.w",
            "self_att.enc.gru.fwd.u",
            "self_att.enc.gru.fwd.b",
            "self_att.enc.gru.bwd.w",
            "self_att.enc.gru.bwd.u",
            "self_att.enc.gru.bwd.b",
            "arg0.fwd.w",
            "arg0.fwd.u",
            "arg0.fwd.b",
            "arg0.bwd.w",
            "arg0.bwd.u",
            "arg0.bwd.b",
            "arg1.fwd.w",
            "arg1.fwd.u",
            "arg1.fwd.b",
            "arg1.bwd.w",
            "arg1.bwd.u",
            "arg1.bwd.b",
            "w5",
            "b5",
        ]
    }

    /// Mutable references in registry order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        fn gru(g: &mut GruWeights) -> [&mut Tensor; 3] {
            [&mut g.w, &mut g.u, &mut g.b]
        }
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(48);
        {
            let e = &mut self.enc_shared;
            out.push(&mut e.ln_gain);
            out.push(&mut e.ln_bias);
            out.extend(gru(&mut e.gru.fwd));
            out.extend(gru(&mut e.gru.bwd));
        }
        for a in [&mut self.bidaf, &mut self.self_att] {
            out.push(&mut a.w1);
            out.push(&mut a.w2);
            out.push(&mut a.w3);
            out.push(&mut a.w4);
            out.push(&mut a.b4);
            out.push(&mut a.enc.ln_gain);
            out.push(&mut a.enc.ln_bias);
            out.extend(gru(&mut a.enc.gru.fwd));
            out.extend(gru(&mut a.enc.gru.bwd));
        }
        for g in [&mut self.arg0, &mut self.arg1] {
            out.extend(gru(&mut g.fwd));
            out.extend(gru(&mut g.bwd));
        }
        out.push(&mut self.w5);
        out.push(&mut self.b5);
        out
    }

    pub fn param_count(&self) -> usize {
        Self::names().len()
    }

    /// Rebuild a parameter struct from tensors in registry order.
    pub fn from_tensor_list(config: ModelConfig, tensors: &[Tensor]) -> Self {
        let mut p = RcModelParams::init(config, 0);
        let slots = p.tensors_mut();
        assert_eq!(slots.len(), tensors.len(), "registry size mismatch");
        for (slot, t) in slots.into_iter().zip(tensors) {
            assert_eq!(slot.shape(), t.shape(), "tensor shape mismatch");
            *slot = t.clone();
        }
        p
    }

    /// Total scalar count, for reporting.
    pub fn scalar_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let named: Vec<(String, Tensor)> = self
            .entries()
            .into_iter()
            .map(|(n, t)| (n.to_string(), t))
            .collect();
        checkpoint::save(path, &named)
    }

    /// Load from a checkpoint, validating names and shapes against `config`.
    pub fn load(path: &Path, config: ModelConfig) -> Result<Self, CheckpointError> {
        let loaded = checkpoint::load(path)?;
        let mut params = RcModelParams::init(config, 0);
        let names = Self::names();
        if loaded.len() != names.len() {
            return Err(CheckpointError::ManifestMismatch(format!(
                "expected {} parameters, checkpoint has {}",
                names.len(),
                loaded.len()
            )));
        }
        for ((slot, &exp_name), (name, tensor)) in params
            .tensors_mut()
            .into_iter()
            .zip(names.iter())
            .zip(loaded.iter())
        {
            if exp_name != name {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "parameter {name} out of order (expected {exp_name})"
                )));
            }
            if slot.shape() != tensor.shape() {
                return Err(CheckpointError::ManifestMismatch(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor.clone();
        }
        Ok(params)
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

#[derive(Clone, Copy)]
pub struct GruVars {
    pub w: Var,
    pub u: Var,
    pub b: Var,
}

#[derive(Clone, Copy)]
pub struct BiGruVars {
    pub fwd: GruVars,
    pub bwd: GruVars,
}

#[derive(Clone, Copy)]
pub struct EncoderVars {
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub gru: BiGruVars,
}

#[derive(Clone, Copy)]
pub struct AttentionVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub w4: Var,
    pub b4: Var,
    pub enc: EncoderVars,
}

/// All parameters bound onto one tape.
#[derive(Clone, Copy)]
pub struct ModelVars {
    pub enc_shared: EncoderVars,
    pub bidaf: AttentionVars,
    pub self_att: AttentionVars,
    pub arg0: BiGruVars,
    pub arg1: BiGruVars,
    pub w5: Var,
    pub b5: Var,
}

impl RcModelParams {
    /// Bind every tensor onto `tape`, assigning parameter ids in registry
    /// order (the order of [`RcModelParams::names`]).
    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        struct Binder {
            next: usize,
        }
        impl Binder {
            fn one(&mut self, tape: &mut Tape, t: &Tensor) -> Var {
                let v = tape.param(ParamId(self.next), t);
                self.next += 1;
                v
            }
            fn gru(&mut self, tape: &mut Tape, g: &GruWeights) -> GruVars {
                GruVars {
                    w: self.one(tape, &g.w),
                    u: self.one(tape, &g.u),
                    b: self.one(tape, &g.b),
                }
            }
            fn bigru(&mut self, tape: &mut Tape, g: &BiGruParams) -> BiGruVars {
                BiGruVars {
                    fwd: self.gru(tape, &g.fwd),
                    bwd: self.gru(tape, &g.bwd),
                }
            }
            fn encoder(&mut self, tape: &mut Tape, e: &EncoderParams) -> EncoderVars {
                EncoderVars {
                    ln_gain: self.one(tape, &e.ln_gain),
                    ln_bias: self.one(tape, &e.ln_bias),
                    gru: self.bigru(tape, &e.gru),
                }
            }
            fn attention(&mut self, tape: &mut Tape, a: &AttentionParams) -> AttentionVars {
                AttentionVars {
                    w1: self.one(tape, &a.w1),
                    w2: self.one(tape, &a.w2),
                    w3: self.one(tape, &a.w3),
                    w4: self.one(tape, &a.w4),
                    b4: self.one(tape, &a.b4),
                    enc: self.encoder(tape, &a.enc),
                }
            }
        }
        let mut b = Binder { next: 0 };
        let vars = ModelVars {
            enc_shared: b.encoder(tape, &self.enc_shared),
            bidaf: b.attention(tape, &self.bidaf),
            self_att: b.attention(tape, &self.self_att),
            arg0: b.bigru(tape, &self.arg0),
            arg1: b.bigru(tape, &self.arg1),
            w5: b.one(tape, &self.w5),
            b5: b.one(tape, &self.b5),
        };
        debug_assert_eq!(b.next, Self::names().len());
        vars
    }
}

pub fn bigru(tape: &mut Tape, g: &BiGruVars, x: Var) -> Var {
    let f = tape.gru_seq(x, g.fwd.w, g.fwd.u, g.fwd.b, false);
    let b = tape.gru_seq(x, g.bwd.w, g.bwd.u, g.bwd.b, true);
    tape.concat_cols(&[f, b])
}

/// LayerNorm followed by a BiGRU.
pub fn encoder_block(tape: &mut Tape, e: &EncoderVars, x: Var) -> Var {
    let ln = tape.layer_norm(x, e.ln_gain, e.ln_bias);
    bigru(tape, &e.gru, ln)
}

/// The attention chain through the projection and leaky ReLU, before the
/// post-projection encoder block.
pub fn bidaf_core(tape: &mut Tape, a: &AttentionVars, ctx: Var, query: Var) -> Var {
    let s1 = tape.matmul(ctx, a.w1); // n x 1
    let s2 = tape.matmul(query, a.w2); // m x 1
    let s2t = tape.transpose(s2); // 1 x m
    let cw = tape.mul_row(ctx, a.w3); // rows scaled by w3
    let qt = tape.transpose(query); // d x m
    let a0 = tape.matmul(cw, qt); // n x m interaction term
    let a1 = tape.add_row(a0, s2t);
    let logits = tape.add_col(a1, s1); // a_ij
    let p = tape.softmax_rows(logits); // attention over query words
    let c = tape.matmul(p, query); // n x d
    let mx = tape.row_max(logits); // n x 1
    let pi = tape.softmax_cols(mx); // attention over context words
    let pit = tape.transpose(pi); // 1 x n
    let q = tape.matmul(pit, ctx); // 1 x d
    let oc = tape.mul(ctx, c);
    let qc = tape.mul_row(c, q);
    let g = tape.concat_cols(&[ctx, c, oc, qc]); // n x 4d
    let proj = tape.matmul(g, a.w4);
    let proj = tape.add_row(proj, a.b4);
    tape.leaky_relu(proj, LEAKY_SLOPE)
}

/// Full attention block: core chain plus the post-projection encoder.
pub fn bidaf_block(tape: &mut Tape, a: &AttentionVars, ctx: Var, query: Var) -> Var {
    let x = bidaf_core(tape, a, ctx, query);
    encoder_block(tape, &a.enc, x)
}

/// Residual self-attention; identity when disabled.
pub fn self_attention(tape: &mut Tape, vars: &ModelVars, config: &ModelConfig, x: Var) -> Var {
    if !config.use_self_attention {
        return x;
    }
    let att = bidaf_block(tape, &vars.self_att, x, x);
    tape.add(x, att)
}

/// Encode the verb and contextualize an already-encoded observation with it.
pub fn contextualize(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    doc_enc: Var,
    verb_emb: Var,
) -> Var {
    let verb_enc = encoder_block(tape, &vars.enc_shared, verb_emb);
    let x = bidaf_block(tape, &vars.bidaf, doc_enc, verb_enc);
    self_attention(tape, vars, config, x)
}

/// Index sets (head positions) for the two arguments of each scored pair.
pub type PairIndices = (Vec<usize>, Vec<usize>);

/// Value per pair from a contextualized sequence: placeholder BiGRUs (or
/// identity under the ablation), head-index mean pooling, linear head.
pub fn q_pairs(
    tape: &mut Tape,
    vars: &ModelVars,
    config: &ModelConfig,
    ctx: Var,
    pairs: &[PairIndices],
) -> Var {
    assert!(!pairs.is_empty(), "q_pairs needs at least one pair");
    let (h0, h1) = if config.use_arg_embeddings {
        (bigru(tape, &vars.arg0, ctx), bigru(tape, &vars.arg1, ctx))
    } else {
        (ctx, ctx)
    };
    let rows0: Vec<Var> = pairs.iter().map(|(i0, _)| tape.mean_rows(h0, i0)).collect();
    let rows1: Vec<Var> = pairs.iter().map(|(_, i1)| tape.mean_rows(h1, i1)).collect();
    let m0 = tape.concat_rows(&rows0);
    let m1 = tape.concat_rows(&rows1);
    let f = tape.concat_cols(&[m0, m1]); // P x 2d
    let q = tape.matmul(f, vars.w5);
    tape.add_row(q, vars.b5) // P x 1
}

// ---------------------------------------------------------------------------
// Embedding helpers
// ---------------------------------------------------------------------------

/// Frozen embedding rows for a doc's tokens (constants on any tape).
pub fn embed_doc(doc: &ObservationDoc, embeds: &EmbeddingTable, vocab: &Vocab) -> Tensor {
    let d = embeds.dim();
    let mut data = Vec::with_capacity(doc.len() * d);
    for &tok in &doc.tokens {
        data.extend(embeds.lookup(vocab.token(tok)));
    }
    Tensor::from_vec(doc.len(), d, data)
}

/// Frozen embedding rows for a template's verb words (placeholders included).
pub fn embed_template(template: &Template, embeds: &EmbeddingTable) -> Tensor {
    let words = crate::text::tokenize(&template.verb);
    let d = embeds.dim();
    let mut data = Vec::with_capacity(words.len() * d);
    for w in &words {
        data.extend(embeds.lookup(w));
    }
    Tensor::from_vec(words.len(), d, data)
}

/// Head indices for one argument: the none anchor, or the object's spans.
pub fn arg_indices(doc: &ObservationDoc, arg: Option<ObjId>) -> Result<Vec<usize>, RcError> {
    match arg {
        None => Ok(vec![doc.none_anchor]),
        Some(id) => {
            let heads = doc.head_indices(id);
            if heads.is_empty() {
                Err(RcError::UnknownObject(id))
            } else {
                Ok(heads)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// High-level scoring
// ---------------------------------------------------------------------------

/// The value network: parameters plus convenience scoring entry points.
#[derive(Debug, Clone)]
pub struct RcModel {
    pub params: RcModelParams,
}

impl RcModel {
    pub fn new(params: RcModelParams) -> Self {
        RcModel { params }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.params.config
    }

    /// Shared-encoder representation of a doc (one row per token).
    pub fn encode_doc(
        &self,
        doc: &ObservationDoc,
        embeds: &EmbeddingTable,
        vocab: &Vocab,
    ) -> Result<Tensor, RcError> {
        if doc.is_empty() {
            return Err(RcError::EmptyDoc);
        }
        let mut tape = Tape::forward_only();
        let vars = self.params.bind(&mut tape);
        let emb = tape.constant(embed_doc(doc, embeds, vocab));
        let enc = encoder_block(&mut tape, &vars.enc_shared, emb);
        Ok(tape.value(enc).clone())
    }

    /// Shared-encoder representation of a verb phrase.
    pub fn encode_template(
        &self,
        template: &Template,
        embeds: &EmbeddingTable,
    ) -> Result<Tensor, RcError> {
        let emb = embed_template(template, embeds);
        if emb.rows() == 0 {
            return Err(RcError::EmptySequence);
        }
        let mut tape = Tape::forward_only();
        let vars = self.params.bind(&mut tape);
        let e = tape.constant(emb);
        let enc = encoder_block(&mut tape, &vars.enc_shared, e);
        Ok(tape.value(enc).clone())
    }

    /// Values for a batch of (arg0, arg1) candidates under one template.
    /// The verb-contextualized sequence is computed once and shared.
    pub fn q_values(
        &self,
        doc: &ObservationDoc,
        template: &Template,
        pairs: &[(Option<ObjId>, Option<ObjId>)],
        embeds: &EmbeddingTable,
        vocab: &Vocab,
    ) -> Result<Vec<f64>, RcError> {
        if doc.is_empty() {
            return Err(RcError::EmptyDoc);
        }
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let indices: Vec<PairIndices> = pairs
            .iter()
            .map(|(a0, a1)| Ok((arg_indices(doc, *a0)?, arg_indices(doc, *a1)?)))
            .collect::<Result<_, RcError>>()?;
        let mut tape = Tape::forward_only();
        let vars = self.params.bind(&mut tape);
        let demb = tape.constant(embed_doc(doc, embeds, vocab));
        let denc = encoder_block(&mut tape, &vars.enc_shared, demb);
        let vemb = tape.constant(embed_template(template, embeds));
        let ctx = contextualize(&mut tape, &vars, &self.params.config, denc, vemb);
        let q = q_pairs(&mut tape, &vars, &self.params.config, ctx, &indices);
        Ok(tape.value(q).data().to_vec())
    }

    /// Values for a set of actions over one doc, aligned with the input
    /// order. Actions are grouped by template; the doc encoding is computed
    /// once and shared across groups.
    pub fn q_all(
        &self,
        doc: &ObservationDoc,
        actions: &[TemplateAction],
        templates: &[Template],
        embeds: &EmbeddingTable,
        vocab: &Vocab,
    ) -> Result<Vec<f64>, RcError> {
        if doc.is_empty() {
            return Err(RcError::EmptyDoc);
        }
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        let denc = self.encode_doc(doc, embeds, vocab)?;

        // group by template, preserving first-appearance order
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, a) in actions.iter().enumerate() {
            match groups.iter_mut().find(|(t, _)| *t == a.template.0) {
                Some((_, idxs)) => idxs.push(i),
                None => groups.push((a.template.0, vec![i])),
            }
        }

        let score_group =
            |(tpl, idxs): &(usize, Vec<usize>)| -> Result<Vec<(usize, f64)>, RcError> {
                let indices: Vec<PairIndices> = idxs
                    .iter()
                    .map(|&i| {
                        let a = &actions[i];
                        Ok((arg_indices(doc, a.arg0)?, arg_indices(doc, a.arg1)?))
                    })
                    .collect::<Result<_, RcError>>()?;
                let mut tape = Tape::forward_only();
                let vars = self.params.bind(&mut tape);
                let denc_var = tape.constant(denc.clone());
                let vemb = tape.constant(embed_template(&templates[*tpl], embeds));
                let ctx = contextualize(&mut tape, &vars, &self.params.config, denc_var, vemb);
                let q = q_pairs(&mut tape, &vars, &self.params.config, ctx, &indices);
                Ok(idxs
                    .iter()
                    .zip(tape.value(q).data())
                    .map(|(&i, &v)| (i, v))
                    .collect())
            };

        let scored: Result<Vec<Vec<(usize, f64)>>, RcError> = if groups.len() > 1 {
            groups.par_iter().map(score_group).collect()
        } else {
            groups.iter().map(score_group).collect()
        };
        let mut out = vec![0.0; actions.len()];
        for (i, v) in scored?.into_iter().flatten() {
            out[i] = v;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
