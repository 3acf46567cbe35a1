//! Unified multimodal sequence and the shared transformer encoder.
//!
//! Row layout is fixed: `[Z^A; R tokens; S tokens; I tokens; T tokens]`
//! followed by a learnable positional table over all `n + 1` rows. Absent
//! modalities keep their rows and are either masked out of attention or
//! filled (zeros, a learned per-kind token, or a synthesized vector).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowTerm, Var};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::modality::ModalityKind;
use crate::params::{glorot, uniform, Component, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::token_mapper::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
    pub dropout: f64,
    /// Dimension of the final identity embedding.
    pub final_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { depth: 2, heads: 4, embed_dim: 64, mlp_ratio: 2.0, dropout: 0.0, final_dim: 64 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::HeadDivisibility { dim: self.embed_dim, heads: self.heads });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        if self.mlp_ratio <= 0.0 || self.final_dim == 0 {
            return Err(Error::InvalidConfig("mlp_ratio and final_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn mlp_dim(&self) -> usize {
        ((self.embed_dim as f64 * self.mlp_ratio) as usize).max(1)
    }
}

/// How an absent modality's rows are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Zero rows excluded from attention and pooling.
    Mask,
    /// Zero rows that take part in attention.
    Zero,
    /// A learned per-kind token broadcast over the segment.
    LearnedToken,
    /// A synthesized pooled vector broadcast over the segment.
    Synthesized,
}

impl core::str::FromStr for FillPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mask" => Ok(FillPolicy::Mask),
            "zero" => Ok(FillPolicy::Zero),
            "learned_token" => Ok(FillPolicy::LearnedToken),
            "synthesized" | "synth" => Ok(FillPolicy::Synthesized),
            other => Err(Error::UnknownPolicy(other.into())),
        }
    }
}

/// Row spans of the unified sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub image_tokens: usize,
    pub text_len: usize,
}

impl SequenceLayout {
    /// `n`, the number of modality rows (excluding the aggregate token).
    pub fn modality_rows(&self) -> usize {
        3 * self.image_tokens + self.text_len
    }

    /// `n + 1`.
    pub fn total_rows(&self) -> usize {
        self.modality_rows() + 1
    }

    /// `(start, len)` of a modality segment.
    pub fn span(&self, kind: ModalityKind) -> (usize, usize) {
        let k = self.image_tokens;
        match kind {
            ModalityKind::T => (1 + 3 * k, self.text_len),
            img => (1 + img.index() * k, k),
        }
    }
}

/// Source of one segment of a sample being assembled in a graph.
#[derive(Debug, Clone)]
pub enum Segment {
    /// Rows `first_row..first_row + valid.len()` of `source` (flattened rows).
    Tokens { source: Var, first_row: usize, valid: Vec<bool> },
    /// A pooled `D` vector (row `row` of `source`) broadcast over the segment.
    Broadcast { source: Var, row: usize },
    Absent(FillPolicy),
}

/// An assembled batch `[B, n + 1, D]` with its row mask.
pub struct AssembledBatch {
    pub sequence: Var,
    /// `B * (n + 1)` flags; false rows are excluded from attention.
    pub row_mask: Vec<bool>,
    /// Per sample, per kind: whether the segment contributes a pooled vector.
    pub pooled_kinds: Vec<[bool; 4]>,
}

/// Pooled readout of an encoded batch.
pub struct PooledBatch {
    /// `[B, D]`
    pub aggregate: Var,
    /// `[P, D]` rows for every (sample, kind) with `index[b][kind] = Some(row)`.
    pub per_modality: Var,
    pub index: Vec<[Option<usize>; 4]>,
}

impl PooledBatch {
    pub fn slot(&self, sample: usize, kind: ModalityKind) -> Option<(Var, usize)> {
        self.index[sample][kind.index()].map(|r| (self.per_modality, r))
    }
}

/// Value-level unified sequence of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    /// `(n + 1) x D`, positional table already added.
    pub rows: Tensor,
    pub segment_spans: [(usize, usize); 4],
    pub attention_mask: Vec<bool>,
}

/// Value-level pooled embeddings of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbeddings {
    pub aggregate: Vec<f64>,
    pub per_modality: [Option<Vec<f64>>; 4],
    /// Unit-norm identity embedding.
    pub final_embedding: Vec<f64>,
}

impl PooledEmbeddings {
    pub fn get(&self, kind: ModalityKind) -> Option<&[f64]> {
        self.per_modality[kind.index()].as_deref()
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Sequence assembly, transformer blocks and the final projection.
#[derive(Debug, Clone)]
pub struct UnifiedEncoder {
    pub aggregate_token: ParamId,
    pub positional: ParamId,
    /// `[4, D]`, one learned fill token per kind.
    pub fill_tokens: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    blocks: Vec<Block>,
    cfg: EncoderConfig,
    layout: SequenceLayout,
}

impl UnifiedEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, layout: SequenceLayout, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let h = cfg.mlp_dim();
        let c = Component::Encoder;
        let aggregate_token = store.add("encoder.aggregate_token", c, uniform(rng, &[d], 0.5));
        let positional = store.add("encoder.positional", c, uniform(rng, &[layout.total_rows(), d], 0.1));
        let fill_tokens = store.add("encoder.fill_tokens", c, uniform(rng, &[4, d], 0.5));
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let n = |s: &str| format!("encoder.block{i}.{s}");
            blocks.push(Block {
                ln1_g: store.add(&n("ln1.gamma"), c, Tensor::full(&[d], 1.0)),
                ln1_b: store.add(&n("ln1.beta"), c, Tensor::zeros(&[d])),
                wq: store.add(&n("attn.wq"), c, glorot(rng, d, d, &[d, d])),
                bq: store.add(&n("attn.bq"), c, Tensor::zeros(&[d])),
                wk: store.add(&n("attn.wk"), c, glorot(rng, d, d, &[d, d])),
                bk: store.add(&n("attn.bk"), c, Tensor::zeros(&[d])),
                wv: store.add(&n("attn.wv"), c, glorot(rng, d, d, &[d, d])),
                bv: store.add(&n("attn.bv"), c, Tensor::zeros(&[d])),
                wo: store.add(&n("attn.wo"), c, glorot(rng, d, d, &[d, d])),
                bo: store.add(&n("attn.bo"), c, Tensor::zeros(&[d])),
                ln2_g: store.add(&n("ln2.gamma"), c, Tensor::full(&[d], 1.0)),
                ln2_b: store.add(&n("ln2.beta"), c, Tensor::zeros(&[d])),
                w1: store.add(&n("mlp.w1"), c, glorot(rng, d, h, &[d, h])),
                b1: store.add(&n("mlp.b1"), c, Tensor::zeros(&[h])),
                w2: store.add(&n("mlp.w2"), c, glorot(rng, h, d, &[h, d])),
                b2: store.add(&n("mlp.b2"), c, Tensor::zeros(&[d])),
            });
        }
        let proj_w = store.add("readout.weight", c, glorot(rng, d, cfg.final_dim, &[d, cfg.final_dim]));
        let proj_b = store.add("readout.bias", c, Tensor::zeros(&[cfg.final_dim]));
        UnifiedEncoder { aggregate_token, positional, fill_tokens, proj_w, proj_b, blocks, cfg: cfg.clone(), layout }
    }

    pub fn layout(&self) -> SequenceLayout {
        self.layout
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Builds `[B, n + 1, D]` from per-sample segments (indexed by kind).
    pub fn assemble(&self, g: &mut Graph, store: &ParamStore, samples: &[[Segment; 4]]) -> Result<AssembledBatch> {
        let d = self.cfg.embed_dim;
        let rows = self.layout.total_rows();
        let agg = g.param(store, self.aggregate_token);
        let fill = g.param(store, self.fill_tokens);
        let mut inputs: Vec<Var> = vec![agg, fill];
        let input_of = |v: Var, inputs: &mut Vec<Var>| -> usize {
            match inputs.iter().position(|&x| x == v) {
                Some(i) => i,
                None => {
                    inputs.push(v);
                    inputs.len() - 1
                }
            }
        };
        let mut terms: Vec<Vec<RowTerm>> = Vec::with_capacity(samples.len() * rows);
        let mut row_mask = Vec::with_capacity(samples.len() * rows);
        let mut pooled_kinds = Vec::with_capacity(samples.len());
        for segs in samples {
            terms.push(vec![RowTerm::copy(0, 0)]);
            row_mask.push(true);
            let mut kinds = [false; 4];
            for kind in ModalityKind::ALL {
                let (_, len) = self.layout.span(kind);
                match &segs[kind.index()] {
                    Segment::Tokens { source, first_row, valid } => {
                        let sv = g.value(*source);
                        if sv.cols() != d {
                            return Err(Error::DimMismatch { expected: d, got: sv.cols() });
                        }
                        if valid.len() != len {
                            return Err(Error::ShapeMismatch(format!(
                                "{kind} segment has {} rows, layout expects {len}",
                                valid.len()
                            )));
                        }
                        let inp = input_of(*source, &mut inputs);
                        for (r, &ok) in valid.iter().enumerate() {
                            terms.push(vec![RowTerm::copy(inp, first_row + r)]);
                            row_mask.push(ok);
                        }
                        kinds[kind.index()] = true;
                    }
                    Segment::Broadcast { source, row } => {
                        let sv = g.value(*source);
                        if sv.cols() != d {
                            return Err(Error::DimMismatch { expected: d, got: sv.cols() });
                        }
                        let inp = input_of(*source, &mut inputs);
                        for _ in 0..len {
                            terms.push(vec![RowTerm::copy(inp, *row)]);
                            row_mask.push(true);
                        }
                        kinds[kind.index()] = true;
                    }
                    Segment::Absent(policy) => {
                        for _ in 0..len {
                            match policy {
                                FillPolicy::Mask | FillPolicy::Zero => terms.push(Vec::new()),
                                FillPolicy::LearnedToken => terms.push(vec![RowTerm::copy(1, kind.index())]),
                                FillPolicy::Synthesized => {
                                    return Err(Error::UnknownPolicy(
                                        "synthesized fill needs a Broadcast segment with the synthesized vector".into(),
                                    ))
                                }
                            }
                            row_mask.push(*policy != FillPolicy::Mask);
                        }
                        kinds[kind.index()] = *policy != FillPolicy::Mask;
                    }
                }
            }
            pooled_kinds.push(kinds);
        }
        let seq = g.row_combine(&inputs, terms, &[samples.len(), rows, d]);
        let pos = g.param(store, self.positional);
        let sequence = g.add_bias(seq, pos);
        Ok(AssembledBatch { sequence, row_mask, pooled_kinds })
    }

    /// Runs the transformer blocks over `[B, L, D]`. Rows with a false mask
    /// receive zero attention weight from every row.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        row_mask: &[bool],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<Var> {
        self.cfg.validate()?;
        let s = g.value(x).shape().to_vec();
        let (bn, l) = (s[0], s[1]);
        assert_eq!(row_mask.len(), bn * l);
        let mut attn_mask = Vec::with_capacity(bn * l * l);
        for b in 0..bn {
            for _ in 0..l {
                attn_mask.extend_from_slice(&row_mask[b * l..(b + 1) * l]);
            }
        }
        let mut rng = rng;
        let mut h = x;
        for blk in &self.blocks {
            let (g1, b1) = (g.param(store, blk.ln1_g), g.param(store, blk.ln1_b));
            let n1 = g.layer_norm(h, g1, b1);
            let q = self.lin(g, store, n1, blk.wq, blk.bq);
            let k = self.lin(g, store, n1, blk.wk, blk.bk);
            let v = self.lin(g, store, n1, blk.wv, blk.bv);
            let a = g.attention(q, k, v, self.cfg.heads, attn_mask.clone());
            let a = self.lin(g, store, a, blk.wo, blk.bo);
            let a = self.dropout(g, a, mode, rng.as_deref_mut());
            h = g.add(h, a);
            let (g2, b2) = (g.param(store, blk.ln2_g), g.param(store, blk.ln2_b));
            let n2 = g.layer_norm(h, g2, b2);
            let m = self.lin(g, store, n2, blk.w1, blk.b1);
            let m = g.gelu(m);
            let m = self.lin(g, store, m, blk.w2, blk.b2);
            let m = self.dropout(g, m, mode, rng.as_deref_mut());
            h = g.add(h, m);
        }
        Ok(h)
    }

    fn lin(&self, g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, b)
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: Mode, rng: Option<&mut Rng>) -> Var {
        let p = self.cfg.dropout;
        match (mode, rng) {
            (Mode::Train, Some(r)) if p > 0.0 => {
                let shape = g.value(x).shape().to_vec();
                let n: usize = shape.iter().product();
                let keep = 1.0 / (1.0 - p);
                let mask = (0..n).map(|_| if r.gen::<f64>() < p { 0.0 } else { keep }).collect();
                let m = g.constant(Tensor::from_vec(&shape, mask));
                g.mul(x, m)
            }
            _ => x,
        }
    }

    /// Aggregate row and mean over valid rows of every contributing segment.
    pub fn pool(&self, g: &mut Graph, encoded: Var, assembled: &AssembledBatch) -> Result<PooledBatch> {
        let s = g.value(encoded).shape().to_vec();
        let (bn, l, d) = (s[0], s[1], s[2]);
        let agg_terms = (0..bn).map(|b| vec![RowTerm::copy(0, b * l)]).collect();
        let aggregate = g.row_combine(&[encoded], agg_terms, &[bn, d]);
        let mut terms = Vec::new();
        let mut index = Vec::with_capacity(bn);
        for b in 0..bn {
            let mut idx = [None; 4];
            for kind in ModalityKind::ALL {
                if !assembled.pooled_kinds[b][kind.index()] {
                    continue;
                }
                let (start, len) = self.layout.span(kind);
                let rows: Vec<usize> =
                    (start..start + len).filter(|&r| assembled.row_mask[b * l + r]).map(|r| b * l + r).collect();
                if rows.is_empty() {
                    return Err(Error::EmptySegment(kind));
                }
                let w = 1.0 / rows.len() as f64;
                idx[kind.index()] = Some(terms.len());
                terms.push(rows.into_iter().map(|r| RowTerm::weighted(0, r, w)).collect());
            }
            index.push(idx);
        }
        let p = terms.len().max(1);
        if terms.is_empty() {
            terms.push(Vec::new());
        }
        let per_modality = g.row_combine(&[encoded], terms, &[p, d]);
        Ok(PooledBatch { aggregate, per_modality, index })
    }

    /// `normalize(x W + b)` row-wise, `[B, D] -> [B, d]`.
    pub fn readout(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let y = self.lin(g, store, x, self.proj_w, self.proj_b);
        g.l2_normalize(y)
    }

    /// Value-level assembly of one sample. `synthesized` supplies the
    /// vectors for kinds filled with [`FillPolicy::Synthesized`].
    pub fn assemble_sequence(
        &self,
        store: &ParamStore,
        segments: &[Option<&TokenSequence>; 4],
        fill: FillPolicy,
        synthesized: &[Option<Vec<f64>>; 4],
    ) -> Result<UnifiedSequence> {
        let mut g = Graph::new();
        let d = self.cfg.embed_dim;
        let mut segs: Vec<Segment> = Vec::with_capacity(4);
        for kind in ModalityKind::ALL {
            let seg = match segments[kind.index()] {
                Some(ts) => {
                    if ts.tokens.cols() != d {
                        return Err(Error::DimMismatch { expected: d, got: ts.tokens.cols() });
                    }
                    let source = g.constant(ts.tokens.clone());
                    Segment::Tokens { source, first_row: 0, valid: ts.valid_mask.clone() }
                }
                None if fill == FillPolicy::Synthesized => {
                    let v = synthesized[kind.index()].as_ref().ok_or(Error::NoSourceModality(kind))?;
                    if v.len() != d {
                        return Err(Error::DimMismatch { expected: d, got: v.len() });
                    }
                    let source = g.constant(Tensor::from_vec(&[1, d], v.clone()));
                    Segment::Broadcast { source, row: 0 }
                }
                None => Segment::Absent(fill),
            };
            segs.push(seg);
        }
        let segs: [Segment; 4] = segs.try_into().map_err(|_| Error::EmptyInput)?;
        let batch = self.assemble(&mut g, store, &[segs])?;
        let rows = g.value(batch.sequence).clone();
        let n1 = self.layout.total_rows();
        Ok(UnifiedSequence {
            rows: rows.reshape(&[n1, d]),
            segment_spans: ModalityKind::ALL.map(|k| self.layout.span(k)),
            attention_mask: batch.row_mask,
        })
    }

    /// Value-level encoder pass over one unified sequence (eval mode).
    pub fn encode_sequence(&self, store: &ParamStore, seq: &UnifiedSequence) -> Result<Tensor> {
        let mut g = Graph::new();
        let (l, d) = (seq.rows.shape()[0], seq.rows.shape()[1]);
        let x = g.constant(seq.rows.clone().reshape(&[1, l, d]));
        let y = self.encode(&mut g, store, x, &seq.attention_mask, Mode::Eval, None)?;
        Ok(g.value(y).clone().reshape(&[l, d]))
    }

    /// Pools an encoded sequence and reads out the aggregate-only embedding.
    /// `contributing[kind]` marks segments that yield a pooled vector.
    pub fn pool_and_readout(
        &self,
        store: &ParamStore,
        encoded: &Tensor,
        seq: &UnifiedSequence,
        contributing: [bool; 4],
    ) -> Result<PooledEmbeddings> {
        let mut g = Graph::new();
        let (l, d) = (encoded.shape()[0], encoded.shape()[1]);
        let x = g.constant(encoded.clone().reshape(&[1, l, d]));
        let assembled = AssembledBatch {
            sequence: x,
            row_mask: seq.attention_mask.clone(),
            pooled_kinds: vec![contributing],
        };
        let pooled = self.pool(&mut g, x, &assembled)?;
        let fin = self.readout(&mut g, store, pooled.aggregate);
        let per_modality = ModalityKind::ALL.map(|k| {
            pooled.index[0][k.index()].map(|r| g.value(pooled.per_modality).row(r).to_vec())
        });
        Ok(PooledEmbeddings {
            aggregate: g.value(pooled.aggregate).row(0).to_vec(),
            per_modality,
            final_embedding: g.value(fin).row(0).to_vec(),
        })
    }
}
