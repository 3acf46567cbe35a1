//! The assembled pipeline: tokenizers, unified encoder, synthesis and fusion
//! over one parameter store.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::datamodel::{MultiModalTuple, Sample};
use crate::encoder::{
    AssembledBatch, EncoderConfig, FillPolicy, PooledBatch, PooledEmbeddings, Segment, SequenceLayout, UnifiedEncoder,
};
use crate::error::{Error, Result};
use crate::fusion::{CueFusion, FusionConfig};
use crate::modality::{ModalityKind, ModalitySet};
use crate::params::ParamStore;
use crate::rng::{self, label, Rng};
use crate::synthesis::SynthesisGenerator;
use crate::tensor::Tensor;
use crate::token_mapper::{images_to_tensor, ImageTokenizer, TextEmbedder, TokenizerConfig, TokenizerOutput};

/// Batch size used when embedding without gradients.
pub const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        if self.tokenizer.embed_dim != self.encoder.embed_dim {
            return Err(Error::DimMismatch { expected: self.encoder.embed_dim, got: self.tokenizer.embed_dim });
        }
        self.fusion.validate(self.encoder.embed_dim)
    }

    pub fn layout(&self) -> SequenceLayout {
        SequenceLayout { image_tokens: self.tokenizer.image_tokens(), text_len: self.tokenizer.text_len }
    }
}

/// Per-kind fill policy for absent modalities.
pub type FillPlan = [FillPolicy; 4];

pub const MASK_ALL: FillPlan = [FillPolicy::Mask; 4];

/// The modalities of one sample that enter a forward pass.
pub type BatchItem<'a> = [Option<&'a Sample>; 4];

/// Picks the samples of `kinds` out of a tuple.
pub fn select<'a>(tuple: &'a MultiModalTuple, kinds: ModalitySet) -> BatchItem<'a> {
    core::array::from_fn(|k| if kinds.contains(ModalityKind::ALL[k]) { tuple.sample(ModalityKind::ALL[k]) } else { None })
}

/// Graph outputs of [`UmmModel::forward`].
pub struct BatchForward {
    /// Pooled vectors of the final encoder pass.
    pub pooled: PooledBatch,
    /// Pooled vectors of the masked pass that fed synthesis, when fill
    /// required it; otherwise `None` and `pooled` is already masked.
    pub masked_pooled: Option<PooledBatch>,
    /// `[B, d]` unit-norm embeddings.
    pub final_embedding: Var,
    pub tokenizer_outputs: Vec<(usize, TokenizerOutput)>,
}

impl BatchForward {
    /// Pooled vectors from real modalities only.
    pub fn real_pooled(&self) -> &PooledBatch {
        self.masked_pooled.as_ref().unwrap_or(&self.pooled)
    }
}

#[derive(Debug, Clone)]
pub struct UmmModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    /// One shared tokenizer, or one per image kind in R, S, I order.
    pub image_tokenizers: Vec<ImageTokenizer>,
    pub text: TextEmbedder,
    pub encoder: UnifiedEncoder,
    pub synthesis: SynthesisGenerator,
    pub fusion: CueFusion,
}

impl UmmModel {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[label::INIT]);
        let tk = &config.tokenizer;
        let image_tokenizers = if tk.shared_image_tokenizer {
            vec![ImageTokenizer::new(&mut store, "tokenizer.image", tk, &mut r)]
        } else {
            [ModalityKind::R, ModalityKind::S, ModalityKind::I]
                .iter()
                .map(|k| ImageTokenizer::new(&mut store, &format!("tokenizer.{}", k.letter()), tk, &mut r))
                .collect()
        };
        let text = TextEmbedder::new(&mut store, tk, &mut r);
        let encoder = UnifiedEncoder::new(&mut store, &config.encoder, config.layout(), &mut r);
        let d = config.encoder.embed_dim;
        let synthesis = SynthesisGenerator::new(&mut store, d, &mut r);
        let fusion = CueFusion::new(&mut store, &config.fusion, d, &mut r);
        // parameters live on the f32 grid of the checkpoint format from the start
        store.quantize_to_f32();
        Ok(UmmModel { config: config.clone(), store, image_tokenizers, text, encoder, synthesis, fusion })
    }

    /// Rebuilds a model and overwrites every named tensor from `params`.
    pub fn from_params<'a>(config: &ModelConfig, params: impl IntoIterator<Item = (&'a str, Tensor)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        let mut seen = vec![false; m.store.len()];
        for (name, t) in params {
            let id = m.store.find(name).ok_or_else(|| Error::InvalidConfig(format!("unknown parameter {name}")))?;
            if m.store.get(id).shape() != t.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    m.store.get(id).shape(),
                    t.shape()
                )));
            }
            *m.store.get_mut(id) = t;
            seen[id.index()] = true;
        }
        if let Some(i) = seen.iter().position(|&s| !s) {
            return Err(Error::InvalidConfig(format!("missing parameter {}", m.store.entries()[i].name)));
        }
        Ok(m)
    }

    pub fn embed_dim(&self) -> usize {
        self.config.encoder.embed_dim
    }

    pub fn final_dim(&self) -> usize {
        self.config.encoder.final_dim
    }

    fn tokenizer_index(&self, kind: ModalityKind) -> usize {
        if self.image_tokenizers.len() == 1 {
            0
        } else {
            kind.index()
        }
    }

    /// Tokenizes every present sample into encoder segments.
    fn tokenize(
        &self,
        g: &mut Graph,
        items: &[BatchItem<'_>],
        mode: Mode,
    ) -> Result<(Vec<[Option<Segment>; 4]>, Vec<(usize, TokenizerOutput)>)> {
        let mut segs: Vec<[Option<Segment>; 4]> = items.iter().map(|_| [None, None, None, None]).collect();
        let k = self.config.tokenizer.image_tokens();
        let mut outputs = Vec::new();
        for t in 0..self.image_tokenizers.len() {
            let mut images = Vec::new();
            let mut owners = Vec::new();
            for (b, item) in items.iter().enumerate() {
                for kind in [ModalityKind::R, ModalityKind::S, ModalityKind::I] {
                    if self.tokenizer_index(kind) != t {
                        continue;
                    }
                    match item[kind.index()] {
                        Some(Sample::Image(img)) => {
                            images.push(img);
                            owners.push((b, kind));
                        }
                        Some(Sample::Text(_)) => {
                            return Err(Error::ShapeMismatch(format!("text sample in the {kind} slot")))
                        }
                        None => {}
                    }
                }
            }
            if images.is_empty() {
                continue;
            }
            let x = g.constant(images_to_tensor(&images)?);
            let out = self.image_tokenizers[t].forward(g, &self.store, x, mode)?;
            for (n, (b, kind)) in owners.into_iter().enumerate() {
                segs[b][kind.index()] = Some(Segment::Tokens { source: out.tokens, first_row: n * k, valid: vec![true; k] });
            }
            outputs.push((t, out));
        }
        let mut texts = Vec::new();
        let mut owners = Vec::new();
        for (b, item) in items.iter().enumerate() {
            match item[ModalityKind::T.index()] {
                Some(Sample::Text(t)) => {
                    texts.push(t);
                    owners.push(b);
                }
                Some(Sample::Image(_)) => return Err(Error::ShapeMismatch("image sample in the T slot".into())),
                None => {}
            }
        }
        if !texts.is_empty() {
            let l = self.config.tokenizer.text_len;
            let v = self.text.forward(g, &self.store, &texts)?;
            for (n, b) in owners.into_iter().enumerate() {
                let valid = texts[n].valid_len();
                segs[b][ModalityKind::T.index()] = Some(Segment::Tokens {
                    source: v,
                    first_row: n * l,
                    valid: (0..l).map(|p| p < valid).collect(),
                });
            }
        }
        Ok((segs, outputs))
    }

    fn encode_pool(
        &self,
        g: &mut Graph,
        segments: &[[Segment; 4]],
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> Result<PooledBatch> {
        let assembled: AssembledBatch = self.encoder.assemble(g, &self.store, segments)?;
        let encoded = self.encoder.encode(g, &self.store, assembled.sequence, &assembled.row_mask, mode, rng)?;
        self.encoder.pool(g, encoded, &assembled)
    }

    /// Full batch forward. Absent kinds are filled per `fill`; synthesized
    /// fill runs a masked pass first and broadcasts the (detached) pseudo
    /// vectors over the absent segments of a second pass. `extra_cues`
    /// are synthesized from the real pooled vectors and join fusion only.
    pub fn forward(
        &self,
        g: &mut Graph,
        items: &[BatchItem<'_>],
        fill: FillPlan,
        extra_cues: &[ModalityKind],
        mode: Mode,
        mut rng: Option<&mut Rng>,
    ) -> Result<BatchForward> {
        if items.is_empty() {
            return Err(Error::EmptyInput);
        }
        for item in items {
            if item.iter().all(Option::is_none) {
                return Err(Error::EmptyInput);
            }
        }
        let (tokens, tokenizer_outputs) = self.tokenize(g, items, mode)?;
        let masked: Vec<[Segment; 4]> = tokens
            .iter()
            .map(|s| core::array::from_fn(|k| s[k].clone().unwrap_or(Segment::Absent(FillPolicy::Mask))))
            .collect();
        let mut requests = Vec::new();
        for (b, s) in tokens.iter().enumerate() {
            for kind in ModalityKind::ALL {
                if s[kind.index()].is_none() && fill[kind.index()] == FillPolicy::Synthesized {
                    requests.push((b, kind));
                }
            }
        }
        let (pooled, masked_pooled) = if requests.is_empty() {
            let filled: Vec<[Segment; 4]> = tokens
                .iter()
                .map(|s| core::array::from_fn(|k| s[k].clone().unwrap_or(Segment::Absent(fill[k]))))
                .collect();
            (self.encode_pool(g, &filled, mode, rng.as_deref_mut())?, None)
        } else {
            let first = self.encode_pool(g, &masked, mode, rng.as_deref_mut())?;
            let synth = self.synthesis.synthesize_batch(g, &self.store, &first, &requests)?;
            let synth = g.detach(synth);
            let filled: Vec<[Segment; 4]> = tokens
                .iter()
                .enumerate()
                .map(|(b, s)| {
                    core::array::from_fn(|k| match &s[k] {
                        Some(seg) => seg.clone(),
                        None => match requests.iter().position(|&(rb, rk)| rb == b && rk.index() == k) {
                            Some(row) => Segment::Broadcast { source: synth, row },
                            None => Segment::Absent(fill[k]),
                        },
                    })
                })
                .collect();
            (self.encode_pool(g, &filled, mode, rng)?, Some(first))
        };
        let final_embedding = self.fuse_and_readout(g, &pooled, masked_pooled.as_ref(), extra_cues)?;
        Ok(BatchForward { pooled, masked_pooled, final_embedding, tokenizer_outputs })
    }

    fn fuse_and_readout(
        &self,
        g: &mut Graph,
        pooled: &PooledBatch,
        masked: Option<&PooledBatch>,
        extra_cues: &[ModalityKind],
    ) -> Result<Var> {
        if !self.config.fusion.enabled {
            return Ok(self.encoder.readout(g, &self.store, pooled.aggregate));
        }
        let bn = pooled.index.len();
        let mut slots: Vec<[Option<(Var, usize)>; 4]> = (0..bn)
            .map(|b| core::array::from_fn(|k| pooled.index[b][k].map(|r| (pooled.per_modality, r))))
            .collect();
        let real = masked.unwrap_or(pooled);
        let mut requests = Vec::new();
        for b in 0..bn {
            for &kind in extra_cues {
                if slots[b][kind.index()].is_none() {
                    requests.push((b, kind));
                }
            }
        }
        if !requests.is_empty() {
            let synth = self.synthesis.synthesize_batch(g, &self.store, real, &requests)?;
            for (row, &(b, kind)) in requests.iter().enumerate() {
                slots[b][kind.index()] = Some((synth, row));
            }
        }
        let fused = self.fusion.fuse_batch(g, &self.store, pooled.aggregate, &slots)?;
        Ok(self.encoder.readout(g, &self.store, fused.fused))
    }

    /// Eval-mode embeddings with masked fill, in chunks of [`EVAL_CHUNK`].
    pub fn embed_batch(&self, items: &[BatchItem<'_>], extra_cues: &[ModalityKind]) -> Result<Vec<PooledEmbeddings>> {
        let mut out = Vec::with_capacity(items.len());
        for chunk in items.chunks(EVAL_CHUNK) {
            let mut g = Graph::new();
            let f = self.forward(&mut g, chunk, MASK_ALL, extra_cues, Mode::Eval, None)?;
            let fin = g.value(f.final_embedding);
            let agg = g.value(f.pooled.aggregate);
            let per = g.value(f.pooled.per_modality);
            for b in 0..chunk.len() {
                out.push(PooledEmbeddings {
                    aggregate: agg.row(b).to_vec(),
                    per_modality: core::array::from_fn(|k| f.pooled.index[b][k].map(|r| per.row(r).to_vec())),
                    final_embedding: fin.row(b).to_vec(),
                });
            }
        }
        Ok(out)
    }

    /// Eval-mode embedding of the chosen real modalities of one tuple.
    pub fn embed_tuple(&self, tuple: &MultiModalTuple, kinds: ModalitySet) -> Result<PooledEmbeddings> {
        let item = select(tuple, kinds);
        Ok(self.embed_batch(&[item], &[])?.remove(0))
    }

    /// Folds a train-mode pass's batch statistics into the running buffers.
    pub fn update_running_stats(&mut self, g: &Graph, outputs: &[(usize, TokenizerOutput)]) {
        for (t, out) in outputs {
            self.image_tokenizers[*t].update_running_stats(g, out, &mut self.store);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_corpus, CorpusSpec};
    use crate::math;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.tokenizer.embed_dim = 16;
        c.encoder.embed_dim = 16;
        c.encoder.heads = 2;
        c.encoder.depth = 1;
        c.encoder.final_dim = 8;
        c
    }

    fn corpus() -> crate::datamodel::Corpus {
        generate_corpus(&CorpusSpec { num_identities: 3, views_per_identity: 2, ..CorpusSpec::default() }).unwrap()
    }

    #[test]
    fn embeddings_are_unit_norm_for_every_subset() {
        let m = UmmModel::new(&tiny(), 1).unwrap();
        let c = corpus();
        for bits in 1..16u8 {
            let kinds = ModalitySet::from_bits(bits);
            let e = m.embed_tuple(&c.tuples[0], kinds).unwrap();
            assert!((math::norm(&e.final_embedding) - 1.0).abs() < 1e-6);
            for k in ModalityKind::ALL {
                assert_eq!(e.get(k).is_some(), kinds.contains(k));
            }
        }
    }

    #[test]
    fn batched_and_single_agree() {
        let m = UmmModel::new(&tiny(), 1).unwrap();
        let c = corpus();
        let items: Vec<BatchItem> = c.tuples.iter().map(|t| select(t, ModalitySet::FULL)).collect();
        let batch = m.embed_batch(&items, &[]).unwrap();
        for (t, e) in c.tuples.iter().zip(&batch) {
            let single = m.embed_tuple(t, ModalitySet::FULL).unwrap();
            for (a, b) in single.final_embedding.iter().zip(&e.final_embedding) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_disabled_uses_the_aggregate_readout() {
        let mut cfg = tiny();
        cfg.fusion.enabled = false;
        let m = UmmModel::new(&cfg, 4).unwrap();
        let c = corpus();
        let e = m.embed_tuple(&c.tuples[1], ModalitySet::FULL).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, 16], e.aggregate.clone()));
        let r = m.encoder.readout(&mut g, &m.store, a);
        assert_eq!(g.value(r).row(0), &e.final_embedding[..]);
    }

    #[test]
    fn synthesized_fill_runs_two_passes() {
        let m = UmmModel::new(&tiny(), 2).unwrap();
        let c = corpus();
        let items: Vec<BatchItem> = c.tuples.iter().map(|t| select(t, ModalitySet::single(ModalityKind::R))).collect();
        let mut fill = MASK_ALL;
        fill[ModalityKind::I.index()] = FillPolicy::Synthesized;
        let mut g = Graph::new();
        let f = m.forward(&mut g, &items, fill, &[], Mode::Train, None).unwrap();
        assert!(f.masked_pooled.is_some());
        assert!(f.pooled.index.iter().all(|i| i[2].is_some() && i[1].is_none()));
        assert!(f.real_pooled().index.iter().all(|i| i[2].is_none()));
    }

    #[test]
    fn from_params_round_trips() {
        let m = UmmModel::new(&tiny(), 3).unwrap();
        let params = m.store.entries().iter().map(|e| (e.name.as_str(), e.tensor.clone()));
        let n = UmmModel::from_params(&tiny(), params).unwrap();
        assert_eq!(m.store, n.store);
    }
}
