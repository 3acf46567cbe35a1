//! Cross-modal cue interaction and gated fusion over pooled embeddings.
//!
//! Slots are `[aggregate, R, S, I, T]`. Each interaction round is one
//! multi-head attention pass where a modality slot attends over the
//! aggregate and the other present modalities, with a residual. Fusion adds
//! gated interacted cues to the aggregate:
//! `s = agg + sum_k g_k * z_k`, `g_k = sigmoid(W2 gelu(agg Wa + z_k Wc + bh) + b2)`,
//! and the encoder readout turns `s` into the final embedding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowTerm, Var};
use crate::encoder::{PooledEmbeddings, UnifiedEncoder};
use crate::error::{Error, Result};
use crate::modality::ModalityKind;
use crate::params::{glorot, Component, ParamId, ParamStore};
use crate::rng::Rng;
use crate::synthesis::SynthesisGenerator;
use crate::tensor::Tensor;

const SLOTS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub heads: usize,
    /// Hidden width of the gate MLP; 0 means the token dimension.
    pub gate_hidden: usize,
    pub enabled: bool,
    pub rounds: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { heads: 2, gate_hidden: 0, enabled: true, rounds: 1 }
    }
}

impl FusionConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.heads == 0 || !dim.is_multiple_of(self.heads) {
            return Err(Error::HeadDivisibility { dim, heads: self.heads });
        }
        Ok(())
    }

    pub fn hidden(&self, dim: usize) -> usize {
        if self.gate_hidden == 0 {
            dim
        } else {
            self.gate_hidden
        }
    }
}

#[derive(Debug, Clone)]
struct Round {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

/// Graph outputs of [`CueFusion::fuse_batch`].
pub struct FusedBatch {
    /// `[B, D]` pre-readout fused representation.
    pub fused: Var,
    /// `[B * 4, D]` interacted slot values, row `b * 4 + kind`.
    pub interacted: Var,
    /// `[B * 4, D]` gates, same layout; absent when gates are forced off.
    pub gates: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct CueFusion {
    rounds: Vec<Round>,
    gate_wa: ParamId,
    gate_wc: ParamId,
    gate_bh: ParamId,
    gate_w2: ParamId,
    gate_b2: ParamId,
    cfg: FusionConfig,
    dim: usize,
    gates_off: bool,
}

impl CueFusion {
    pub fn new(store: &mut ParamStore, cfg: &FusionConfig, dim: usize, rng: &mut Rng) -> Self {
        let c = Component::Fusion;
        let h = cfg.hidden(dim);
        let rounds = (0..cfg.rounds)
            .map(|i| {
                let n = |s: &str| format!("fusion.round{i}.{s}");
                Round {
                    wq: store.add(&n("wq"), c, glorot(rng, dim, dim, &[dim, dim])),
                    bq: store.add(&n("bq"), c, Tensor::zeros(&[dim])),
                    wk: store.add(&n("wk"), c, glorot(rng, dim, dim, &[dim, dim])),
                    bk: store.add(&n("bk"), c, Tensor::zeros(&[dim])),
                    wv: store.add(&n("wv"), c, glorot(rng, dim, dim, &[dim, dim])),
                    bv: store.add(&n("bv"), c, Tensor::zeros(&[dim])),
                    wo: store.add(&n("wo"), c, glorot(rng, dim, dim, &[dim, dim])),
                    bo: store.add(&n("bo"), c, Tensor::zeros(&[dim])),
                }
            })
            .collect();
        CueFusion {
            rounds,
            gate_wa: store.add("fusion.gate.wa", c, glorot(rng, dim, h, &[dim, h])),
            gate_wc: store.add("fusion.gate.wc", c, glorot(rng, dim, h, &[dim, h])),
            gate_bh: store.add("fusion.gate.bh", c, Tensor::zeros(&[h])),
            gate_w2: store.add("fusion.gate.w2", c, glorot(rng, h, dim, &[h, dim])),
            gate_b2: store.add("fusion.gate.b2", c, Tensor::zeros(&[dim])),
            cfg: cfg.clone(),
            dim,
            gates_off: false,
        }
    }

    pub fn config(&self) -> &FusionConfig {
        &self.cfg
    }

    /// Test hook: forces every gate to zero.
    #[doc(hidden)]
    pub fn force_gates_off(&mut self, off: bool) {
        self.gates_off = off;
    }

    fn lin(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
        let (w, b) = (g.param(store, w), g.param(store, b));
        g.linear(x, w, b)
    }

    /// Interaction rounds over `[B, 5, D]` slots. `present[b][kind]` marks
    /// modality slots that take part.
    pub fn interact_batch(&self, g: &mut Graph, store: &ParamStore, slots: Var, present: &[[bool; 4]]) -> Result<Var> {
        self.cfg.validate(self.dim)?;
        let bn = present.len();
        let mut mask = Vec::with_capacity(bn * SLOTS * SLOTS);
        for p in present {
            if !p.iter().any(|&x| x) {
                return Err(Error::EmptyInput);
            }
            for i in 0..SLOTS {
                for j in 0..SLOTS {
                    let key_present = j == 0 || p[j - 1];
                    mask.push(key_present && (j == 0 || i != j));
                }
            }
        }
        let mut x = slots;
        for r in &self.rounds {
            let q = Self::lin(g, store, x, r.wq, r.bq);
            let k = Self::lin(g, store, x, r.wk, r.bk);
            let v = Self::lin(g, store, x, r.wv, r.bv);
            let a = g.attention(q, k, v, self.cfg.heads, mask.clone());
            let a = Self::lin(g, store, a, r.wo, r.bo);
            x = g.add(x, a);
        }
        Ok(x)
    }

    /// Interaction plus gated fusion. `slots[b][kind]` names the row holding
    /// that modality's pooled vector, if it takes part.
    pub fn fuse_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        aggregate: Var,
        slots: &[[Option<(Var, usize)>; 4]],
    ) -> Result<FusedBatch> {
        let d = self.dim;
        let bn = slots.len();
        let mut inputs = vec![aggregate];
        let mut terms = Vec::with_capacity(bn * SLOTS);
        let mut present = Vec::with_capacity(bn);
        for (b, s) in slots.iter().enumerate() {
            terms.push(vec![RowTerm::copy(0, b)]);
            let mut p = [false; 4];
            for kind in ModalityKind::ALL {
                match s[kind.index()] {
                    Some((var, row)) => {
                        let i = match inputs.iter().position(|&v| v == var) {
                            Some(i) => i,
                            None => {
                                inputs.push(var);
                                inputs.len() - 1
                            }
                        };
                        terms.push(vec![RowTerm::copy(i, row)]);
                        p[kind.index()] = true;
                    }
                    None => terms.push(Vec::new()),
                }
            }
            present.push(p);
        }
        let x = g.row_combine(&inputs, terms, &[bn, SLOTS, d]);
        let inter = self.interact_batch(g, store, x, &present)?;
        let gather = (0..bn)
            .flat_map(|b| (1..SLOTS).map(move |k| vec![RowTerm::copy(0, b * SLOTS + k)]))
            .collect();
        let interacted = g.row_combine(&[inter], gather, &[bn * 4, d]);
        if self.gates_off {
            return Ok(FusedBatch { fused: aggregate, interacted, gates: None });
        }
        let agg_rows = (0..bn).flat_map(|b| (0..4).map(move |_| vec![RowTerm::copy(0, b)])).collect();
        let agg4 = g.row_combine(&[aggregate], agg_rows, &[bn * 4, d]);
        let wa = g.param(store, self.gate_wa);
        let wc = g.param(store, self.gate_wc);
        let h1 = g.matmul(agg4, wa);
        let h2 = g.matmul(interacted, wc);
        let h = g.add(h1, h2);
        let bh = g.param(store, self.gate_bh);
        let h = g.add_bias(h, bh);
        let h = g.gelu(h);
        let logits = Self::lin(g, store, h, self.gate_w2, self.gate_b2);
        let gates = g.sigmoid(logits);
        let prod = g.mul(gates, interacted);
        let sum_terms = present
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let mut t = vec![RowTerm::copy(0, b)];
                t.extend((0..4).filter(|&k| p[k]).map(|k| RowTerm::copy(1, b * 4 + k)));
                t
            })
            .collect();
        let fused = g.row_combine(&[aggregate, prod], sum_terms, &[bn, d]);
        Ok(FusedBatch { fused, interacted, gates: Some(gates) })
    }

    fn single(
        &self,
        store: &ParamStore,
        aggregate: &[f64],
        inputs: &[(ModalityKind, &[f64])],
    ) -> Result<(Graph, FusedBatch, [bool; 4])> {
        let d = self.dim;
        if inputs.is_empty() {
            return Err(Error::EmptyInput);
        }
        let mut g = Graph::new();
        let agg = g.constant(Tensor::from_vec(&[1, d], aggregate.to_vec()));
        let mut rows = Vec::new();
        let mut slot: [Option<(Var, usize)>; 4] = [None; 4];
        let mut present = [false; 4];
        let mut sorted: Vec<&(ModalityKind, &[f64])> = inputs.iter().collect();
        sorted.sort_by_key(|(k, _)| *k);
        for (kind, v) in &sorted {
            if v.len() != d {
                return Err(Error::DimMismatch { expected: d, got: v.len() });
            }
            if present[kind.index()] {
                return Err(Error::InvalidConfig(format!("modality {kind} given twice")));
            }
            present[kind.index()] = true;
            rows.extend_from_slice(v);
        }
        let src = g.constant(Tensor::from_vec(&[sorted.len(), d], rows));
        for (i, (kind, _)) in sorted.iter().enumerate() {
            slot[kind.index()] = Some((src, i));
        }
        let out = self.fuse_batch(&mut g, store, agg, &[slot])?;
        Ok((g, out, present))
    }

    /// Interacted vector for each given modality.
    pub fn interact(
        &self,
        store: &ParamStore,
        aggregate: &[f64],
        inputs: &[(ModalityKind, &[f64])],
    ) -> Result<[Option<Vec<f64>>; 4]> {
        let (g, out, present) = self.single(store, aggregate, inputs)?;
        let v = g.value(out.interacted);
        Ok(core::array::from_fn(|k| present[k].then(|| v.row(k).to_vec())))
    }

    /// Gate vectors for each given modality (all ones when fusion is skipped).
    pub fn gates(
        &self,
        store: &ParamStore,
        aggregate: &[f64],
        inputs: &[(ModalityKind, &[f64])],
    ) -> Result<[Option<Vec<f64>>; 4]> {
        let (g, out, present) = self.single(store, aggregate, inputs)?;
        let Some(gates) = out.gates else { return Ok([None, None, None, None]) };
        let v = g.value(gates);
        Ok(core::array::from_fn(|k| present[k].then(|| v.row(k).to_vec())))
    }

    /// `normalize(project(agg + sum_k g_k * z_k))` over the given cues,
    /// interacting them first.
    pub fn fuse(
        &self,
        store: &ParamStore,
        encoder: &UnifiedEncoder,
        aggregate: &[f64],
        inputs: &[(ModalityKind, &[f64])],
    ) -> Result<Vec<f64>> {
        let (mut g, out, _) = self.single(store, aggregate, inputs)?;
        let f = encoder.readout(&mut g, store, out.fused);
        Ok(g.value(f).row(0).to_vec())
    }

    /// Gallery-side path for a cross-modal protocol: synthesize the query
    /// kinds from the gallery's RGB pooled vector and fuse them with it.
    pub fn gallery_side_fuse(
        &self,
        store: &ParamStore,
        encoder: &UnifiedEncoder,
        synthesis: &SynthesisGenerator,
        rgb_pooled: &PooledEmbeddings,
        query_kinds: &[ModalityKind],
    ) -> Result<Vec<f64>> {
        let rgb = rgb_pooled.get(ModalityKind::R).ok_or(Error::MissingRGB)?;
        let mut inputs: Vec<(ModalityKind, Vec<f64>)> = vec![(ModalityKind::R, rgb.to_vec())];
        for &k in query_kinds {
            if k == ModalityKind::R {
                continue;
            }
            inputs.push((k, synthesis.synthesize(store, rgb_pooled, k)?));
        }
        let refs: Vec<(ModalityKind, &[f64])> = inputs.iter().map(|(k, v)| (*k, v.as_slice())).collect();
        self.fuse(store, encoder, &rgb_pooled.aggregate, &refs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{EncoderConfig, SequenceLayout};
    use crate::math;
    use crate::rng;

    const D: usize = 8;

    fn setup() -> (ParamStore, CueFusion, UnifiedEncoder) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(21, &[]);
        let enc_cfg = EncoderConfig { depth: 0, heads: 2, embed_dim: D, final_dim: 5, ..EncoderConfig::default() };
        let enc = UnifiedEncoder::new(&mut store, &enc_cfg, SequenceLayout { image_tokens: 1, text_len: 1 }, &mut r);
        let fusion = CueFusion::new(&mut store, &FusionConfig::default(), D, &mut r);
        (store, fusion, enc)
    }

    fn vecs() -> (Vec<f64>, Vec<Vec<f64>>) {
        let agg = (0..D).map(|i| libm::cos(i as f64)).collect();
        let m = (0..4).map(|k| (0..D).map(|i| libm::sin((i * 3 + k) as f64 * 0.9)).collect()).collect();
        (agg, m)
    }

    #[test]
    fn interact_ignores_insertion_order() {
        let (store, f, _) = setup();
        let (agg, m) = vecs();
        let a = [(ModalityKind::R, &m[0][..]), (ModalityKind::I, &m[2][..]), (ModalityKind::T, &m[3][..])];
        let b = [a[2], a[0], a[1]];
        assert_eq!(f.interact(&store, &agg, &a).unwrap(), f.interact(&store, &agg, &b).unwrap());
        let out = f.interact(&store, &agg, &a).unwrap();
        assert!(out[1].is_none() && out[0].is_some());
    }

    #[test]
    fn single_modality_attends_only_the_aggregate() {
        let (store, f, _) = setup();
        let (agg, m) = vecs();
        let out = f.interact(&store, &agg, &[(ModalityKind::S, &m[1])]).unwrap();
        // attention over a single key returns its value projection
        let r = &f.rounds[0];
        let mut v = store.get(r.bv).data().to_vec();
        math::matmul_acc(&agg, store.get(r.wv).data(), &mut v, 1, D, D);
        let mut o = store.get(r.bo).data().to_vec();
        math::matmul_acc(&v, store.get(r.wo).data(), &mut o, 1, D, D);
        let expected: Vec<f64> = m[1].iter().zip(&o).map(|(a, b)| a + b).collect();
        let got = out[1].as_ref().unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gates_are_open_interval_and_output_unit_norm() {
        let (store, f, enc) = setup();
        let (agg, m) = vecs();
        let inputs: Vec<(ModalityKind, &[f64])> = ModalityKind::ALL.iter().map(|&k| (k, &m[k.index()][..])).collect();
        for gv in f.gates(&store, &agg, &inputs).unwrap().iter().flatten() {
            assert!(gv.iter().all(|&x| x > 0.0 && x < 1.0));
        }
        let out = f.fuse(&store, &enc, &agg, &inputs).unwrap();
        assert!((math::norm(&out) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gates_off_reduces_to_aggregate_readout() {
        let (store, mut f, enc) = setup();
        let (agg, m) = vecs();
        f.force_gates_off(true);
        let out = f.fuse(&store, &enc, &agg, &[(ModalityKind::R, &m[0][..])]).unwrap();
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec(&[1, D], agg.clone()));
        let r = enc.readout(&mut g, &store, a);
        assert_eq!(out, g.value(r).row(0).to_vec());
    }

    #[test]
    fn gradient_reaches_every_present_cue() {
        let (store, f, enc) = setup();
        let (agg, m) = vecs();
        let mut g = Graph::new();
        let a = g.variable(Tensor::from_vec(&[1, D], agg));
        let rows: Vec<f64> = [0, 2, 3].iter().flat_map(|&k| m[k].clone()).collect();
        let src = g.variable(Tensor::from_vec(&[3, D], rows));
        let slots = [[Some((src, 0)), None, Some((src, 1)), Some((src, 2))]];
        let out = f.fuse_batch(&mut g, &store, a, &slots).unwrap();
        let fin = enc.readout(&mut g, &store, out.fused);
        let w = g.constant(Tensor::from_vec(&[1, 5], vec![0.3, -1.0, 0.7, 0.2, 0.5]));
        let p = g.mul(fin, w);
        let loss = g.sum(p);
        let grads = g.backward(loss);
        let gs = grads.wrt(src).unwrap();
        for r in 0..3 {
            assert!(gs.row(r).iter().any(|&x| x != 0.0));
        }
    }

    #[test]
    fn gallery_fuse_requires_rgb() {
        let (mut store, f, enc) = setup();
        let syn = SynthesisGenerator::new(&mut store, D, &mut rng::stream(1, &[]));
        let (agg, m) = vecs();
        let pooled = PooledEmbeddings {
            aggregate: agg,
            per_modality: [None, Some(m[1].clone()), None, None],
            final_embedding: vec![],
        };
        assert_eq!(
            f.gallery_side_fuse(&store, &enc, &syn, &pooled, &[ModalityKind::I]),
            Err(Error::MissingRGB)
        );
    }
}
