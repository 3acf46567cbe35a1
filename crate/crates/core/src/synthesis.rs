//! Synthetic modality augmentation at the pooled-embedding level.
//!
//! For every target kind an affine generator maps the concatenation of the
//! other three pooled vectors (canonical order, absent ones zero) and their
//! three presence indicators, `3D + 3` inputs, to a `D` pseudo embedding.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, RowTerm, Var};
use crate::encoder::{FillPolicy, PooledBatch, PooledEmbeddings};
use crate::error::{Error, Result};
use crate::math;
use crate::modality::ModalityKind;
use crate::params::{uniform, Component, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Generator weights start at this fraction of Glorot scale.
pub const OUTPUT_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Clone)]
pub struct SynthesisGenerator {
    weights: [ParamId; 4],
    biases: [ParamId; 4],
    /// `[4, D]` learnable per-kind vectors for [`FillPolicy::LearnedToken`].
    pub fill_vectors: ParamId,
    dim: usize,
}

impl SynthesisGenerator {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut Rng) -> Self {
        let c = Component::Synthesis;
        let input = 3 * dim + 3;
        let mut weights = Vec::with_capacity(4);
        let mut biases = Vec::with_capacity(4);
        for kind in ModalityKind::ALL {
            let l = kind.letter();
            weights.push(store.add(&format!("synthesis.{l}.weight"), c, uniform(rng, &[input, dim], OUTPUT_INIT_SCALE * math::sqrt(6.0 / (input + dim) as f64))));
            biases.push(store.add(&format!("synthesis.{l}.bias"), c, Tensor::zeros(&[dim])));
        }
        let fill_vectors = store.add("synthesis.fill_vectors", c, uniform(rng, &[4, dim], 0.5));
        SynthesisGenerator {
            weights: weights.try_into().unwrap(),
            biases: biases.try_into().unwrap(),
            fill_vectors,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Pseudo embeddings for `(sample, target)` requests over a pooled batch.
    /// Returns `[requests, D]` in request order.
    pub fn synthesize_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: &PooledBatch,
        requests: &[(usize, ModalityKind)],
    ) -> Result<Var> {
        if requests.is_empty() {
            return Err(Error::EmptyInput);
        }
        let d = self.dim;
        let mut outputs: Vec<Var> = Vec::new();
        let mut placement = vec![(0usize, 0usize); requests.len()];
        for target in ModalityKind::ALL {
            let rows: Vec<usize> = (0..requests.len()).filter(|&i| requests[i].1 == target).collect();
            if rows.is_empty() {
                continue;
            }
            let mut parts = Vec::with_capacity(4);
            let mut flags = Vec::with_capacity(rows.len() * 3);
            let mut source_terms: [Vec<Vec<RowTerm>>; 3] = Default::default();
            for &i in &rows {
                let sample = requests[i].0;
                let mut any = false;
                for (s, src) in target.others().iter().enumerate() {
                    match pooled.index[sample][src.index()] {
                        Some(r) => {
                            source_terms[s].push(vec![RowTerm::copy(0, r)]);
                            flags.push(1.0);
                            any = true;
                        }
                        None => {
                            source_terms[s].push(Vec::new());
                            flags.push(0.0);
                        }
                    }
                }
                if !any {
                    return Err(Error::NoSourceModality(target));
                }
            }
            for terms in source_terms {
                parts.push(g.row_combine(&[pooled.per_modality], terms, &[rows.len(), d]));
            }
            parts.push(g.constant(Tensor::from_vec(&[rows.len(), 3], flags)));
            let x = g.concat_cols(&parts);
            let w = g.param(store, self.weights[target.index()]);
            let b = g.param(store, self.biases[target.index()]);
            let out = g.linear(x, w, b);
            for (j, &i) in rows.iter().enumerate() {
                placement[i] = (outputs.len(), j);
            }
            outputs.push(out);
        }
        let terms = placement.iter().map(|&(o, r)| vec![RowTerm::copy(o, r)]).collect();
        Ok(g.row_combine(&outputs, terms, &[requests.len(), d]))
    }

    /// Pseudo embedding of `target` from the other present pooled vectors.
    pub fn synthesize(&self, store: &ParamStore, pooled: &PooledEmbeddings, target: ModalityKind) -> Result<Vec<f64>> {
        let d = self.dim;
        let mut x = Vec::with_capacity(3 * d + 3);
        let mut flags = [0.0; 3];
        for (s, src) in target.others().iter().enumerate() {
            match pooled.get(*src) {
                Some(v) => {
                    if v.len() != d {
                        return Err(Error::DimMismatch { expected: d, got: v.len() });
                    }
                    x.extend_from_slice(v);
                    flags[s] = 1.0;
                }
                None => x.extend(std::iter::repeat_n(0.0, d)),
            }
        }
        if flags.iter().all(|&f| f == 0.0) {
            return Err(Error::NoSourceModality(target));
        }
        x.extend_from_slice(&flags);
        let w = store.get(self.weights[target.index()]);
        let mut out = store.get(self.biases[target.index()]).data().to_vec();
        math::matmul_acc(&x, w.data(), &mut out, 1, 3 * d + 3, d);
        Ok(out)
    }

    /// Completes the per-modality map. Present entries are returned as is.
    pub fn fill_missing(
        &self,
        store: &ParamStore,
        pooled: &PooledEmbeddings,
        policy: FillPolicy,
    ) -> Result<[Vec<f64>; 4]> {
        let d = self.dim;
        let mut out: [Vec<f64>; 4] = Default::default();
        for kind in ModalityKind::ALL {
            out[kind.index()] = match (pooled.get(kind), policy) {
                (Some(v), _) => v.to_vec(),
                (None, FillPolicy::Zero) => vec![0.0; d],
                (None, FillPolicy::LearnedToken) => store.get(self.fill_vectors).row(kind.index()).to_vec(),
                (None, FillPolicy::Synthesized) => self.synthesize(store, pooled, kind)?,
                (None, FillPolicy::Mask) => {
                    return Err(Error::UnknownPolicy("mask leaves absent modalities unfilled".into()))
                }
            };
        }
        Ok(out)
    }
}

/// `1 - cos(pseudo, real)`, in `[0, 2]`.
pub fn synthesis_loss(pseudo: &[f64], real: &[f64]) -> Result<f64> {
    if pseudo.len() != real.len() {
        return Err(Error::DimMismatch { expected: real.len(), got: pseudo.len() });
    }
    let c = math::cosine(pseudo, real).ok_or(Error::ZeroVector)?;
    Ok((1.0 - c).clamp(0.0, 2.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn pooled(present: [bool; 4], d: usize) -> PooledEmbeddings {
        let per_modality = core::array::from_fn(|k| {
            present[k].then(|| (0..d).map(|i| libm::sin((i + 7 * k) as f64)).collect())
        });
        PooledEmbeddings { aggregate: vec![0.0; d], per_modality, final_embedding: vec![0.0; d] }
    }

    fn generator(d: usize) -> (ParamStore, SynthesisGenerator) {
        let mut store = ParamStore::new();
        let g = SynthesisGenerator::new(&mut store, d, &mut rng::stream(3, &[]));
        (store, g)
    }

    #[test]
    fn synthesize_is_deterministic_and_shaped() {
        let (store, gen) = generator(6);
        let p = pooled([true, false, false, true], 6);
        let a = gen.synthesize(&store, &p, ModalityKind::I).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(a, gen.synthesize(&store, &p, ModalityKind::I).unwrap());
    }

    #[test]
    fn no_source_is_an_error() {
        let (store, gen) = generator(6);
        let p = pooled([false, false, true, false], 6);
        assert_eq!(gen.synthesize(&store, &p, ModalityKind::I), Err(Error::NoSourceModality(ModalityKind::I)));
    }

    #[test]
    fn batch_matches_single() {
        let d = 5;
        let (store, gen) = generator(d);
        let p = pooled([true, true, false, true], d);
        let mut g = Graph::new();
        let rows: Vec<f64> = [0, 1, 3].iter().flat_map(|&k| p.per_modality[k].clone().unwrap()).collect();
        let per = g.constant(Tensor::from_vec(&[3, d], rows));
        let agg = g.constant(Tensor::zeros(&[1, d]));
        let batch = PooledBatch { aggregate: agg, per_modality: per, index: vec![[Some(0), Some(1), None, Some(2)]] };
        let out = gen
            .synthesize_batch(&mut g, &store, &batch, &[(0, ModalityKind::I), (0, ModalityKind::R)])
            .unwrap();
        let v = g.value(out);
        let i = gen.synthesize(&store, &p, ModalityKind::I).unwrap();
        let r = gen.synthesize(&store, &p, ModalityKind::R).unwrap();
        for c in 0..d {
            assert!((v.row(0)[c] - i[c]).abs() < 1e-12);
            assert!((v.row(1)[c] - r[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn fill_missing_policies() {
        let (store, gen) = generator(4);
        let full = pooled([true; 4], 4);
        let out = gen.fill_missing(&store, &full, FillPolicy::Zero).unwrap();
        for k in 0..4 {
            assert_eq!(&out[k], full.per_modality[k].as_ref().unwrap());
        }
        let p = pooled([true, true, false, true], 4);
        let z = gen.fill_missing(&store, &p, FillPolicy::Zero).unwrap();
        assert_eq!(z[2], vec![0.0; 4]);
        let s = gen.fill_missing(&store, &p, FillPolicy::Synthesized).unwrap();
        assert_eq!(s[2], gen.synthesize(&store, &p, ModalityKind::I).unwrap());
        assert_eq!(&s[0], p.per_modality[0].as_ref().unwrap());
        let l = gen.fill_missing(&store, &p, FillPolicy::LearnedToken).unwrap();
        assert_eq!(l[2], store.get(gen.fill_vectors).row(2).to_vec());
    }

    #[test]
    fn loss_values() {
        let x = [1.0, 2.0, -0.5];
        assert!(synthesis_loss(&x, &x).unwrap().abs() < 1e-12);
        assert!((synthesis_loss(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((synthesis_loss(&x, &[-1.0, -2.0, 0.5]).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(synthesis_loss(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector));
    }
}
