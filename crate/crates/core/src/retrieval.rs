//! Query/gallery retrieval: cosine ranking, CMC, mAP and the five
//! protocol families (R, I, S, T and S+T queries against an RGB gallery).
//!
//! Ranking is by cosine descending with ties broken by ascending
//! `sample_id`. Gallery entries matching the query's exclusion rule are
//! dropped first; queries left without any positive are tallied as
//! excluded and do not enter the metrics.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::Corpus;
use crate::error::{Error, Result};
use crate::math;
use crate::modality::{ModalityKind, ModalitySet};
use crate::model::{select, UmmModel};

pub const REPORTED_RANKS: [usize; 3] = [1, 5, 10];
pub const TOP_LIST_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub sample_id: String,
    pub identity_id: u32,
    pub view_index: u32,
    pub modalities: ModalitySet,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfExclusion {
    SameSample,
    SameIdentitySameView,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalProtocol {
    pub query_modalities: ModalitySet,
    pub gallery_modality: ModalityKind,
    pub gallery_synthesis: bool,
    pub self_exclusion: SelfExclusion,
}

impl EvalProtocol {
    pub const NAMES: [&'static str; 5] = ["r2r", "i2r", "s2r", "t2r", "st2r"];

    /// One of `r2r`, `i2r`, `s2r`, `t2r`, `st2r`.
    pub fn named(name: &str, gallery_synthesis: bool) -> Result<Self> {
        use ModalityKind::*;
        let q = match name {
            "r2r" => ModalitySet::single(R),
            "i2r" => ModalitySet::single(I),
            "s2r" => ModalitySet::single(S),
            "t2r" => ModalitySet::single(T),
            "st2r" => ModalitySet::from_kinds(&[S, T]),
            other => return Err(Error::InvalidConfig(format!("unknown protocol {other}"))),
        };
        Ok(EvalProtocol {
            query_modalities: q,
            gallery_modality: R,
            gallery_synthesis,
            self_exclusion: SelfExclusion::SameIdentitySameView,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_modalities.is_empty() {
            return Err(Error::InvalidConfig("query modalities must be nonempty".into()));
        }
        Ok(())
    }

    /// Query kinds the gallery side synthesizes when `gallery_synthesis` is on.
    pub fn synthesized_cues(&self) -> Vec<ModalityKind> {
        if !self.gallery_synthesis {
            return Vec::new();
        }
        self.query_modalities.iter().filter(|&k| k != self.gallery_modality).collect()
    }

    fn excludes(&self, q: &EmbeddingRecord, g: &EmbeddingRecord) -> bool {
        match self.self_exclusion {
            SelfExclusion::SameSample => q.sample_id == g.sample_id,
            SelfExclusion::SameIdentitySameView => q.identity_id == g.identity_id && q.view_index == g.view_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRanking {
    pub sample_id: String,
    pub top: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Plain description of the ranking protocol.
    pub protocol_description: String,
    pub protocol: EvalProtocol,
    pub rank_1: f64,
    pub rank_5: f64,
    pub rank_10: f64,
    pub map: f64,
    /// `cmc[k - 1]` for `k = 1..=gallery size`.
    pub cmc: Vec<f64>,
    pub rankings: Vec<QueryRanking>,
    pub query_count: usize,
    pub excluded_query_count: usize,
    pub gallery_count: usize,
}

pub const PROTOCOL_DESCRIPTION: &str = "full gallery, single query; cosine ranking, ties by ascending sample_id; \
gallery entries excluded per self_exclusion; queries without a positive are excluded and counted";

/// `Q x G` cosine similarities.
pub fn similarity_matrix(queries: &[Vec<f64>], gallery: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = queries.first().or(gallery.first()).map_or(0, Vec::len);
    for v in queries.iter().chain(gallery) {
        if v.len() != d {
            return Err(Error::DimMismatch { expected: d, got: v.len() });
        }
    }
    let gn: Vec<f64> = gallery.iter().map(|g| math::norm(g)).collect();
    Ok(queries
        .iter()
        .map(|q| {
            let qn = math::norm(q);
            gallery
                .iter()
                .zip(&gn)
                .map(|(g, &n)| {
                    let den = qn * n;
                    if den == 0.0 {
                        0.0
                    } else {
                        (math::dot(q, g) / den).clamp(-1.0, 1.0)
                    }
                })
                .collect()
        })
        .collect())
}

/// Mean over relevant positions `p` (1-based) of `hits in top p / p`.
pub fn average_precision(relevance: &[bool]) -> Result<f64> {
    let (mut hits, mut sum) = (0usize, 0.0);
    for (i, &r) in relevance.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(Error::NoPositives);
    }
    Ok(sum / hits as f64)
}

/// CMC curve of length `max_rank` from 1-based first-hit ranks, and the
/// `rank-k` values for [`REPORTED_RANKS`] (clamped to the curve length).
pub fn cmc_and_rank(first_hits: &[usize], max_rank: usize) -> Result<(Vec<f64>, [f64; 3])> {
    if first_hits.is_empty() || max_rank == 0 {
        return Err(Error::EmptyQuerySet);
    }
    let mut counts = alloc::vec![0usize; max_rank];
    for &r in first_hits {
        if r >= 1 && r <= max_rank {
            counts[r - 1] += 1;
        }
    }
    let n = first_hits.len() as f64;
    let mut acc = 0;
    let cmc: Vec<f64> = counts
        .iter()
        .map(|&c| {
            acc += c;
            acc as f64 / n
        })
        .collect();
    let ranks = REPORTED_RANKS.map(|k| cmc[k.min(max_rank) - 1]);
    Ok((cmc, ranks))
}

/// Gallery indices in ranking order, exclusions removed.
fn rank_gallery(protocol: &EvalProtocol, q: &EmbeddingRecord, sims: &[f64], gallery: &[EmbeddingRecord]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gallery.len()).filter(|&j| !protocol.excludes(q, &gallery[j])).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then_with(|| gallery[a].sample_id.cmp(&gallery[b].sample_id)));
    order
}

/// Ranks every query against the gallery and aggregates the metrics.
pub fn evaluate(queries: &[EmbeddingRecord], gallery: &[EmbeddingRecord], protocol: &EvalProtocol) -> Result<EvalReport> {
    protocol.validate()?;
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let qv: Vec<Vec<f64>> = queries.iter().map(|r| r.vector.clone()).collect();
    let gv: Vec<Vec<f64>> = gallery.iter().map(|r| r.vector.clone()).collect();
    let sims = similarity_matrix(&qv, &gv)?;
    if let (Some(q), Some(g)) = (qv.first(), gv.first()) {
        if q.len() != g.len() {
            return Err(Error::DimMismatch { expected: g.len(), got: q.len() });
        }
    }
    let mut first_hits = Vec::new();
    let mut aps = Vec::new();
    let mut rankings = Vec::with_capacity(queries.len());
    let mut excluded = 0;
    for (q, row) in queries.iter().zip(&sims) {
        let order = rank_gallery(protocol, q, row, gallery);
        let relevance: Vec<bool> = order.iter().map(|&j| gallery[j].identity_id == q.identity_id).collect();
        rankings.push(QueryRanking {
            sample_id: q.sample_id.clone(),
            top: order.iter().take(TOP_LIST_LEN).map(|&j| gallery[j].sample_id.clone()).collect(),
        });
        match average_precision(&relevance) {
            Ok(ap) => {
                aps.push(ap);
                first_hits.push(relevance.iter().position(|&r| r).unwrap() + 1);
            }
            Err(_) => excluded += 1,
        }
    }
    let (cmc, ranks) = cmc_and_rank(&first_hits, gallery.len())?;
    Ok(EvalReport {
        protocol_description: PROTOCOL_DESCRIPTION.into(),
        protocol: protocol.clone(),
        rank_1: ranks[0],
        rank_5: ranks[1],
        rank_10: ranks[2],
        map: aps.iter().sum::<f64>() / aps.len() as f64,
        cmc,
        rankings,
        query_count: queries.len(),
        excluded_query_count: excluded,
        gallery_count: gallery.len(),
    })
}

/// Embeds the `kinds` modalities of every tuple that carries all of them.
/// `extra_cues` are synthesized on top and join fusion.
pub fn embed_records(
    model: &UmmModel,
    corpus: &Corpus,
    kinds: ModalitySet,
    extra_cues: &[ModalityKind],
    views: Option<&[u32]>,
) -> Result<Vec<EmbeddingRecord>> {
    let tuples: Vec<_> = corpus
        .tuples
        .iter()
        .filter(|t| t.presence().intersect(kinds) == kinds)
        .filter(|t| views.is_none_or(|v| v.contains(&t.view_index)))
        .collect();
    let items: Vec<_> = tuples.iter().map(|t| select(t, kinds)).collect();
    let emb = model.embed_batch(&items, extra_cues)?;
    Ok(tuples
        .iter()
        .zip(emb)
        .map(|(t, e)| EmbeddingRecord {
            sample_id: t.sample_id(),
            identity_id: t.identity_id,
            view_index: t.view_index,
            modalities: kinds,
            vector: e.final_embedding,
        })
        .collect())
}

/// Query and gallery archives for a protocol: queries from `query_views`
/// (all views when `None`), gallery from every tuple with the gallery kind.
pub fn protocol_records(
    model: &UmmModel,
    corpus: &Corpus,
    protocol: &EvalProtocol,
    query_views: Option<&[u32]>,
) -> Result<(Vec<EmbeddingRecord>, Vec<EmbeddingRecord>)> {
    protocol.validate()?;
    let queries = embed_records(model, corpus, protocol.query_modalities, &[], query_views)?;
    let cues = protocol.synthesized_cues();
    let gallery = embed_records(model, corpus, ModalitySet::single(protocol.gallery_modality), &cues, None)?;
    Ok((queries, gallery))
}

pub fn evaluate_model(
    model: &UmmModel,
    corpus: &Corpus,
    protocol: &EvalProtocol,
    query_views: Option<&[u32]>,
) -> Result<EvalReport> {
    let (q, g) = protocol_records(model, corpus, protocol, query_views)?;
    evaluate(&q, &g, protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn rec(id: &str, identity: u32, view: u32, v: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            sample_id: id.into(),
            identity_id: identity,
            view_index: view,
            modalities: ModalitySet::single(ModalityKind::R),
            vector: v,
        }
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[true, false, true]).unwrap() - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
        assert_eq!(average_precision(&[false; 4]), Err(Error::NoPositives));
    }

    #[test]
    fn cmc_examples() {
        let (cmc, _) = cmc_and_rank(&[1, 3], 3).unwrap();
        assert_eq!(cmc, vec![0.5, 0.5, 1.0]);
        let (cmc, r) = cmc_and_rank(&[1, 1, 1], 12).unwrap();
        assert_eq!(cmc[0], 1.0);
        assert_eq!(r, [1.0; 3]);
        assert_eq!(cmc_and_rank(&[], 3), Err(Error::EmptyQuerySet));
    }

    #[test]
    fn similarity_examples() {
        let s = similarity_matrix(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((s[0][0] - 1.0).abs() < 1e-12 && s[0][1].abs() < 1e-12);
        assert!(matches!(similarity_matrix(&[vec![1.0]], &[vec![1.0, 0.0]]), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn ties_break_on_sample_id() {
        let p = EvalProtocol::named("r2r", false).unwrap();
        let q = rec("00000_00", 0, 0, vec![1.0, 0.0]);
        let gallery = vec![rec("00002_00", 2, 0, vec![0.0, 1.0]), rec("00001_00", 1, 0, vec![0.0, 1.0]), rec("00000_01", 0, 1, vec![1.0, 0.0])];
        let r = evaluate(&[q], &gallery, &p).unwrap();
        assert_eq!(r.rankings[0].top, vec!["00000_01", "00001_00", "00002_00"]);
    }

    #[test]
    fn queries_without_positives_are_excluded() {
        let p = EvalProtocol::named("r2r", false).unwrap();
        let q = vec![rec("00000_00", 0, 0, vec![1.0, 0.0]), rec("00003_00", 3, 0, vec![1.0, 0.0])];
        let gallery = vec![rec("00000_00", 0, 0, vec![1.0, 0.0]), rec("00000_01", 0, 1, vec![0.6, 0.8]), rec("00001_00", 1, 0, vec![0.8, 0.6])];
        let r = evaluate(&q, &gallery, &p).unwrap();
        assert_eq!((r.query_count, r.excluded_query_count), (2, 1));
        assert_eq!(r.rank_1, 0.0);
        assert_eq!(r.cmc[1], 1.0);
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn protocol_names() {
        assert_eq!(EvalProtocol::named("st2r", true).unwrap().query_modalities.kinds(), vec![ModalityKind::S, ModalityKind::T]);
        assert_eq!(EvalProtocol::named("t2r", true).unwrap().synthesized_cues(), vec![ModalityKind::T]);
        assert!(EvalProtocol::named("x2r", false).is_err());
    }
}
