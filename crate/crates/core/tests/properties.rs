use proptest::prelude::*;

use umm_core::datamodel::{generate_corpus, CorpusSpec};
use umm_core::encoder::{FillPolicy, PooledEmbeddings};
use umm_core::params::ParamStore;
use umm_core::retrieval::{average_precision, cmc_and_rank};
use umm_core::rng;
use umm_core::synthesis::{synthesis_loss, SynthesisGenerator};
use umm_core::training::{info_nce, train_step, triplet_satisfaction, TrainConfig};
use umm_core::{ModalityKind, ModelConfig, Tensor, UmmModel};

fn unit_rows(raw: &[f64], d: usize) -> Vec<f64> {
    let mut out = raw.to_vec();
    for row in out.chunks_mut(d) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Random orthogonal `d x d` matrix by Gram-Schmidt.
fn orthogonal(raw: &[f64], d: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    for i in 0..d {
        let mut v: Vec<f64> = raw[i * d..(i + 1) * d].to_vec();
        v[i] += 3.0;
        for u in &q {
            let p: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(x, y)| *x -= p * y);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        q.push(v.into_iter().map(|x| x / n).collect());
    }
    q.concat()
}

fn rotate(x: &[f64], q: &[f64], d: usize) -> Vec<f64> {
    x.chunks(d).flat_map(|row| (0..d).map(move |j| (0..d).map(|k| row[k] * q[k * d + j]).sum::<f64>())).collect()
}

/// Labels where each of `b / 2` identities appears twice.
fn paired_labels(b: usize) -> Vec<u64> {
    (0..b).map(|i| (i / 2) as u64).collect()
}

fn brute_ap(rel: &[bool]) -> Option<f64> {
    let total = rel.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0;
    let mut sum = 0.0;
    for (i, &r) in rel.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

fn pooled(vectors: [Option<Vec<f64>>; 4]) -> PooledEmbeddings {
    PooledEmbeddings { aggregate: vec![0.0; 4], per_modality: vectors, final_embedding: vec![1.0, 0.0, 0.0, 0.0] }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn info_nce_is_orthogonally_invariant(
        raw_a in prop::collection::vec(-1.0f64..1.0, 4 * 5),
        raw_b in prop::collection::vec(-1.0f64..1.0, 4 * 5),
        raw_q in prop::collection::vec(-1.0f64..1.0, 5 * 5),
        tau in 0.05f64..1.0,
    ) {
        let d = 5;
        let (a, b) = (unit_rows(&raw_a, d), unit_rows(&raw_b, d));
        let q = orthogonal(&raw_q, d);
        let labels = paired_labels(4);
        let plain = info_nce(&Tensor::from_vec(&[4, d], a.clone()), &Tensor::from_vec(&[4, d], b.clone()), &labels, tau).unwrap();
        let turned = info_nce(
            &Tensor::from_vec(&[4, d], rotate(&a, &q, d)),
            &Tensor::from_vec(&[4, d], rotate(&b, &q, d)),
            &labels,
            tau,
        )
        .unwrap();
        prop_assert!(plain >= 0.0);
        prop_assert!((plain - turned).abs() < 1e-6, "{plain} vs {turned}");
    }

    #[test]
    fn triplet_satisfaction_ignores_positive_scale(
        raw in prop::collection::vec(-1.0f64..1.0, 8 * 3),
        scale in 0.01f64..100.0,
    ) {
        let emb: Vec<Vec<f64>> = raw.chunks(3).map(<[f64]>::to_vec).collect();
        let scaled: Vec<Vec<f64>> = emb.iter().map(|e| e.iter().map(|x| x * scale).collect()).collect();
        let labels: Vec<u64> = (0..8).map(|i| i % 3).collect();
        let a = triplet_satisfaction(&emb, &labels, None).unwrap();
        let b = triplet_satisfaction(&scaled, &labels, None).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn average_precision_matches_definition(rel in prop::collection::vec(any::<bool>(), 1..40)) {
        match (average_precision(&rel), brute_ap(&rel)) {
            (Ok(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-9),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
        }
    }

    #[test]
    fn cmc_is_monotone_and_ends_at_one(hits in prop::collection::vec(1usize..=12, 1..30)) {
        let (cmc, ranks) = cmc_and_rank(&hits, 12).unwrap();
        prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!((cmc[11] - 1.0).abs() < 1e-12);
        prop_assert_eq!(ranks[0], cmc[0]);
        let r1 = hits.iter().filter(|&&h| h == 1).count() as f64 / hits.len() as f64;
        prop_assert!((cmc[0] - r1).abs() < 1e-12);
    }

    #[test]
    fn synthesis_loss_is_symmetric_and_zero_on_self(
        x in prop::collection::vec(-1.0f64..1.0, 6),
        y in prop::collection::vec(-1.0f64..1.0, 6),
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && y.iter().any(|v| v.abs() > 1e-3));
        prop_assert!(synthesis_loss(&x, &x).unwrap().abs() < 1e-12);
        let (a, b) = (synthesis_loss(&x, &y).unwrap(), synthesis_loss(&y, &x).unwrap());
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=2.0).contains(&a));
    }

    #[test]
    fn fill_missing_keeps_present_entries(
        present in prop::array::uniform4(any::<bool>()),
        raw in prop::collection::vec(-2.0f64..2.0, 16),
        policy in prop::sample::select(vec![FillPolicy::Zero, FillPolicy::LearnedToken, FillPolicy::Synthesized]),
    ) {
        prop_assume!(present.iter().any(|&p| p));
        let mut store = ParamStore::new();
        let gen = SynthesisGenerator::new(&mut store, 4, &mut rng::stream(3, &[]));
        let vectors: [Option<Vec<f64>>; 4] =
            core::array::from_fn(|k| present[k].then(|| raw[k * 4..(k + 1) * 4].to_vec()));
        let filled = gen.fill_missing(&store, &pooled(vectors.clone()), policy).unwrap();
        for k in 0..4 {
            prop_assert_eq!(filled[k].len(), 4);
            if let Some(v) = &vectors[k] {
                prop_assert_eq!(&filled[k], v);
            }
        }
    }
}

#[test]
fn info_nce_uniform_case_is_log_b() {
    for b in [2usize, 4, 8] {
        let e = Tensor::from_vec(&[b, 3], [0.6, 0.0, 0.8].repeat(b));
        let labels: Vec<u64> = (0..b as u64).collect();
        let loss = info_nce(&e, &e, &labels, 0.07).unwrap();
        assert!((loss - (b as f64).ln()).abs() < 1e-12, "B={b}: {loss}");
    }
}

#[test]
fn small_sgd_step_lowers_the_batch_loss() {
    let mut cfg = ModelConfig::default();
    cfg.tokenizer.embed_dim = 16;
    cfg.tokenizer.stem_channels = 8;
    cfg.encoder.embed_dim = 16;
    cfg.encoder.heads = 2;
    cfg.encoder.depth = 1;
    cfg.encoder.final_dim = 16;
    let corpus = generate_corpus(&CorpusSpec { num_identities: 4, views_per_identity: 2, seed: 8, ..CorpusSpec::default() }).unwrap();
    let tuples: Vec<_> = corpus.tuples.iter().collect();
    let train = TrainConfig { learning_rate: 1e-4, ..TrainConfig::default() };
    for (partner, phase) in [(ModalityKind::T, 1), (ModalityKind::I, 2), (ModalityKind::S, 2)] {
        let mut model = UmmModel::new(&cfg, 21).unwrap();
        let before = train_step(&mut model, &tuples, partner, phase, &train).unwrap();
        let after = train_step(&mut model, &tuples, partner, phase, &train).unwrap();
        assert!(after.total < before.total, "{partner:?}: {} -> {}", before.total, after.total);
    }
}
