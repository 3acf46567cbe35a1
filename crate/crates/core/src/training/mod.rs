//! Two-phase progressive contrastive training.
//!
//! Phase 1 pairs RGB with text; the sketch and infrared segments of every
//! sequence are filled with synthesized vectors. Phase 2 round-robins over
//! RGB-text, RGB-infrared and RGB-sketch batches with absent segments
//! masked. Each step embeds the RGB view and the partner view of the same
//! tuples, applies symmetric InfoNCE between them and adds the synthesis
//! consistency loss on the pairs where the synthesized target is real.
//! Updates are plain SGD with a fixed learning rate.

pub mod grad_check;
pub mod loss;

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, RowTerm, Var};
use crate::datamodel::{Corpus, MultiModalTuple};
use crate::encoder::FillPolicy;
use crate::error::{Error, Result};
use crate::modality::{ModalityKind, ModalitySet};
use crate::model::{select, BatchForward, BatchItem, FillPlan, Mode, UmmModel, MASK_ALL};
use crate::params::Component;
use crate::rng::{self, label};

pub use grad_check::{grad_check, grad_check_params, GradCheckReport};
pub use loss::{info_nce, info_nce_with_grad, triplet_satisfaction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeFlags {
    pub tokenizer: bool,
    pub text_embedding: bool,
    pub encoder: bool,
    pub synthesis: bool,
    pub fusion: bool,
}

impl FreezeFlags {
    pub fn get(&self, c: Component) -> bool {
        match c {
            Component::Tokenizer => self.tokenizer,
            Component::TextEmbedding => self.text_embedding,
            Component::Encoder => self.encoder,
            Component::Synthesis => self.synthesis,
            Component::Fusion => self.fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub temperature: f64,
    pub lambda_syn: f64,
    pub seed: u64,
    pub freeze: FreezeFlags,
    /// The last `heldout_views` views of every identity are kept out of
    /// training and used for the per-epoch probe.
    pub heldout_views: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_epochs: 8,
            phase2_epochs: 16,
            batch_size: 32,
            learning_rate: 1e-3,
            temperature: 0.07,
            lambda_syn: 0.5,
            seed: 13,
            freeze: FreezeFlags::default(),
            heldout_views: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lambda_syn >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate and lambda_syn must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.phase1_epochs + self.phase2_epochs
    }

    /// Phase (1 or 2) of a 0-based epoch.
    pub fn phase_of(&self, epoch: usize) -> u8 {
        if epoch < self.phase1_epochs {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: u8,
    pub steps: usize,
    pub loss_total: f64,
    pub loss_contrastive: f64,
    pub loss_synthesis: f64,
    /// Triplet satisfaction over held-out tuples, each real modality
    /// embedded alone; `None` without held-out tuples.
    pub probe_triplet_satisfaction: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

/// Loss values of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub total: f64,
    pub contrastive: f64,
    pub synthesis: f64,
}

const PHASE2_PARTNERS: [ModalityKind; 3] = [ModalityKind::T, ModalityKind::I, ModalityKind::S];

fn fill_plan(phase: u8) -> FillPlan {
    match phase {
        1 => {
            let mut f = MASK_ALL;
            f[ModalityKind::S.index()] = FillPolicy::Synthesized;
            f[ModalityKind::I.index()] = FillPolicy::Synthesized;
            f
        }
        _ => MASK_ALL,
    }
}

pub fn split_views(corpus: &Corpus, cfg: &TrainConfig) -> (Vec<u32>, Vec<u32>) {
    let views = corpus.spec.views_per_identity as u32;
    let train = views.saturating_sub(cfg.heldout_views as u32);
    ((0..train).collect(), (train..views).collect())
}

struct Built {
    loss: Var,
    contrastive: Var,
    synthesis: Option<Var>,
    forward: BatchForward,
}

/// Builds the loss of one `(R, partner)` batch in `g`.
fn build_loss(
    model: &UmmModel,
    g: &mut Graph,
    tuples: &[&MultiModalTuple],
    partner: ModalityKind,
    phase: u8,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<Built> {
    let b = tuples.len();
    let mut items: Vec<BatchItem> = tuples.iter().map(|t| select(t, ModalitySet::single(ModalityKind::R))).collect();
    items.extend(tuples.iter().map(|t| select(t, ModalitySet::single(partner))));
    let f = model.forward(g, &items, fill_plan(phase), &[], mode, None)?;
    let dfin = model.final_dim();
    let fin_a = g.row_combine(&[f.final_embedding], (0..b).map(|i| vec![RowTerm::copy(0, i)]).collect(), &[b, dfin]);
    let fin_b = g.row_combine(&[f.final_embedding], (b..2 * b).map(|i| vec![RowTerm::copy(0, i)]).collect(), &[b, dfin]);
    let labels: Vec<u64> = tuples.iter().map(|t| t.identity_id as u64).collect();
    let contrastive = g.info_nce(fin_a, fin_b, &labels, &labels, cfg.temperature)?;
    let mut loss = contrastive;
    let mut synthesis = None;
    if cfg.lambda_syn > 0.0 {
        let real = f.real_pooled();
        let mut requests = Vec::with_capacity(2 * b);
        let mut targets = Vec::with_capacity(2 * b);
        for i in 0..b {
            let r_row = real.index[i][ModalityKind::R.index()];
            let p_row = real.index[b + i][partner.index()];
            if let (Some(r_row), Some(p_row)) = (r_row, p_row) {
                requests.push((i, partner));
                targets.push(vec![RowTerm::copy(0, p_row)]);
                requests.push((b + i, ModalityKind::R));
                targets.push(vec![RowTerm::copy(0, r_row)]);
            }
        }
        if !requests.is_empty() {
            let d = model.embed_dim();
            let n = requests.len();
            let pseudo = model.synthesis.synthesize_batch(g, &model.store, real, &requests)?;
            let per = g.detach(real.per_modality);
            let target = g.row_combine(&[per], targets, &[n, d]);
            let dist = g.cosine_distance(pseudo, target);
            let s = g.mean(dist);
            let weighted = g.scale(s, cfg.lambda_syn);
            loss = g.add(loss, weighted);
            synthesis = Some(s);
        }
    }
    Ok(Built { loss, contrastive, synthesis, forward: f })
}

/// Loss of one batch without updating anything (eval-mode normalization).
pub fn batch_loss(
    model: &UmmModel,
    tuples: &[&MultiModalTuple],
    partner: ModalityKind,
    phase: u8,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let built = build_loss(model, &mut g, tuples, partner, phase, cfg, Mode::Eval)?;
    Ok(step_values(&g, &built))
}

fn step_values(g: &Graph, b: &Built) -> StepLoss {
    StepLoss {
        total: g.value(b.loss).item(),
        contrastive: g.value(b.contrastive).item(),
        synthesis: b.synthesis.map_or(0.0, |s| g.value(s).item()),
    }
}

/// One SGD step on a batch. Returns the pre-update loss.
pub fn train_step(
    model: &mut UmmModel,
    tuples: &[&MultiModalTuple],
    partner: ModalityKind,
    phase: u8,
    cfg: &TrainConfig,
) -> Result<StepLoss> {
    let mut g = Graph::new();
    let built = build_loss(model, &mut g, tuples, partner, phase, cfg, Mode::Train)?;
    let values = step_values(&g, &built);
    if !values.total.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    let grads = g.backward(built.loss);
    for (id, grad) in grads.params() {
        if !grad.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        if model.store.is_trainable(id) {
            let p = model.store.get_mut(id).data_mut();
            for (w, d) in p.iter_mut().zip(grad.data()) {
                *w -= cfg.learning_rate * d;
            }
        }
    }
    if !cfg.freeze.tokenizer {
        model.update_running_stats(&g, &built.forward.tokenizer_outputs);
    }
    Ok(values)
}

fn batches<'a>(
    corpus: &'a Corpus,
    views: &[u32],
    partner: ModalityKind,
    size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<&'a MultiModalTuple>> {
    let mut pool: Vec<&MultiModalTuple> = corpus
        .tuples
        .iter()
        .filter(|t| views.contains(&t.view_index))
        .filter(|t| t.presence().contains(ModalityKind::R) && t.presence().contains(partner))
        .collect();
    pool.shuffle(&mut rng::stream(seed, &[label::SHUFFLE, epoch as u64, partner.index() as u64]));
    pool.chunks(size).filter(|c| c.len() >= 2).map(<[_]>::to_vec).collect()
}

/// Held-out triplet probe: every real modality of every held-out tuple,
/// embedded alone.
pub fn probe(model: &UmmModel, corpus: &Corpus, views: &[u32]) -> Result<Option<f64>> {
    let tuples: Vec<&MultiModalTuple> = corpus.tuples.iter().filter(|t| views.contains(&t.view_index)).collect();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for t in &tuples {
        for k in t.presence().iter() {
            items.push(select(t, ModalitySet::single(k)));
            labels.push(t.identity_id as u64);
        }
    }
    if items.is_empty() {
        return Ok(None);
    }
    let emb: Vec<Vec<f64>> = model.embed_batch(&items, &[])?.into_iter().map(|e| e.final_embedding).collect();
    match triplet_satisfaction(&emb, &labels, None) {
        Ok(v) => Ok(Some(v)),
        Err(Error::InsufficientClasses) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains `model` in place. Parameters end rounded to `f32` so that the
/// in-memory model equals its saved checkpoint.
pub fn train_model(model: &mut UmmModel, corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainLog> {
    cfg.validate()?;
    if corpus.tuples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (train_views, heldout) = split_views(corpus, cfg);
    if train_views.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for c in Component::ALL {
        model.store.set_frozen(c, cfg.freeze.get(c));
    }
    let mut log = TrainLog::default();
    for epoch in 0..cfg.total_epochs() {
        let phase = cfg.phase_of(epoch);
        let schedule: Vec<(ModalityKind, Vec<&MultiModalTuple>)> = if phase == 1 {
            batches(corpus, &train_views, ModalityKind::T, cfg.batch_size, cfg.seed, epoch)
                .into_iter()
                .map(|b| (ModalityKind::T, b))
                .collect()
        } else {
            let mut queues: Vec<_> = PHASE2_PARTNERS
                .iter()
                .map(|&p| batches(corpus, &train_views, p, cfg.batch_size, cfg.seed, epoch).into_iter())
                .collect();
            let mut out = Vec::new();
            loop {
                let before = out.len();
                for (q, &p) in queues.iter_mut().zip(&PHASE2_PARTNERS) {
                    if let Some(b) = q.next() {
                        out.push((p, b));
                    }
                }
                if out.len() == before {
                    break;
                }
            }
            out
        };
        if schedule.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let (mut total, mut con, mut syn) = (0.0, 0.0, 0.0);
        for (partner, batch) in &schedule {
            let s = match train_step(model, batch, *partner, phase, cfg) {
                Err(Error::NonFiniteGradient) => return Err(Error::NonFiniteLoss(epoch)),
                r => r?,
            };
            total += s.total;
            con += s.contrastive;
            syn += s.synthesis;
        }
        let n = schedule.len() as f64;
        if !(total / n).is_finite() {
            return Err(Error::NonFiniteLoss(epoch));
        }
        log.records.push(EpochRecord {
            epoch,
            phase,
            steps: schedule.len(),
            loss_total: total / n,
            loss_contrastive: con / n,
            loss_synthesis: syn / n,
            probe_triplet_satisfaction: probe(model, corpus, &heldout)?,
        });
    }
    model.store.quantize_to_f32();
    Ok(log)
}

/// Builds a model from `model_cfg` seeded with `cfg.seed` and trains it.
pub fn train(
    model_cfg: &crate::model::ModelConfig,
    cfg: &TrainConfig,
    corpus: &Corpus,
) -> Result<(UmmModel, TrainLog)> {
    let mut model = UmmModel::new(model_cfg, cfg.seed)?;
    let log = train_model(&mut model, corpus, cfg)?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_corpus, CorpusSpec};
    use crate::model::ModelConfig;

    fn tiny_model() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.tokenizer.embed_dim = 16;
        c.tokenizer.stem_channels = 8;
        c.encoder.embed_dim = 16;
        c.encoder.heads = 2;
        c.encoder.depth = 1;
        c.encoder.final_dim = 16;
        c
    }

    fn tiny_corpus() -> Corpus {
        generate_corpus(&CorpusSpec { num_identities: 4, views_per_identity: 3, seed: 5, ..CorpusSpec::default() }).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig { phase1_epochs: 1, phase2_epochs: 1, batch_size: 4, learning_rate: 0.05, ..TrainConfig::default() }
    }

    #[test]
    fn phase_boundary() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.phase_of(7), 1);
        assert_eq!(cfg.phase_of(8), 2);
    }

    #[test]
    fn training_is_deterministic_and_logs_every_epoch() {
        let corpus = tiny_corpus();
        let (m1, l1) = train(&tiny_model(), &tiny_cfg(), &corpus).unwrap();
        let (m2, l2) = train(&tiny_model(), &tiny_cfg(), &corpus).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(m1.store, m2.store);
        assert_eq!(l1.records.len(), 2);
        assert_eq!(l1.records.iter().map(|r| r.phase).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(l1.records[1].steps, 6);
    }

    #[test]
    fn frozen_components_do_not_move() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_cfg();
        cfg.freeze.encoder = true;
        cfg.freeze.tokenizer = true;
        let before = UmmModel::new(&tiny_model(), cfg.seed).unwrap();
        let (after, _) = train(&tiny_model(), &cfg, &corpus).unwrap();
        for (a, b) in before.store.entries().iter().zip(after.store.entries()) {
            if matches!(a.component, Component::Encoder | Component::Tokenizer) {
                assert!(a.tensor == b.tensor, "{} moved", a.name);
            }
        }
    }

    #[test]
    fn no_training_views_is_rejected() {
        let corpus = generate_corpus(&CorpusSpec { num_identities: 3, views_per_identity: 1, ..CorpusSpec::default() }).unwrap();
        assert_eq!(train(&tiny_model(), &tiny_cfg(), &corpus).unwrap_err(), Error::EmptyCorpus);
    }
}
