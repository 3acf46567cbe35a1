use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::vocab::{vocabulary, COLOR_WORDS};
use super::{render_modality, Accessory, Build, CorpusSpec, IdentityParams, MultiModalTuple, Pattern, Sample};
use crate::error::Result;
use crate::modality::ModalityKind;
use crate::rng::{self, label};

const COMBOS: usize = 12 * 3 * 3 * 2;

/// Generated corpus: identities, their tuples and the text vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub vocabulary: Vec<alloc::string::String>,
    pub identities: Vec<IdentityParams>,
    pub tuples: Vec<MultiModalTuple>,
}

impl Corpus {
    pub fn tuple(&self, identity: u32, view: u32) -> Option<&MultiModalTuple> {
        self.tuples.iter().find(|t| t.identity_id == identity && t.view_index == view)
    }
}

/// Attributes of identity `index`. The first 216 identities of a corpus take
/// distinct (colour bin, build, accessory, pattern) combinations, so their
/// text descriptions are pairwise distinct.
pub fn identity_params(seed: u64, index: usize) -> IdentityParams {
    let mut order: Vec<usize> = (0..COMBOS).collect();
    order.shuffle(&mut rng::stream(seed, &[label::COMBO]));
    let combo = order[index % COMBOS];
    let color_bin = combo % COLOR_WORDS.len();
    let rest = combo / COLOR_WORDS.len();
    let build = Build::ALL[rest % 3];
    let accessory = Accessory::ALL[(rest / 3) % 3];
    let pattern = Pattern::ALL[rest / 9];
    let mut r = rng::stream(seed, &[label::IDENTITY, index as u64]);
    let hue = (color_bin as f64 + r.gen_range(0.2..0.8)) / COLOR_WORDS.len() as f64;
    let texture_seed = rng::derive_seed(seed, &[label::IDENTITY, index as u64, 1]);
    IdentityParams { hue, build, accessory, pattern, texture_seed }
}

/// Renders `num_identities x views_per_identity` tuples. A modality is
/// present when a per-(tuple, kind) uniform draw falls below its
/// availability; RGB is forced when every draw fails.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let identities: Vec<IdentityParams> = (0..spec.num_identities).map(|i| identity_params(spec.seed, i)).collect();
    let mut tuples = Vec::with_capacity(spec.num_identities * spec.views_per_identity);
    for (i, params) in identities.iter().enumerate() {
        for view in 0..spec.views_per_identity as u32 {
            let mut r = rng::stream(spec.seed, &[label::AVAILABILITY, i as u64, view as u64]);
            let mut present = [false; 4];
            for k in ModalityKind::ALL {
                let u: f64 = r.gen();
                present[k.index()] = u < spec.availability.get(k);
            }
            if !present.iter().any(|&p| p) {
                present[ModalityKind::R.index()] = true;
            }
            let samples: [Option<Sample>; 4] = core::array::from_fn(|k| {
                present[k].then(|| {
                    let kind = ModalityKind::ALL[k];
                    render_modality(params, view, kind, spec.seed, spec.image_size, spec.text_len)
                })
            });
            tuples.push(MultiModalTuple::new(i as u32, view, samples)?);
        }
    }
    Ok(Corpus { spec: spec.clone(), vocabulary: vocabulary(), identities, tuples })
}
