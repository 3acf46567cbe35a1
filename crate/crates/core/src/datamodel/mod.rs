//! Multimodal sample model and the procedural identity corpus.
//!
//! Each identity is observed in up to four modalities per view: an RGB
//! rendering, an infrared rendering derived from its luminance, a binary
//! sketch from its edges, and an attribute-template text description.

mod corpus;
mod render;
mod vocab;

pub use corpus::{generate_corpus, identity_params, Corpus};
pub use render::{box_blur3, luminance, render_modality, render_rgb, sobel_magnitude, SKETCH_THRESHOLD};
pub use vocab::{describe, encode_text, vocabulary, COLOR_WORDS, PAD_ID, VOCAB_VERSION};

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::{ModalityKind, ModalitySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Build {
    Slim,
    Medium,
    Broad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Accessory {
    None,
    Backpack,
    Hat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Plain,
    Striped,
}

impl Build {
    pub const ALL: [Build; 3] = [Build::Slim, Build::Medium, Build::Broad];
}

impl Accessory {
    pub const ALL: [Accessory; 3] = [Accessory::None, Accessory::Backpack, Accessory::Hat];
}

impl Pattern {
    pub const ALL: [Pattern; 2] = [Pattern::Plain, Pattern::Striped];
}

/// Appearance attributes of one procedural identity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    /// In `[0, 1)`.
    pub hue: f64,
    pub build: Build,
    pub accessory: Accessory,
    pub pattern: Pattern,
    pub texture_seed: u64,
}

/// Row-major `H x W x C` raster with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} image",
                pixels.len()
            )));
        }
        Ok(ImageSample { height, width, channels, pixels })
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Token ids right-padded with [`PAD_ID`] to a fixed length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextSample {
    pub token_ids: Vec<u32>,
    pub raw_text: String,
}

impl TextSample {
    /// Number of leading non-padding tokens.
    pub fn valid_len(&self) -> usize {
        self.token_ids.iter().take_while(|&&t| t != PAD_ID).count()
    }
}

/// A sample in one modality.
#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Image(ImageSample),
    Text(TextSample),
}

/// One identity observation across up to four modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalTuple {
    pub identity_id: u32,
    pub view_index: u32,
    samples: [Option<Sample>; 4],
}

impl MultiModalTuple {
    /// Fails when no modality is present or a sample does not fit its kind.
    pub fn new(identity_id: u32, view_index: u32, samples: [Option<Sample>; 4]) -> Result<Self> {
        if samples.iter().all(Option::is_none) {
            return Err(Error::InvalidSpec(String::from("tuple without any modality")));
        }
        for k in ModalityKind::ALL {
            match (&samples[k.index()], k) {
                (Some(Sample::Text(_)), ModalityKind::T) | (None, _) => {}
                (Some(Sample::Image(img)), ModalityKind::R) if img.channels == 3 => {}
                (Some(Sample::Image(img)), ModalityKind::S | ModalityKind::I) if img.channels == 1 => {}
                _ => return Err(Error::InvalidSpec(format!("sample does not match modality {k}"))),
            }
        }
        Ok(MultiModalTuple { identity_id, view_index, samples })
    }

    /// Stable identifier; lexicographic order equals (identity, view) order.
    pub fn sample_id(&self) -> String {
        sample_id(self.identity_id, self.view_index)
    }

    pub fn presence(&self) -> ModalitySet {
        ModalityKind::ALL
            .into_iter()
            .filter(|k| self.samples[k.index()].is_some())
            .fold(ModalitySet::EMPTY, |s, k| s.with(k))
    }

    pub fn sample(&self, kind: ModalityKind) -> Option<&Sample> {
        self.samples[kind.index()].as_ref()
    }

    pub fn image(&self, kind: ModalityKind) -> Option<&ImageSample> {
        match self.sample(kind) {
            Some(Sample::Image(i)) => Some(i),
            _ => None,
        }
    }

    pub fn text(&self) -> Option<&TextSample> {
        match self.sample(ModalityKind::T) {
            Some(Sample::Text(t)) => Some(t),
            _ => None,
        }
    }
}

pub fn sample_id(identity_id: u32, view_index: u32) -> String {
    format!("{identity_id:05}_{view_index:02}")
}

/// Per-modality probability that a tuple carries that modality.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Availability {
    #[serde(rename = "R", default = "one")]
    pub rgb: f64,
    #[serde(rename = "S", default = "one")]
    pub sketch: f64,
    #[serde(rename = "I", default = "one")]
    pub infrared: f64,
    #[serde(rename = "T", default = "one")]
    pub text: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Availability {
    fn default() -> Self {
        Availability { rgb: 1.0, sketch: 1.0, infrared: 1.0, text: 1.0 }
    }
}

impl Availability {
    pub fn get(&self, kind: ModalityKind) -> f64 {
        match kind {
            ModalityKind::R => self.rgb,
            ModalityKind::S => self.sketch,
            ModalityKind::I => self.infrared,
            ModalityKind::T => self.text,
        }
    }

    pub fn set(&mut self, kind: ModalityKind, p: f64) {
        match kind {
            ModalityKind::R => self.rgb = p,
            ModalityKind::S => self.sketch = p,
            ModalityKind::I => self.infrared = p,
            ModalityKind::T => self.text = p,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_identities: usize,
    pub views_per_identity: usize,
    #[serde(default)]
    pub availability: Availability,
    pub seed: u64,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_text_len")]
    pub text_len: usize,
}

fn default_image_size() -> usize {
    32
}

fn default_text_len() -> usize {
    16
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_identities: 40,
            views_per_identity: 4,
            availability: Availability::default(),
            seed: 13,
            image_size: default_image_size(),
            text_len: default_text_len(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::InvalidSpec(format!("num_identities must be >= 2, got {}", self.num_identities)));
        }
        if self.views_per_identity < 1 {
            return Err(Error::InvalidSpec(String::from("views_per_identity must be >= 1")));
        }
        for k in ModalityKind::ALL {
            let p = self.availability.get(k);
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidSpec(format!("availability({k}) = {p} is outside [0, 1]")));
            }
        }
        if self.image_size < 8 {
            return Err(Error::InvalidSpec(String::from("image_size must be at least 8")));
        }
        if self.text_len < vocab::MAX_WORDS {
            return Err(Error::InvalidSpec(String::from("text_len is shorter than the longest description")));
        }
        Ok(())
    }
}
