//! Lightweight multimodal token mapper.
//!
//! Images (single-channel ones replicated to three channels) pass through a
//! two-stage strided convolution stem with IBN normalization:
//! `conv(k=s1, stride=s1) -> IBN -> ReLU -> conv(k=s2, stride=s2)`, and the
//! final feature grid is flattened row-major into tokens. Text ids are looked
//! up in an embedding table, or handed to an external encoder whose output is
//! treated as a constant.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, IbnRunning, RowTerm, Var};
use crate::datamodel::{ImageSample, TextSample, PAD_ID};
use crate::error::{Error, Result};
use crate::model::Mode;
use crate::modality::ModalityKind;
use crate::params::{glorot, uniform, Component, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub image_size: usize,
    pub stem_channels: usize,
    pub embed_dim: usize,
    pub stride_1: usize,
    pub stride_2: usize,
    /// Fraction of stem channels under instance normalization; the first
    /// `ceil(stem_channels * ibn_split)` channels.
    pub ibn_split: f64,
    pub text_len: usize,
    pub vocab_size: usize,
    /// One tokenizer for RGB, sketch and infrared, or one per modality.
    pub shared_image_tokenizer: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_size: 32,
            stem_channels: 16,
            embed_dim: 64,
            stride_1: 4,
            stride_2: 2,
            ibn_split: 0.5,
            text_len: 16,
            vocab_size: crate::datamodel::vocabulary().len(),
            shared_image_tokenizer: true,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = self.stride_1 * self.stride_2;
        if stride == 0 || !self.image_size.is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!(
                "image size {} is not divisible by {}x{}",
                self.image_size, self.stride_1, self.stride_2
            )));
        }
        if self.embed_dim == 0 || self.stem_channels == 0 {
            return Err(Error::InvalidConfig("embed_dim and stem_channels must be positive".into()));
        }
        if !(self.ibn_split > 0.0 && self.ibn_split < 1.0) {
            return Err(Error::InvalidConfig(format!("ibn_split {} is outside (0, 1)", self.ibn_split)));
        }
        if self.text_len == 0 || self.vocab_size < 2 {
            return Err(Error::InvalidConfig("text_len and vocab_size must be positive".into()));
        }
        Ok(())
    }

    /// Tokens per image, `(H / (s1 * s2))^2`.
    pub fn image_tokens(&self) -> usize {
        let g = self.image_size / (self.stride_1 * self.stride_2);
        g * g
    }
}

/// Number of instance-normalized channels for `channels` and `split`.
pub fn instance_channel_count(channels: usize, split: f64) -> usize {
    (libm::ceil(channels as f64 * split) as usize).min(channels)
}

/// Per-modality token matrix `k x D`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub kind: ModalityKind,
    pub valid_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.valid_mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid_mask.is_empty()
    }
}

/// Replicates a single-channel image into three identical channels.
pub fn align_channels(img: &ImageSample) -> Result<ImageSample> {
    match img.channels {
        3 => Ok(img.clone()),
        1 => {
            let pixels = img.pixels.iter().flat_map(|&v| [v, v, v]).collect();
            Ok(ImageSample { height: img.height, width: img.width, channels: 3, pixels })
        }
        c => Err(Error::BadChannelCount(c)),
    }
}

/// Stacks images into an NCHW tensor, aligning channels first.
pub fn images_to_tensor(images: &[&ImageSample]) -> Result<Tensor> {
    let first = images.first().ok_or(Error::EmptyInput)?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} image in a {h}x{w} batch",
                img.height, img.width
            )));
        }
        let img = align_channels(img)?;
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(img.at(y, x, c) as f64);
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[images.len(), 3, h, w], data))
}

/// Pre-affine IBN normalization of `features: [B, C, H, W]`. The first
/// `ceil(C * split)` channels use per-sample statistics; the rest use batch
/// statistics in train mode and `running` statistics in eval mode.
pub fn ibn_normalize(
    features: &Tensor,
    split: f64,
    mode: Mode,
    running: Option<(&[f64], &[f64])>,
) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 4 {
        return Err(Error::ShapeMismatch(format!("expected NCHW, got {s:?}")));
    }
    let nin = instance_channel_count(s[1], split);
    let nbn = s[1] - nin;
    let run = match mode {
        Mode::Train => {
            if s[0] < 2 {
                return Err(Error::DegenerateBatch(s[0]));
            }
            None
        }
        Mode::Eval => {
            let (mean, var) = running.ok_or_else(|| Error::InvalidConfig("eval mode needs running statistics".into()))?;
            if mean.len() != nbn || var.len() != nbn {
                return Err(Error::DimMismatch { expected: nbn, got: mean.len() });
            }
            Some(IbnRunning { mean, var })
        }
    };
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let y = g.ibn(x, nin, run);
    Ok(g.value(y).clone())
}

/// Convolutional image tokenizer with an IBN stem.
#[derive(Debug, Clone)]
pub struct ImageTokenizer {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub ibn_gamma: ParamId,
    pub ibn_beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    cfg: TokenizerConfig,
}

/// Graph outputs of one tokenizer pass.
pub struct TokenizerOutput {
    /// `[B, k, D]`
    pub tokens: Var,
    /// The pre-affine IBN node, for batch statistics.
    pub ibn: Var,
}

impl ImageTokenizer {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &TokenizerConfig, rng: &mut Rng) -> Self {
        let (c, d, k1, k2) = (cfg.stem_channels, cfg.embed_dim, cfg.stride_1, cfg.stride_2);
        let nbn = c - instance_channel_count(c, cfg.ibn_split);
        let comp = Component::Tokenizer;
        let fan1 = 3 * k1 * k1;
        let fan2 = c * k2 * k2;
        ImageTokenizer {
            conv1_w: store.add(&format!("{prefix}.conv1.weight"), comp, glorot(rng, fan1, c, &[c, fan1])),
            conv1_b: store.add(&format!("{prefix}.conv1.bias"), comp, uniform(rng, &[c], 0.1)),
            ibn_gamma: store.add(&format!("{prefix}.ibn.gamma"), comp, Tensor::full(&[c], 1.0)),
            ibn_beta: store.add(&format!("{prefix}.ibn.beta"), comp, Tensor::zeros(&[c])),
            running_mean: store.add_buffer(&format!("{prefix}.ibn.running_mean"), comp, Tensor::zeros(&[nbn])),
            running_var: store.add_buffer(&format!("{prefix}.ibn.running_var"), comp, Tensor::full(&[nbn], 1.0)),
            conv2_w: store.add(&format!("{prefix}.conv2.weight"), comp, glorot(rng, fan2, d, &[d, fan2])),
            conv2_b: store.add(&format!("{prefix}.conv2.bias"), comp, uniform(rng, &[d], 0.1)),
            cfg: cfg.clone(),
        }
    }

    pub fn instance_channels(&self) -> usize {
        instance_channel_count(self.cfg.stem_channels, self.cfg.ibn_split)
    }

    /// Tokenizes `images: [B, 3, H, W]` into `[B, k, D]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, images: Var, mode: Mode) -> Result<TokenizerOutput> {
        let s = g.value(images).shape().to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::BadChannelCount(*s.get(1).unwrap_or(&0)));
        }
        let stride = self.cfg.stride_1 * self.cfg.stride_2;
        if !s[2].is_multiple_of(stride) || !s[3].is_multiple_of(stride) {
            return Err(Error::ShapeMismatch(format!("{}x{} image is not divisible by {stride}", s[2], s[3])));
        }
        if mode == Mode::Train && s[0] < 2 {
            return Err(Error::DegenerateBatch(s[0]));
        }
        let w1 = g.param(store, self.conv1_w);
        let b1 = g.param(store, self.conv1_b);
        let h = g.patch_conv(images, w1, b1, self.cfg.stride_1);
        let nin = self.instance_channels();
        let ibn = match mode {
            Mode::Train => g.ibn(h, nin, None),
            Mode::Eval => {
                let run = IbnRunning {
                    mean: store.get(self.running_mean).data(),
                    var: store.get(self.running_var).data(),
                };
                g.ibn(h, nin, Some(run))
            }
        };
        let gam = g.param(store, self.ibn_gamma);
        let bet = g.param(store, self.ibn_beta);
        let h = g.channel_affine(ibn, gam, bet);
        let h = g.relu(h);
        let w2 = g.param(store, self.conv2_w);
        let b2 = g.param(store, self.conv2_b);
        let h = g.patch_conv(h, w2, b2, self.cfg.stride_2);
        let tokens = g.channels_to_tokens(h);
        Ok(TokenizerOutput { tokens, ibn })
    }

    /// Exponential moving update of the batch-normalization running
    /// statistics from a train-mode pass (unbiased variance).
    pub fn update_running_stats(&self, g: &Graph, out: &TokenizerOutput, store: &mut ParamStore) {
        let Some((mean, var)) = g.ibn_batch_stats(out.ibn) else { return };
        let s = g.value(out.ibn).shape();
        let n = (s[0] * s[2] * s[3]) as f64;
        let correction = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let mean = mean.to_vec();
        let var = var.to_vec();
        let rm = store.get_mut(self.running_mean).data_mut();
        for (r, m) in rm.iter_mut().zip(&mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
        }
        let rv = store.get_mut(self.running_var).data_mut();
        for (r, v) in rv.iter_mut().zip(&var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * correction;
        }
    }

    /// Full IBN block (normalization plus affine) on raw stem features.
    pub fn ibn_normalize(&self, store: &ParamStore, features: &Tensor, mode: Mode) -> Result<Tensor> {
        let pre = ibn_normalize(
            features,
            self.cfg.ibn_split,
            mode,
            Some((store.get(self.running_mean).data(), store.get(self.running_var).data())),
        )?;
        let mut g = Graph::new();
        let x = g.constant(pre);
        let gam = g.param(store, self.ibn_gamma);
        let bet = g.param(store, self.ibn_beta);
        let y = g.channel_affine(x, gam, bet);
        Ok(g.value(y).clone())
    }

    /// Tokens of a single image in eval mode.
    pub fn image_to_tokens(&self, store: &ParamStore, img: &ImageSample, kind: ModalityKind) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let x = g.constant(images_to_tensor(&[img])?);
        let out = self.forward(&mut g, store, x, Mode::Eval)?;
        let t = g.value(out.tokens);
        let (k, d) = (t.shape()[1], t.shape()[2]);
        Ok(TokenSequence { tokens: t.clone().reshape(&[k, d]), kind, valid_mask: vec![true; k] })
    }
}

/// Replaceable text encoder, used as a frozen feature extractor.
pub trait ExternalTextEncoder: Send + Sync {
    /// `[text_len, D]` embedding rows; rows at padding positions are ignored.
    fn encode(&self, text: &TextSample) -> Tensor;
}

/// Token-embedding table for text, or an external encoder.
#[derive(Clone)]
pub struct TextEmbedder {
    pub table: ParamId,
    external: Option<Arc<dyn ExternalTextEncoder>>,
    cfg: TokenizerConfig,
}

impl core::fmt::Debug for TextEmbedder {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("TextEmbedder")
            .field("table", &self.table)
            .field("external", &self.external.is_some())
            .finish()
    }
}

impl TextEmbedder {
    pub fn new(store: &mut ParamStore, cfg: &TokenizerConfig, rng: &mut Rng) -> Self {
        let table = uniform(rng, &[cfg.vocab_size, cfg.embed_dim], 1.0);
        TextEmbedder {
            table: store.add("text.embedding", Component::TextEmbedding, table),
            external: None,
            cfg: cfg.clone(),
        }
    }

    pub fn set_external(&mut self, encoder: Option<Arc<dyn ExternalTextEncoder>>) {
        self.external = encoder;
    }

    pub fn has_external(&self) -> bool {
        self.external.is_some()
    }

    fn check(&self, text: &TextSample) -> Result<()> {
        if text.token_ids.len() != self.cfg.text_len {
            return Err(Error::DimMismatch { expected: self.cfg.text_len, got: text.token_ids.len() });
        }
        for (position, &id) in text.token_ids.iter().enumerate() {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::OutOfVocabulary { id, position });
            }
        }
        let valid = text.valid_len();
        if text.token_ids[valid..].iter().any(|&t| t != PAD_ID) {
            return Err(Error::ShapeMismatch("padding ids must form a suffix".into()));
        }
        Ok(())
    }

    /// Embeds texts into `[N, L, D]`; padding rows are zero.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, texts: &[&TextSample]) -> Result<Var> {
        let (l, d) = (self.cfg.text_len, self.cfg.embed_dim);
        for t in texts {
            self.check(t)?;
        }
        if let Some(ext) = &self.external {
            let mut data = Vec::with_capacity(texts.len() * l * d);
            for t in texts {
                let e = ext.encode(t);
                if e.shape() != [l, d] {
                    return Err(Error::ShapeMismatch(format!("external text encoder returned {:?}", e.shape())));
                }
                let valid = t.valid_len();
                for r in 0..l {
                    if r < valid {
                        data.extend_from_slice(e.row(r));
                    } else {
                        data.extend(std::iter::repeat_n(0.0, d));
                    }
                }
            }
            return Ok(g.constant(Tensor::from_vec(&[texts.len(), l, d], data)));
        }
        let table = g.param(store, self.table);
        let terms = texts
            .iter()
            .flat_map(|t| {
                let valid = t.valid_len();
                t.token_ids
                    .iter()
                    .enumerate()
                    .map(move |(p, &id)| if p < valid { vec![RowTerm::copy(0, id as usize)] } else { Vec::new() })
            })
            .collect();
        Ok(g.row_combine(&[table], terms, &[texts.len(), l, d]))
    }

    pub fn text_to_tokens(&self, store: &ParamStore, text: &TextSample) -> Result<TokenSequence> {
        let mut g = Graph::new();
        let v = self.forward(&mut g, store, &[text])?;
        let (l, d) = (self.cfg.text_len, self.cfg.embed_dim);
        let valid = text.valid_len();
        Ok(TokenSequence {
            tokens: g.value(v).clone().reshape(&[l, d]),
            kind: ModalityKind::T,
            valid_mask: (0..l).map(|p| p < valid).collect(),
        })
    }
}
