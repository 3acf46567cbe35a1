//! The single JSON run configuration. Unknown keys are rejected at every
//! level.

use std::path::Path;

use serde::{Deserialize, Serialize};
use umm_core::datamodel::{Availability, CorpusSpec};
use umm_core::retrieval::{EvalProtocol, SelfExclusion};
use umm_core::training::TrainConfig;
use umm_core::ModelConfig;

use crate::error::{Result, UmmError};
use crate::fsutil;

pub const CONFIG_VERSION: u32 = 1;
pub const SEED_ENV: &str = "UMM_SEED";

/// Corpus shape; the seed comes from [`RunConfig::seed`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub num_identities: usize,
    pub views_per_identity: usize,
    pub availability: Availability,
    pub image_size: usize,
    pub text_len: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let s = CorpusSpec::default();
        CorpusSection {
            num_identities: s.num_identities,
            views_per_identity: s.views_per_identity,
            availability: s.availability,
            image_size: s.image_size,
            text_len: s.text_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Protocol used by `eval` when `--protocol` is not given.
    pub protocol: String,
    pub gallery_synthesis: bool,
    pub self_exclusion: SelfExclusion,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { protocol: "r2r".into(), gallery_synthesis: false, self_exclusion: SelfExclusion::SameIdentitySameView }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub config_version: u32,
    /// Master seed for corpus generation and training.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub corpus: CorpusSection,
    #[serde(default)]
    pub model: ModelConfig,
    /// `train.seed` is ignored; the master seed is used.
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn default_seed() -> u64 {
    CorpusSpec::default().seed
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            config_version: CONFIG_VERSION,
            seed: default_seed(),
            corpus: CorpusSection::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSection::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let cfg: RunConfig = fsutil::parse_json(path, text)?;
        if cfg.config_version != CONFIG_VERSION {
            return Err(UmmError::VersionMismatch { what: "config", expected: CONFIG_VERSION, found: cfg.config_version });
        }
        cfg.validate().map_err(|e| UmmError::ConfigParse { path: path.to_path_buf(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(path, &fsutil::read_string(path)?)
    }

    /// `path` when given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> umm_core::Result<()> {
        self.corpus_spec().validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.protocol(None, None)?.validate()?;
        let tk = &self.model.tokenizer;
        if tk.image_size != self.corpus.image_size || tk.text_len != self.corpus.text_len {
            return Err(umm_core::Error::InvalidConfig(
                "corpus image_size/text_len must match the tokenizer configuration".into(),
            ));
        }
        Ok(())
    }

    /// Applies the seed precedence: flag, then `UMM_SEED`, then the file.
    pub fn apply_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(s) = env {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| UmmError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
        }
        self.train.seed = self.seed;
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let c = &self.corpus;
        CorpusSpec {
            num_identities: c.num_identities,
            views_per_identity: c.views_per_identity,
            availability: c.availability,
            seed: self.seed,
            image_size: c.image_size,
            text_len: c.text_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    /// The configured protocol with optional overrides.
    pub fn protocol(&self, name: Option<&str>, gallery_synthesis: Option<bool>) -> umm_core::Result<EvalProtocol> {
        let mut p = EvalProtocol::named(
            name.unwrap_or(&self.eval.protocol),
            gallery_synthesis.unwrap_or(self.eval.gallery_synthesis),
        )?;
        p.self_exclusion = self.eval.self_exclusion;
        Ok(p)
    }
}
