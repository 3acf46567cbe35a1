//! Subcommands of the `umm` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use umm_core::datamodel::generate_corpus;
use umm_core::retrieval::{embed_records, evaluate, protocol_records, EvalProtocol};
use umm_core::training::{split_views, train};
use umm_core::{ModalityKind, ModalitySet};

use crate::archive::{load_archive, save_archive};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{RunConfig, SEED_ENV};
use crate::corpus_io::{load_corpus, save_corpus};
use crate::error::{Result, UmmError};
use crate::report::{save_report, save_train_log};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Debug, Parser)]
#[command(name = "umm", version, about = "Cross-modal person re-identification on a procedural corpus")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `UMM_SEED` and the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the procedural corpus into a directory.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes `checkpoint/` and `train_log.jsonl` under `--out`.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed tuples carrying all `--modalities` into an archive.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated kinds, e.g. `S,T`.
        #[arg(long, default_value = "R")]
        modalities: String,
        /// Kinds to synthesize and fuse on top, e.g. `I`.
        #[arg(long, default_value = "")]
        synthesize: String,
        /// Restrict to these views (comma-separated); all views when omitted.
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a protocol from a checkpoint or from two archives.
    Eval {
        #[arg(long, conflicts_with_all = ["query", "gallery"])]
        checkpoint: Option<PathBuf>,
        /// Corpus directory, required with `--checkpoint`.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "gallery")]
        query: Option<PathBuf>,
        #[arg(long, requires = "query")]
        gallery: Option<PathBuf>,
        /// One of r2r, i2r, s2r, t2r, st2r.
        #[arg(long)]
        protocol: Option<String>,
        #[arg(long, value_enum)]
        gallery_synthesis: Option<Switch>,
        /// Query views with a checkpoint; the held-out views when omitted.
        #[arg(long)]
        views: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load_or_default(common.config.as_deref())?;
    let env = std::env::var(SEED_ENV).ok();
    cfg.apply_seed(common.seed, env.as_deref())?;
    Ok(cfg)
}

pub fn parse_kinds(s: &str) -> Result<Vec<ModalityKind>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| UmmError::Usage(format!("unknown modality {p:?}"))))
        .collect()
}

fn parse_views(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse().map_err(|_| UmmError::Usage(format!("bad view index {p:?}"))))
        .collect()
}

pub fn report_stem(protocol: &str, gallery_synthesis: bool) -> String {
    format!("eval_{protocol}_gs_{}", if gallery_synthesis { "on" } else { "off" })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { common, out } => {
            let cfg = run_config(&common)?;
            let corpus = generate_corpus(&cfg.corpus_spec())?;
            save_corpus(&corpus, &out)
        }
        Command::Train { common, corpus, out } => {
            let cfg = run_config(&common)?;
            let corpus = load_corpus(&corpus)?;
            let tcfg = cfg.train_config();
            let (model, log) = train(&cfg.model, &tcfg, &corpus)?;
            save_checkpoint(&out.join(CHECKPOINT_DIR), &cfg, tcfg.total_epochs(), &model)?;
            save_train_log(&out.join(TRAIN_LOG), &log)
        }
        Command::Embed { checkpoint, corpus, modalities, synthesize, views, out } => {
            let ck = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&corpus)?;
            let kinds = parse_kinds(&modalities)?;
            if kinds.is_empty() {
                return Err(UmmError::Usage("--modalities must name at least one kind".into()));
            }
            let cues = parse_kinds(&synthesize)?;
            let views = views.as_deref().map(parse_views).transpose()?;
            let records = embed_records(&ck.model, &corpus, ModalitySet::from_kinds(&kinds), &cues, views.as_deref())?;
            save_archive(&records, &out)
        }
        Command::Eval { checkpoint, corpus, query, gallery, protocol, gallery_synthesis, views, out } => {
            let gs = gallery_synthesis.map(|s| s == Switch::On);
            if let Some(ck_dir) = checkpoint {
                let ck = load_checkpoint(&ck_dir)?;
                let corpus_dir = corpus.ok_or_else(|| UmmError::Usage("--corpus is required with --checkpoint".into()))?;
                let corpus = load_corpus(&corpus_dir)?;
                let cfg = ck.config;
                let p = cfg.protocol(protocol.as_deref(), gs)?;
                let views = match views {
                    Some(v) => parse_views(&v)?,
                    None => split_views(&corpus, &cfg.train_config()).1,
                };
                let (q, g) = protocol_records(&ck.model, &corpus, &p, Some(&views))?;
                let report = evaluate(&q, &g, &p)?;
                let name = protocol.unwrap_or_else(|| cfg.eval.protocol.clone());
                save_report(&out, &report_stem(&name, p.gallery_synthesis), Some(&cfg), &report)
            } else {
                let (Some(qp), Some(gp)) = (query, gallery) else {
                    return Err(UmmError::Usage("give --checkpoint or both --query and --gallery".into()));
                };
                let name = protocol.unwrap_or_else(|| "r2r".into());
                let p = EvalProtocol::named(&name, gs.unwrap_or(false))?;
                let report = evaluate(&load_archive(&qp)?, &load_archive(&gp)?, &p)?;
                save_report(&out, &report_stem(&name, p.gallery_synthesis), None, &report)
            }
        }
    }
}
