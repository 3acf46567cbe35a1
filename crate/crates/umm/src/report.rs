//! Evaluation report and training log files.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use umm_core::retrieval::EvalReport;
use umm_core::training::{EpochRecord, TrainLog};

use crate::config::RunConfig;
use crate::error::Result;
use crate::fsutil;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<RunConfig>,
    pub report: EvalReport,
}

pub fn cmc_csv(report: &EvalReport) -> String {
    let mut s = String::from("k,cmc\n");
    for (i, v) in report.cmc.iter().enumerate() {
        writeln!(s, "{},{}", i + 1, v).expect("write to string");
    }
    s
}

/// Writes `{stem}.json` and `{stem}_cmc.csv` into `dir`.
pub fn save_report(dir: &Path, stem: &str, config: Option<&RunConfig>, report: &EvalReport) -> Result<()> {
    let file = ReportFile { config: config.cloned(), report: report.clone() };
    fsutil::write_atomic(&dir.join(format!("{stem}.json")), &fsutil::to_json(&file))?;
    fsutil::write_atomic(&dir.join(format!("{stem}_cmc.csv")), cmc_csv(report).as_bytes())
}

pub fn load_report(path: &Path) -> Result<ReportFile> {
    fsutil::parse_json(path, &fsutil::read_string(path)?)
}

pub fn encode_train_log(log: &TrainLog) -> Vec<u8> {
    let mut out = Vec::new();
    for r in &log.records {
        serde_json::to_writer(&mut out, r).expect("epoch record");
        out.push(b'\n');
    }
    out
}

pub fn save_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    fsutil::write_atomic(path, &encode_train_log(log))
}

pub fn load_train_log(path: &Path) -> Result<TrainLog> {
    let text = fsutil::read_string(path)?;
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| fsutil::parse_json::<EpochRecord>(path, l))
        .collect::<Result<_>>()?;
    Ok(TrainLog { records })
}
