//! Evaluation reports: a JSON TAR@FAR table and a CSV of ROC staircase
//! points per mode.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use multicolumn_core::evaluation::{far_label, EvalReport, RocCurve, TarLookup, FAR_TARGETS};
use multicolumn_core::Mode;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TarEntry {
    pub tar: f64,
    pub flagged: bool,
}

/// On-disk form of [`EvalReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub mode: String,
    pub tar_at_far: BTreeMap<String, TarEntry>,
    pub n_genuine: u64,
    pub n_impostor: u64,
    pub excluded_pairs: u64,
    pub config_hash: String,
}

impl From<&EvalReport> for ReportJson {
    fn from(r: &EvalReport) -> Self {
        Self {
            mode: r.mode.as_str().to_string(),
            tar_at_far: r
                .tar_at_far
                .iter()
                .map(|(far, l)| {
                    (
                        far_label(*far).to_string(),
                        TarEntry {
                            tar: l.tar,
                            flagged: l.flagged,
                        },
                    )
                })
                .collect(),
            n_genuine: r.n_genuine,
            n_impostor: r.n_impostor,
            excluded_pairs: r.excluded_pairs,
            config_hash: hex::encode(r.config_hash),
        }
    }
}

impl ReportJson {
    pub fn to_report(&self) -> Result<EvalReport> {
        let bad = |what: String| Error::Usage(format!("malformed report: {what}"));
        let mode: Mode = self
            .mode
            .parse()
            .map_err(|e: multicolumn_core::Error| bad(e.to_string()))?;
        let tar_at_far = FAR_TARGETS
            .iter()
            .map(|&far| {
                let e = self
                    .tar_at_far
                    .get(far_label(far))
                    .ok_or_else(|| bad(format!("missing FAR {}", far_label(far))))?;
                Ok((
                    far,
                    TarLookup {
                        tar: e.tar,
                        flagged: e.flagged,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let hash = hex::decode(&self.config_hash).map_err(|e| bad(e.to_string()))?;
        let config_hash: [u8; 32] = hash
            .try_into()
            .map_err(|_| bad("config hash is not 32 bytes".into()))?;
        Ok(EvalReport {
            mode,
            tar_at_far,
            n_genuine: self.n_genuine,
            n_impostor: self.n_impostor,
            excluded_pairs: self.excluded_pairs,
            config_hash,
        })
    }
}

pub fn report_to_json(report: &EvalReport) -> String {
    let mut s = serde_json::to_string_pretty(&ReportJson::from(report)).expect("report serializes");
    s.push('\n');
    s
}

/// `far,tar` header then one staircase point per line, LF endings.
pub fn roc_to_csv(curve: &RocCurve) -> String {
    let mut s = String::from("far,tar\n");
    for p in &curve.points {
        writeln!(s, "{},{}", p.far, p.tar).expect("writing to a String");
    }
    s
}

/// Parse a staircase CSV back into `(far, tar)` points.
pub fn parse_roc_csv(text: &str) -> Result<Vec<(f64, f64)>> {
    let bad = |line: usize| Error::Usage(format!("malformed ROC CSV at line {line}"));
    let mut lines = text.lines();
    if lines.next() != Some("far,tar") {
        return Err(bad(1));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let (far, tar) = l.split_once(',').ok_or_else(|| bad(i + 2))?;
            Ok((
                far.parse().map_err(|_| bad(i + 2))?,
                tar.parse().map_err(|_| bad(i + 2))?,
            ))
        })
        .collect()
}

/// Paths of the two files written for `mode` under `prefix`:
/// `<prefix>.<mode>.json` and `<prefix>.<mode>.csv`.
pub fn report_paths(prefix: &Path, mode: Mode) -> (PathBuf, PathBuf) {
    let base = prefix.as_os_str().to_string_lossy();
    (
        PathBuf::from(format!("{base}.{mode}.json")),
        PathBuf::from(format!("{base}.{mode}.csv")),
    )
}

/// Write the JSON and CSV for every `(report, curve)` pair.
pub fn emit_report(entries: &[(EvalReport, RocCurve)], prefix: &Path) -> Result<Vec<PathBuf>> {
    if entries.is_empty() {
        return Err(Error::Usage("no curves to report".into()));
    }
    let mut written = Vec::new();
    for (report, curve) in entries {
        let (json, csv) = report_paths(prefix, report.mode);
        fs::write(&json, report_to_json(report)).map_err(|e| Error::io(&json, e))?;
        fs::write(&csv, roc_to_csv(curve)).map_err(|e| Error::io(&csv, e))?;
        written.push(json);
        written.push(csv);
    }
    Ok(written)
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let json: ReportJson = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    json.to_report()
}
