//! Per-step metrics: `metrics.jsonl` (one report per line) and a flat
//! `metrics.csv` with the same content. Both are appended step by step and
//! flushed after each row, so a crashed run keeps everything it logged.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::StepReport;

pub const JSONL_FILE: &str = "metrics.jsonl";
pub const CSV_FILE: &str = "metrics.csv";

/// CSV form of a report; per-critic losses are `;`-joined.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    step: usize,
    mean_return: f64,
    policy_entropy: f64,
    critic_losses: String,
    sigma_mean: f64,
    sigma_q10: f64,
    sigma_q50: f64,
    sigma_q90: f64,
    clip_fraction: f64,
    surrogate: f64,
    entropy_term: f64,
    policy_loss: f64,
    masked_adv_count: usize,
    filtered_ent_count: usize,
    batch_tokens: usize,
    critic_tokens: usize,
    wall_time_ms: u64,
}

impl From<&StepReport> for CsvRow {
    fn from(r: &StepReport) -> Self {
        let losses: Vec<String> = r.critic_losses.iter().map(|l| format!("{l:?}")).collect();
        CsvRow {
            step: r.step,
            mean_return: r.mean_return,
            policy_entropy: r.policy_entropy,
            critic_losses: losses.join(";"),
            sigma_mean: r.sigma_mean,
            sigma_q10: r.sigma_q10,
            sigma_q50: r.sigma_q50,
            sigma_q90: r.sigma_q90,
            clip_fraction: r.clip_fraction,
            surrogate: r.surrogate,
            entropy_term: r.entropy_term,
            policy_loss: r.policy_loss,
            masked_adv_count: r.masked_adv_count,
            filtered_ent_count: r.filtered_ent_count,
            batch_tokens: r.batch_tokens,
            critic_tokens: r.critic_tokens,
            wall_time_ms: r.wall_time_ms,
        }
    }
}

impl TryFrom<CsvRow> for StepReport {
    type Error = Error;

    fn try_from(r: CsvRow) -> Result<Self> {
        let critic_losses = if r.critic_losses.is_empty() {
            Vec::new()
        } else {
            r.critic_losses
                .split(';')
                .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(format!("critic loss {s:?}: {e}"))))
                .collect::<Result<_>>()?
        };
        Ok(StepReport {
            step: r.step,
            mean_return: r.mean_return,
            policy_entropy: r.policy_entropy,
            critic_losses,
            sigma_mean: r.sigma_mean,
            sigma_q10: r.sigma_q10,
            sigma_q50: r.sigma_q50,
            sigma_q90: r.sigma_q90,
            clip_fraction: r.clip_fraction,
            surrogate: r.surrogate,
            entropy_term: r.entropy_term,
            policy_loss: r.policy_loss,
            masked_adv_count: r.masked_adv_count,
            filtered_ent_count: r.filtered_ent_count,
            batch_tokens: r.batch_tokens,
            critic_tokens: r.critic_tokens,
            wall_time_ms: r.wall_time_ms,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

/// Appends reports to both metric files in a run directory.
pub struct MetricsWriter {
    jsonl: File,
    csv: csv::Writer<File>,
    jsonl_path: PathBuf,
    csv_path: PathBuf,
}

impl MetricsWriter {
    /// Opens (creating if needed) both files for appending. Fails up front
    /// if the directory is not writable.
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let jsonl_path = dir.join(JSONL_FILE);
        let csv_path = dir.join(CSV_FILE);
        let jsonl = OpenOptions::new().create(true).append(true).open(&jsonl_path)?;
        let fresh = std::fs::metadata(&csv_path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(&csv_path)?;
        let csv = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self {
            jsonl,
            csv,
            jsonl_path,
            csv_path,
        })
    }

    pub fn append(&mut self, report: &StepReport) -> Result<()> {
        let line = serde_json::to_string(report)?;
        writeln!(self.jsonl, "{line}")?;
        self.jsonl.flush()?;
        self.csv.serialize(CsvRow::from(report)).map_err(csv_err)?;
        self.csv.flush()?;
        Ok(())
    }

    pub fn paths(&self) -> (&Path, &Path) {
        (&self.jsonl_path, &self.csv_path)
    }
}

pub fn write_metrics(dir: &Path, reports: &[StepReport]) -> Result<()> {
    let mut w = MetricsWriter::open(dir)?;
    reports.iter().try_for_each(|r| w.append(r))
}

pub fn read_metrics_jsonl(path: &Path) -> Result<Vec<StepReport>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<StepReport>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader
        .deserialize::<CsvRow>()
        .map(|row| row.map_err(csv_err).and_then(StepReport::try_from))
        .collect()
}

/// Dispatches on the extension (`.csv`, otherwise JSON lines).
pub fn read_metrics(path: &Path) -> Result<Vec<StepReport>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_metrics_csv(path),
        _ => read_metrics_jsonl(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(step: usize, losses: Vec<f64>) -> StepReport {
        StepReport {
            step,
            mean_return: 0.1 + step as f64 / 3.0,
            policy_entropy: std::f64::consts::LN_2,
            critic_losses: losses,
            sigma_mean: 1e-17,
            sigma_q10: 0.0,
            sigma_q50: 1.0 / 7.0,
            sigma_q90: 123456.789,
            clip_fraction: 0.25,
            surrogate: -0.3,
            entropy_term: 2.0f64.sqrt(),
            policy_loss: -1e300,
            masked_adv_count: 3,
            filtered_ent_count: 4,
            batch_tokens: 20,
            critic_tokens: 20,
            wall_time_ms: 7,
        }
    }

    #[test]
    fn both_formats_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let reports = vec![report(0, vec![0.5, 1.0 / 3.0]), report(1, vec![]), report(2, vec![f64::MIN_POSITIVE])];
        write_metrics(dir.path(), &reports[..1]).unwrap();
        write_metrics(dir.path(), &reports[1..]).unwrap();
        let back_json = read_metrics(&dir.path().join(JSONL_FILE)).unwrap();
        let back_csv = read_metrics(&dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(back_json, reports);
        assert_eq!(back_csv, reports);
        let csv_text = std::fs::read_to_string(dir.path().join(CSV_FILE)).unwrap();
        assert_eq!(csv_text.lines().filter(|l| l.starts_with("step")).count(), 1);
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "{\"step\": 0}\n").unwrap();
        let msg = read_metrics(&p).unwrap_err().to_string();
        assert!(msg.contains(":1:"), "{msg}");
    }
}
