//! Experiment reports and their on-disk form: `report.json`, `metrics.csv`
//! and `histograms.csv`, each replaced atomically.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dynpull::PullPolicy;
use crate::error::{Error, Result};
use crate::fl::{ClientPersistence, FinetuneReport, RoundReport};
use crate::metrics::{norm_histogram, EvalResult};

/// Evaluation of one non-federated model (a baseline, a fine-tuning stage, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub stage: usize,
    pub evals: Vec<EvalResult>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BandwidthTotals {
    pub pulled_params: u64,
    pub pushed_params: u64,
    pub pulled_bytes: u64,
    pub pushed_bytes: u64,
}

impl BandwidthTotals {
    pub fn of_rounds(rounds: &[RoundReport]) -> Self {
        let mut t = BandwidthTotals::default();
        for c in rounds.iter().flat_map(|r| &r.clients) {
            t.pulled_params += c.pull.params_sent;
            t.pushed_params += c.push.params_sent;
            t.pulled_bytes += c.pull.bytes_sent;
            t.pushed_bytes += c.push.bytes_sent;
        }
        t
    }

    pub fn exchanged_params(&self) -> u64 {
        self.pulled_params + self.pushed_params
    }
}

/// One trained configuration inside an experiment (e.g. one pull policy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub label: String,
    pub policy: Option<PullPolicy>,
    /// SHA-256 of the checkpoint this run started from.
    pub start_checkpoint: Option<String>,
    pub rounds: Vec<RoundReport>,
    /// Final server evaluation for federated runs, one entry per model otherwise.
    pub evaluations: Vec<ModelEvaluation>,
    pub post_finetune: Vec<FinetuneReport>,
    pub persistence: Vec<ClientPersistence>,
    pub bandwidth: BandwidthTotals,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    /// Wall-clock seconds since the Unix epoch; the only nondeterministic field.
    pub timestamp: String,
    pub config: serde_json::Value,
    pub runs: Vec<RunReport>,
}

impl ExperimentReport {
    pub fn run(&self, label: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.label == label)
    }

    fn qualify(&self, run: &RunReport, client: &str) -> String {
        if self.runs.len() > 1 {
            format!("{}/{client}", run.label)
        } else {
            client.to_string()
        }
    }
}

pub fn timestamp_now() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    secs.to_string()
}

#[derive(Serialize)]
struct MetricsRow<'a> {
    round: usize,
    client_id: &'a str,
    test_domain: &'a str,
    bleu: f64,
    token_accuracy: f64,
    params_pulled: u64,
    params_pushed: u64,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    round: usize,
    client_id: &'a str,
    group: &'a str,
    bucket_lower: f64,
    count: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes)
        .and_then(|_| f.sync_all())
        .map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn csv_bytes<F>(fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> Result<()>,
{
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        fill(&mut w)?;
        w.flush().map_err(|e| Error::Csv(e.into()))?;
    }
    Ok(buf)
}

/// Per-round client evaluations for federated runs; per-model evaluations
/// (with `stage` as the round) otherwise.
pub fn metrics_csv(report: &ExperimentReport) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        for run in &report.runs {
            if run.rounds.is_empty() {
                for m in &run.evaluations {
                    let id = report.qualify(run, &m.model);
                    for e in &m.evals {
                        w.serialize(MetricsRow {
                            round: m.stage,
                            client_id: &id,
                            test_domain: &e.domain,
                            bleu: e.bleu,
                            token_accuracy: e.token_accuracy,
                            params_pulled: 0,
                            params_pushed: 0,
                        })?;
                    }
                }
            }
            for r in &run.rounds {
                for c in &r.clients {
                    let id = report.qualify(run, &c.client_id);
                    for e in &c.evals {
                        w.serialize(MetricsRow {
                            round: r.round,
                            client_id: &id,
                            test_domain: &e.domain,
                            bleu: e.bleu,
                            token_accuracy: e.token_accuracy,
                            params_pulled: c.pull.params_sent,
                            params_pushed: c.push.params_sent,
                        })?;
                    }
                }
            }
        }
        Ok(())
    })
}

/// Delta-norm histograms of every client pull that carried deltas.
pub fn histograms_csv(report: &ExperimentReport, bucket_width: f64) -> Result<Vec<u8>> {
    csv_bytes(|w| {
        for run in &report.runs {
            for r in &run.rounds {
                for c in &r.clients {
                    if c.selection.deltas.is_empty() {
                        continue;
                    }
                    let id = report.qualify(run, &c.client_id);
                    for h in norm_histogram(&c.selection.deltas, bucket_width)? {
                        for (lower, count) in &h.buckets {
                            w.serialize(HistogramRow {
                                round: r.round,
                                client_id: &id,
                                group: h.group.as_str(),
                                bucket_lower: *lower,
                                count: *count,
                            })?;
                        }
                    }
                }
            }
        }
        Ok(())
    })
}

/// Writes `report.json`, `metrics.csv` and `histograms.csv` into `dir`
/// (created if needed). Each file is written to a temporary name and renamed.
pub fn report_write(report: &ExperimentReport, dir: &Path, bucket_width: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    let files = [
        ("report.json", json),
        ("metrics.csv", metrics_csv(report)?),
        ("histograms.csv", histograms_csv(report, bucket_width)?),
    ];
    let mut paths = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    Ok(paths)
}

/// `report.json` with the timestamp blanked, for reproducibility checks.
pub fn without_timestamp(json: &str) -> Result<String> {
    let mut v: serde_json::Value = serde_json::from_str(json)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    Ok(serde_json::to_string(&v)?)
}
