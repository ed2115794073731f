//! CSV tables and key-value sidecars. Float columns use Rust's shortest
//! round-trip formatting, so reruns produce byte-identical bodies.

use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crate::certify::CertResult;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::objectives::StepReport;
use crate::pipeline::ResultRow;

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

/// Writes a header and rows as RFC-4180 CSV.
pub fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    ensure_parent(path)?;
    let csv_err = |e: csv::Error| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`] back as header plus string rows.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let header = r.headers().map_err(|e| Error::format(path, e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

/// `key = value` lines.
pub fn write_kv(path: &Path, entries: &[(String, String)]) -> Result<()> {
    ensure_parent(path)?;
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut header = vec!["label".to_string()];
    header.extend((0..ds.dim()).map(|j| format!("x{j}")));
    let rows: Vec<Vec<String>> = (0..ds.len())
        .map(|i| {
            let mut r = vec![ds.y(i).to_string()];
            r.extend(ds.x(i).iter().map(f64::to_string));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    write_csv(path, &h, &rows)
}

pub fn write_epoch_log(path: &Path, losses: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> =
        losses.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), l.to_string()]).collect();
    write_csv(path, &["epoch", "loss"], &rows)
}

pub fn write_search_log(path: &Path, log: &[StepReport]) -> Result<()> {
    let rows: Vec<Vec<String>> = log
        .iter()
        .enumerate()
        .map(|(i, r)| {
            vec![
                (i + 1).to_string(),
                r.stab.to_string(),
                r.ratio.to_string(),
                r.consis.to_string(),
                r.l1.to_string(),
                r.l1_raw.to_string(),
                r.composite.to_string(),
                r.grad_norm.to_string(),
            ]
        })
        .collect();
    write_csv(
        path,
        &["step", "L_stab", "L_ratio", "L_consis", "L_1", "L_1_raw", "composite", "grad_norm"],
        &rows,
    )
}

/// Per-sample certification table.
pub fn write_cert_table(path: &Path, cert: &CertResult) -> Result<()> {
    let rows: Vec<Vec<String>> = cert
        .rows
        .iter()
        .map(|r| {
            vec![
                r.sample_id.to_string(),
                r.label.to_string(),
                r.predicted.to_string(),
                r.d.to_string(),
                r.eps_hat.to_string(),
                r.best_t.to_string(),
                r.certified.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["sample_id", "label", "predicted", "d", "eps_hat", "best_t", "certified"], &rows)
}

/// Certification summary sidecar with the configuration echoed.
pub fn write_cert_summary(
    path: &Path,
    cert: &CertResult,
    accuracy: f64,
    ratio: f64,
    cfg: &ExperimentConfig,
) -> Result<()> {
    let mut entries = vec![
        ("pca".to_string(), cert.pca.to_string()),
        ("clean_accuracy_eval".to_string(), cert.clean_accuracy.to_string()),
        ("accuracy_test".to_string(), accuracy.to_string()),
        ("pruning_ratio".to_string(), ratio.to_string()),
        ("paley_confidence".to_string(), cert.paley_confidence.to_string()),
        ("samples".to_string(), cert.rows.len().to_string()),
    ];
    entries.extend(cfg.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    write_kv(path, &entries)
}

pub fn write_summary(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                r.mode.as_str().to_string(),
                r.acc.to_string(),
                r.pca.to_string(),
                r.ratio.to_string(),
                r.seed.to_string(),
            ]
        })
        .collect();
    write_csv(path, &["method", "mode", "acc", "pca", "ratio", "seed"], &body)
}

/// Machine-readable outcome of one command. The only file that carries
/// wall-clock data.
pub fn write_status(
    dir: &Path,
    command: &str,
    outcome: &std::result::Result<(), &Error>,
    started: SystemTime,
) -> Result<()> {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let finished = SystemTime::now();
    let mut entries = vec![
        ("command".to_string(), command.to_string()),
        ("status".to_string(), if outcome.is_ok() { "ok" } else { "error" }.to_string()),
        (
            "exit_code".to_string(),
            outcome.as_ref().err().map_or(0, |e| e.category().exit_code()).to_string(),
        ),
        ("started_unix".to_string(), format!("{:.3}", secs(started))),
        ("finished_unix".to_string(), format!("{:.3}", secs(finished))),
    ];
    if let Err(e) = outcome {
        entries.push(("error".to_string(), e.to_string().replace('\n', " ")));
    }
    write_kv(&dir.join(format!("status_{command}.txt")), &entries)
}
