//! Dataset evaluation: ERLE on far-end-only clips, SI-SDR on double talk.
//!
//! Processed files are looked up as `<processed>/<id>_out.wav`. When an
//! embeddings directory is given, `<id>_out.efem` and `<id>_near.efem` in it
//! add an embedding-distance column.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::dsp::wav::{read_wav, WavError};
use crate::dsp::SpectrumFrame;
use crate::metrics::{embedding_distance, erle_total, si_sdr, EmbeddingFile};
pub use crate::par::{par_map, worker_count, THREADS_ENV};
use crate::scalar::Real;
use crate::sim::{manifest_root, read_manifest, ManifestRow, Scenario, SimError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Manifest(#[from] SimError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("report: {0}")]
    Report(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub scenario: Scenario,
    pub erle_db: Option<f64>,
    pub si_sdr_db: Option<f64>,
    pub embedding_dist: Option<f64>,
    /// `ok`, or why the row is excluded from the aggregates.
    pub status: String,
}

impl EvalRow {
    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub scenario: Scenario,
    pub metric: &'static str,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl EvalReport {
    /// Aggregates are a pure function of the `ok` rows.
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut groups: BTreeMap<(u8, &'static str), (Scenario, Vec<f64>)> = BTreeMap::new();
        for r in rows.iter().filter(|r| r.is_ok()) {
            let key = r.scenario as u8;
            for (metric, v) in [("erle_db", r.erle_db), ("si_sdr_db", r.si_sdr_db), ("embedding_dist", r.embedding_dist)] {
                if let Some(v) = v {
                    groups.entry((key, metric)).or_insert_with(|| (r.scenario, Vec::new())).1.push(v);
                }
            }
        }
        let aggregates = groups
            .into_iter()
            .map(|((_, metric), (scenario, mut v))| Aggregate {
                scenario,
                metric,
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                median: median(&mut v),
            })
            .collect();
        Self { rows, aggregates }
    }

    pub fn aggregate(&self, scenario: Scenario, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.scenario == scenario && a.metric == metric)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| EvalError::Report(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
        for a in &self.aggregates {
            w.serialize(a).map_err(|e| EvalError::Report(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let bad = self.rows.iter().filter(|r| !r.is_ok()).count();
        writeln!(f, "{} rows ({} excluded)", self.rows.len(), bad)?;
        for a in &self.aggregates {
            writeln!(f, "{:<12} {:<15} n={:<5} mean={:>8.3} median={:>8.3}", a.scenario, a.metric, a.count, a.mean, a.median)?;
        }
        Ok(())
    }
}

pub fn processed_path(processed_dir: &Path, id: &str) -> PathBuf {
    processed_dir.join(format!("{id}_out.wav"))
}

fn eval_row(row: &ManifestRow, root: &Path, processed: &Path, embeddings: Option<&Path>) -> EvalRow {
    let mut out = EvalRow {
        id: row.id.clone(),
        scenario: row.scenario,
        erle_db: None,
        si_sdr_db: None,
        embedding_dist: None,
        status: "ok".into(),
    };
    let load = |p: PathBuf| read_wav::<f64>(&p).map(|a| a.into_samples());
    let result: Result<(), String> = (|| {
        let est = load(processed_path(processed, &row.id)).map_err(|e: WavError| format!("missing output: {e}"))?;
        let mic = load(root.join(&row.mic)).map_err(|e| format!("missing mic: {e}"))?;
        if est.len() != mic.len() {
            return Err(format!("output has {} samples, mic has {}", est.len(), mic.len()));
        }
        match row.scenario {
            Scenario::FarendOnly => out.erle_db = Some(erle_total(&mic, &est)),
            _ => {
                let near = load(root.join(&row.near)).map_err(|e| format!("missing near: {e}"))?;
                out.si_sdr_db = Some(si_sdr(&est, &near).map_err(|e| e.to_string())?);
            }
        }
        if let Some(dir) = embeddings {
            let a = EmbeddingFile::read(dir.join(format!("{}_out.efem", row.id)));
            let b = EmbeddingFile::read(dir.join(format!("{}_near.efem", row.id)));
            if let (Ok(a), Ok(b)) = (a, b) {
                out.embedding_dist = Some(embedding_distance(&a, &b).map_err(|e| e.to_string())?);
            }
        }
        Ok(())
    })();
    if let Err(msg) = result {
        out.status = msg;
        out.erle_db = None;
        out.si_sdr_db = None;
        out.embedding_dist = None;
    }
    out
}

/// Score every manifest row against its processed output.
pub fn evaluate(processed_dir: &Path, manifest: &Path, embeddings: Option<&Path>) -> Result<EvalReport, EvalError> {
    let rows = read_manifest(manifest)?;
    let root = manifest_root(manifest);
    let scored = par_map(&rows, worker_count(), |r| eval_row(r, &root, processed_dir, embeddings));
    for r in scored.iter().filter(|r| !r.is_ok()) {
        log::warn!("{}: {}", r.id, r.status);
    }
    Ok(EvalReport::from_rows(scored))
}

/// Log-magnitude spectrogram as CSV: one row per frame, one column per bin (dB).
pub fn write_spectrogram_csv<T: Real>(path: impl AsRef<Path>, frames: &[SpectrumFrame<T>]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| EvalError::Report(e.to_string()))?;
    for f in frames {
        let row: Vec<String> = f.power().iter().map(|p| format!("{:.3}", 10.0 * (p.as_f64() + 1e-12).log10())).collect();
        w.write_record(&row).map_err(|e| EvalError::Report(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(id: &str, scenario: Scenario, erle: Option<f64>, sdr: Option<f64>, ok: bool) -> EvalRow {
        EvalRow {
            id: id.into(),
            scenario,
            erle_db: erle,
            si_sdr_db: sdr,
            embedding_dist: None,
            status: if ok { "ok".into() } else { "missing".into() },
        }
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let rows = vec![
            row("a", Scenario::FarendOnly, Some(10.0), None, true),
            row("b", Scenario::FarendOnly, Some(30.0), None, true),
            row("c", Scenario::FarendOnly, Some(20.0), None, true),
            row("d", Scenario::FarendOnly, None, None, false),
            row("e", Scenario::DoubleTalk, None, Some(4.0), true),
            row("f", Scenario::DoubleTalk, None, Some(6.0), true),
        ];
        let r = EvalReport::from_rows(rows.clone());
        let erle = r.aggregate(Scenario::FarendOnly, "erle_db").unwrap();
        assert_eq!((erle.count, erle.mean, erle.median), (3, 20.0, 20.0));
        let sdr = r.aggregate(Scenario::DoubleTalk, "si_sdr_db").unwrap();
        assert_eq!((sdr.count, sdr.mean, sdr.median), (2, 5.0, 5.0));
        assert_eq!(EvalReport::from_rows(rows), r);
    }
}
