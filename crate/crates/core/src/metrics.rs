//! Metrics rows and their CSV encoding.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const COLUMNS: [&str; 12] = [
    "wall_time",
    "round",
    "policy",
    "worker",
    "kind",
    "env_steps",
    "grad_steps",
    "episode_return",
    "loss_policy",
    "loss_value",
    "entropy",
    "curriculum",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowKind {
    Episode,
    Update,
}

/// One completed episode or one logged update of one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    /// Seconds since the round started; the lock-step tick in deterministic mode.
    pub wall_time: f64,
    pub round: u64,
    pub policy: String,
    pub worker: usize,
    pub kind: RowKind,
    /// Cumulative env steps of this worker across rounds.
    pub env_steps: u64,
    pub grad_steps: u64,
    pub episode_return: Option<f64>,
    pub loss_policy: Option<f64>,
    pub loss_value: Option<f64>,
    pub entropy: Option<f64>,
    pub curriculum: Option<f64>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Append-only CSV writer with a fixed column order.
pub struct MetricsWriter {
    out: csv::Writer<BufWriter<File>>,
}

impl MetricsWriter {
    /// Creates the file and writes the header.
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let file = File::create(path)?;
        let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(BufWriter::new(file));
        out.write_record(COLUMNS)?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn write(&mut self, rows: &[MetricsRow]) -> Result<(), MetricsError> {
        for r in rows {
            self.out.serialize(r)?;
        }
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(round: u64, kind: RowKind) -> MetricsRow {
        MetricsRow {
            wall_time: 1.5,
            round,
            policy: "p".into(),
            worker: 3,
            kind,
            env_steps: 10,
            grad_steps: 2,
            episode_return: (kind == RowKind::Episode).then_some(12.25),
            loss_policy: (kind == RowKind::Update).then_some(-0.1),
            loss_value: None,
            entropy: None,
            curriculum: Some(0.05),
        }
    }

    #[test]
    fn empty_run_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        MetricsWriter::create(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), format!("{}\n", COLUMNS.join(",")));
        assert!(read_metrics(&p).unwrap().is_empty());
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![row(0, RowKind::Episode), row(1, RowKind::Update)];
        let mut w = MetricsWriter::create(&p).unwrap();
        w.write(&rows).unwrap();
        drop(w);
        assert_eq!(read_metrics(&p).unwrap(), rows);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("1.5,0,p,3,episode,10,2,12.25,,,,0.05"));
    }
}
