//! Time-stamped metrics rows in CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use super::config::Clock;
use crate::error::{Error, Result};

pub const HEADER: [&str; 8] = [
    "wall_clock_s",
    "round",
    "chain_id",
    "algorithm",
    "train_rmse",
    "test_rmse",
    "samples_collected",
    "eps_current",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub wall_clock_s: f64,
    pub round: u64,
    /// A chain index or `"ensemble"`.
    pub chain_id: String,
    pub algorithm: String,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub samples_collected: usize,
    pub eps_current: f64,
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Protocol(format!("metrics CSV: {other:?}")),
    }
}

/// Writes the config echo, the header row, then one row per [`emit`](Self::emit).
pub struct MetricsWriter {
    out: csv::Writer<BufWriter<File>>,
    clock: Clock,
    start: Instant,
    rows: u64,
    last_wall: f64,
}

impl MetricsWriter {
    pub fn create(path: impl AsRef<Path>, echo: &[(&str, String)], clock: Clock) -> Result<Self> {
        let mut file = BufWriter::new(File::create(path.as_ref())?);
        for (k, v) in echo {
            writeln!(file, "# {k} = {v}")?;
        }
        let mut out = csv::WriterBuilder::new().from_writer(file);
        out.write_record(HEADER).map_err(csv_err)?;
        out.flush()?;
        Ok(MetricsWriter {
            out,
            clock,
            start: Instant::now(),
            rows: 0,
            last_wall: 0.0,
        })
    }

    /// Appends one row stamped with the current clock value.
    #[allow(clippy::too_many_arguments)]
    pub fn emit(
        &mut self,
        round: u64,
        chain_id: &str,
        algorithm: &str,
        train_rmse: f64,
        test_rmse: f64,
        samples_collected: usize,
        eps_current: f64,
    ) -> Result<MetricsRow> {
        self.rows += 1;
        let wall = match self.clock {
            Clock::Wall => self.start.elapsed().as_secs_f64().max(self.last_wall),
            Clock::Logical => self.rows as f64,
        };
        self.last_wall = wall;
        let row = MetricsRow {
            wall_clock_s: wall,
            round,
            chain_id: chain_id.to_string(),
            algorithm: algorithm.to_string(),
            train_rmse,
            test_rmse,
            samples_collected,
            eps_current,
        };
        emit_metrics(&mut self.out, &row)?;
        Ok(row)
    }

    pub fn rows(&self) -> u64 {
        self.rows
    }
}

/// Appends `row` and flushes.
pub fn emit_metrics<W: Write>(out: &mut csv::Writer<W>, row: &MetricsRow) -> Result<()> {
    out.write_record([
        format!("{}", row.wall_clock_s),
        row.round.to_string(),
        row.chain_id.clone(),
        row.algorithm.clone(),
        format!("{}", row.train_rmse),
        format!("{}", row.test_rmse),
        row.samples_collected.to_string(),
        format!("{:e}", row.eps_current),
    ])
    .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, k: usize, line: usize) -> Result<T> {
    rec.get(k)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("bad or missing {} field", HEADER[k]),
        })
}

/// Reads a metrics file back, skipping `#` lines.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let mut rd = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path.as_ref())
        .map_err(csv_err)?;
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: "unexpected metrics header".into(),
        });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        rows.push(MetricsRow {
            wall_clock_s: field(&rec, 0, line)?,
            round: field(&rec, 1, line)?,
            chain_id: field(&rec, 2, line)?,
            algorithm: field(&rec, 3, line)?,
            train_rmse: field(&rec, 4, line)?,
            test_rmse: field(&rec, 5, line)?,
            samples_collected: field(&rec, 6, line)?,
            eps_current: field(&rec, 7, line)?,
        });
    }
    Ok(rows)
}
