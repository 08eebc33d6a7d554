use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub next_loss: Option<f64>,
    pub prev_loss: Option<f64>,
    pub gpt_loss: Option<f64>,
    pub wall_clock_s: f64,
    pub pairs_per_sec: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_next_loss: Option<f64>,
}

pub const CSV_HEADER: &str =
    "step,epoch,loss,next_loss,prev_loss,gpt_loss,wall_clock_s,pairs_per_sec,eval_accuracy,eval_next_loss";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn parse_opt(s: &str) -> Option<f64> {
    if s.is_empty() {
        None
    } else {
        s.parse().ok()
    }
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{},{},{},{:.3},{:.1},{},{}",
            self.step,
            self.epoch,
            self.loss,
            opt(self.next_loss),
            opt(self.prev_loss),
            opt(self.gpt_loss),
            self.wall_clock_s,
            self.pairs_per_sec,
            opt(self.eval_accuracy),
            opt(self.eval_next_loss)
        )
    }

    pub fn from_csv(line: &str) -> Option<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return None;
        }
        Some(MetricsRow {
            step: f[0].parse().ok()?,
            epoch: f[1].parse().ok()?,
            loss: f[2].parse().ok()?,
            next_loss: parse_opt(f[3]),
            prev_loss: parse_opt(f[4]),
            gpt_loss: parse_opt(f[5]),
            wall_clock_s: f[6].parse().ok()?,
            pairs_per_sec: f[7].parse().ok()?,
            eval_accuracy: parse_opt(f[8]),
            eval_next_loss: parse_opt(f[9]),
        })
    }
}

/// Append-only CSV with a JSONL mirror; every row is flushed as written.
#[derive(Debug)]
pub struct MetricsLog {
    csv: File,
    jsonl: File,
    last_step: Option<u64>,
    pub path: PathBuf,
}

impl MetricsLog {
    /// Opens `dir/metrics.csv`. With `keep_through`, existing rows up to that
    /// step are kept and later ones dropped; otherwise the log starts empty.
    pub fn open(dir: &Path, keep_through: Option<u64>) -> std::io::Result<Self> {
        let path = dir.join("metrics.csv");
        let jpath = dir.join("metrics.jsonl");
        let kept: Vec<MetricsRow> = match keep_through {
            Some(step) if path.exists() => read_metrics(&path)?.into_iter().filter(|r| r.step <= step).collect(),
            _ => Vec::new(),
        };
        let mut csv = File::create(&path)?;
        let mut jsonl = File::create(&jpath)?;
        writeln!(csv, "{CSV_HEADER}")?;
        for r in &kept {
            writeln!(csv, "{}", r.to_csv())?;
            writeln!(jsonl, "{}", serde_json::to_string(r).expect("row serializes"))?;
        }
        csv.flush()?;
        let csv = OpenOptions::new().append(true).open(&path)?;
        let jsonl = OpenOptions::new().append(true).open(&jpath)?;
        Ok(MetricsLog { csv, jsonl, last_step: kept.last().map(|r| r.step), path })
    }

    pub fn append(&mut self, row: &MetricsRow) -> std::io::Result<()> {
        if let Some(last) = self.last_step {
            if row.step < last {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidInput,
                    format!("metrics step {} after {last}", row.step),
                ));
            }
        }
        writeln!(self.csv, "{}", row.to_csv())?;
        self.csv.flush()?;
        writeln!(self.jsonl, "{}", serde_json::to_string(row).expect("row serializes"))?;
        self.jsonl.flush()?;
        self.last_step = Some(row.step);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> std::io::Result<Vec<MetricsRow>> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut rows = Vec::new();
    for line in f.lines().skip(1) {
        if let Some(r) = MetricsRow::from_csv(&line?) {
            rows.push(r);
        }
    }
    Ok(rows)
}
