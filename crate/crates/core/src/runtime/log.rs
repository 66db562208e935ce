//! Prediction log: one CSV line per inferred window, flushed as written.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::RuntimeError;
use crate::nn::CLASS_COUNT;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub first_seq: u64,
    /// Milliseconds since the start command was sent.
    pub capture_ms: f64,
    pub fetch_ms: f64,
    pub infer_start_ms: f64,
    pub infer_end_ms: f64,
    pub label: usize,
    pub probabilities: Vec<f32>,
}

impl LogRow {
    pub fn validate(&self) -> Result<(), RuntimeError> {
        let t = [self.capture_ms, self.fetch_ms, self.infer_start_ms, self.infer_end_ms];
        if t.iter().any(|v| !v.is_finite()) || t.windows(2).any(|p| p[1] < p[0]) {
            return Err(RuntimeError::MalformedLog(format!(
                "seq {}: times are not monotonic",
                self.first_seq
            )));
        }
        if self.label >= CLASS_COUNT || self.probabilities.len() != CLASS_COUNT {
            return Err(RuntimeError::MalformedLog(format!(
                "seq {}: bad label or probabilities",
                self.first_seq
            )));
        }
        Ok(())
    }

    fn write_line<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        write!(
            out,
            "{},{:.3},{:.3},{:.3},{:.3},{}",
            self.first_seq, self.capture_ms, self.fetch_ms, self.infer_start_ms, self.infer_end_ms, self.label
        )?;
        for p in &self.probabilities {
            write!(out, ",{p}")?;
        }
        writeln!(out)
    }
}

pub fn header() -> String {
    let mut h = String::from("first_seq,capture_ms,fetch_ms,infer_start_ms,infer_end_ms,label");
    for i in 0..CLASS_COUNT {
        h.push_str(&format!(",p{i}"));
    }
    h
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PredictionLog {
    pub rows: Vec<LogRow>,
}

impl PredictionLog {
    /// Row and ordering invariants: first_seq strictly increasing.
    pub fn validate(&self) -> Result<(), RuntimeError> {
        for r in &self.rows {
            r.validate()?;
        }
        if let Some(p) = self.rows.windows(2).find(|p| p[1].first_seq <= p[0].first_seq) {
            return Err(RuntimeError::MalformedLog(format!(
                "first_seq {} follows {}",
                p[1].first_seq, p[0].first_seq
            )));
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<(), RuntimeError> {
        writeln!(out, "{}", header())?;
        for r in &self.rows {
            r.write_line(&mut out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), RuntimeError> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    /// Parses a log. A torn final line (a crashed writer) is ignored.
    pub fn read_csv<R: Read>(input: R) -> Result<Self, RuntimeError> {
        let mut lines = BufReader::new(input).lines();
        let head = lines
            .next()
            .ok_or_else(|| RuntimeError::MalformedLog("empty file".into()))??;
        if head.trim_end() != header() {
            return Err(RuntimeError::MalformedLog(format!("unexpected header {head:?}")));
        }
        let lines: Vec<String> = lines.collect::<Result<_, _>>()?;
        let mut rows = Vec::with_capacity(lines.len());
        let last = lines.len().saturating_sub(1);
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match parse_row(line) {
                Ok(r) => rows.push(r),
                Err(_) if i == last => break,
                Err(e) => return Err(e),
            }
        }
        let log = Self { rows };
        log.validate()?;
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        Self::read_csv(File::open(path)?)
    }
}

fn parse_row(line: &str) -> Result<LogRow, RuntimeError> {
    let bad = || RuntimeError::MalformedLog(format!("bad row {line:?}"));
    let f: Vec<&str> = line.trim_end().split(',').collect();
    if f.len() != 6 + CLASS_COUNT {
        return Err(bad());
    }
    let ms = |s: &str| s.parse::<f64>().map_err(|_| bad());
    Ok(LogRow {
        first_seq: f[0].parse().map_err(|_| bad())?,
        capture_ms: ms(f[1])?,
        fetch_ms: ms(f[2])?,
        infer_start_ms: ms(f[3])?,
        infer_end_ms: ms(f[4])?,
        label: f[5].parse().map_err(|_| bad())?,
        probabilities: f[6..]
            .iter()
            .map(|s| s.parse::<f32>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?,
    })
}

/// Streaming writer owned by the inference stage.
pub struct LogWriter {
    out: BufWriter<File>,
}

impl LogWriter {
    pub fn create(path: &Path) -> Result<Self, RuntimeError> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", header())?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn append(&mut self, row: &LogRow) -> Result<(), RuntimeError> {
        row.write_line(&mut self.out)?;
        self.out.flush()?;
        Ok(())
    }
}
