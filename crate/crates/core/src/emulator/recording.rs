use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::{Synth, CLASS_COUNT};
use super::EmulatorError;
use crate::protocol::SampleFrame;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub class: u8,
    pub duration_s: f64,
}

/// Ordered gesture segments. Serialized as a JSON list of
/// `{"class": k, "duration_s": d}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionScript {
    pub steps: Vec<ScriptStep>,
}

impl SessionScript {
    pub fn new(steps: Vec<ScriptStep>) -> Result<Self, EmulatorError> {
        let s = Self { steps };
        s.validate()?;
        Ok(s)
    }

    /// `repetitions` rounds of classes 0..7, each held `hold_s` seconds.
    pub fn cycle(repetitions: usize, hold_s: f64) -> Self {
        let steps = (0..repetitions)
            .flat_map(|_| {
                (0..CLASS_COUNT).map(|class| ScriptStep {
                    class,
                    duration_s: hold_s,
                })
            })
            .collect();
        Self { steps }
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        for s in &self.steps {
            if s.class >= CLASS_COUNT {
                return Err(EmulatorError::InvalidClass(s.class as i32));
            }
            if !s.duration_s.is_finite() || s.duration_s <= 0.0 {
                return Err(EmulatorError::InvalidScript(format!(
                    "duration must be positive, got {}",
                    s.duration_s
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, EmulatorError> {
        let text = std::fs::read_to_string(path)?;
        let s: Self = serde_json::from_str(&text).map_err(|e| EmulatorError::InvalidScript(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn total_duration_s(&self) -> f64 {
        self.steps.iter().map(|s| s.duration_s).sum()
    }

    /// Per-segment frame counts at `rate`; segment boundaries are rounded
    /// from cumulative time so durations never drift.
    pub fn segment_frames(&self, rate: u32) -> Vec<(u8, u64)> {
        let mut out = Vec::with_capacity(self.steps.len());
        let mut elapsed = 0.0;
        let mut emitted = 0u64;
        for s in &self.steps {
            elapsed += s.duration_s;
            let end = (elapsed * rate as f64).round() as u64;
            out.push((s.class, end - emitted));
            emitted = end;
        }
        out
    }

    pub fn total_frames(&self, rate: u32) -> u64 {
        self.segment_frames(rate).iter().map(|(_, n)| n).sum()
    }

    /// Class label for every frame index.
    pub fn labels(&self, rate: u32) -> impl Iterator<Item = u8> + '_ {
        self.segment_frames(rate)
            .into_iter()
            .flat_map(|(class, n)| std::iter::repeat_n(class, n as usize))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordingRow {
    pub time_s: f64,
    /// -1 = unlabeled / rest, otherwise a class id.
    pub label: i8,
    pub samples: Vec<i16>,
}

/// Labeled multichannel time series.
///
/// CSV form: header `time_s,label,ch000,...`; one row per frame; samples as
/// decimal counts; LF line endings.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionRecording {
    pub channel_count: usize,
    pub sample_rate_hz: u32,
    pub rows: Vec<RecordingRow>,
}

impl SessionRecording {
    pub fn synthesize(script: &SessionScript, synth: &Synth, sample_rate_hz: u32) -> Result<Self, EmulatorError> {
        script.validate()?;
        let rows = script
            .labels(sample_rate_hz)
            .enumerate()
            .map(|(t, class)| {
                let f = synth.frame(class, t as u64)?;
                Ok(RecordingRow {
                    time_s: t as f64 / sample_rate_hz as f64,
                    label: class as i8,
                    samples: f.samples,
                })
            })
            .collect::<Result<Vec<_>, EmulatorError>>()?;
        Ok(Self {
            channel_count: synth.channel_count,
            sample_rate_hz,
            rows,
        })
    }

    pub fn validate(&self) -> Result<(), EmulatorError> {
        let period = 1.0 / self.sample_rate_hz as f64;
        let t0 = self.rows.first().map(|r| r.time_s).unwrap_or(0.0);
        for (i, r) in self.rows.iter().enumerate() {
            if r.samples.len() != self.channel_count {
                return Err(EmulatorError::MalformedRecording(format!(
                    "row {i}: {} sample columns, expected {}",
                    r.samples.len(),
                    self.channel_count
                )));
            }
            if !(-1..CLASS_COUNT as i8).contains(&r.label) {
                return Err(EmulatorError::MalformedRecording(format!(
                    "row {i}: label {} out of range",
                    r.label
                )));
            }
            let expected = t0 + i as f64 * period;
            if (r.time_s - expected).abs() > 1e-4 {
                return Err(EmulatorError::MalformedRecording(format!(
                    "row {i}: time {} breaks the {} Hz sample grid",
                    r.time_s, self.sample_rate_hz
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), EmulatorError> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        let mut header = vec!["time_s".to_string(), "label".to_string()];
        header.extend((0..self.channel_count).map(|c| format!("ch{c:03}")));
        w.write_record(&header)?;
        let mut rec = Vec::with_capacity(self.channel_count + 2);
        for r in &self.rows {
            rec.clear();
            rec.push(format!("{:.6}", r.time_s));
            rec.push(r.label.to_string());
            rec.extend(r.samples.iter().map(|s| s.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), EmulatorError> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    /// Parses a recording. `channel_count`, when given, must match the file.
    pub fn read_csv<R: Read>(
        input: R,
        sample_rate_hz: u32,
        channel_count: Option<usize>,
    ) -> Result<Self, EmulatorError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.len() < 3 || &header[0] != "time_s" || &header[1] != "label" {
            return Err(EmulatorError::MalformedRecording(
                "header must start with time_s,label and name at least one channel".into(),
            ));
        }
        let file_channels = header.len() - 2;
        for (i, name) in header.iter().skip(2).enumerate() {
            if name != format!("ch{i:03}") {
                return Err(EmulatorError::MalformedRecording(format!(
                    "column {} is {name:?}, expected ch{i:03}",
                    i + 2
                )));
            }
        }
        if let Some(expected) = channel_count {
            if expected != file_channels {
                return Err(EmulatorError::MalformedRecording(format!(
                    "{file_channels} sample columns, expected {expected}"
                )));
            }
        }
        let bad = |i: usize, what: &str| EmulatorError::MalformedRecording(format!("row {i}: bad {what}"));
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let time_s: f64 = rec[0].parse().map_err(|_| bad(i, "time"))?;
            let label: i8 = rec[1].parse().map_err(|_| bad(i, "label"))?;
            let samples = rec
                .iter()
                .skip(2)
                .map(|s| s.parse::<i16>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| bad(i, "sample"))?;
            rows.push(RecordingRow { time_s, label, samples });
        }
        let out = Self {
            channel_count: file_channels,
            sample_rate_hz,
            rows,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn load(path: &Path, sample_rate_hz: u32, channel_count: Option<usize>) -> Result<Self, EmulatorError> {
        Self::read_csv(File::open(path)?, sample_rate_hz, channel_count)
    }

    /// Frames in row order with their true labels; the labels never go on
    /// the wire.
    pub fn replay_frames(&self) -> impl Iterator<Item = (SampleFrame, i8)> + '_ {
        self.rows.iter().enumerate().map(|(i, r)| {
            (
                SampleFrame {
                    seq: i as u64,
                    samples: r.samples.clone(),
                },
                r.label,
            )
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.rows.len() as f64 / self.sample_rate_hz as f64
    }
}

/// Synthesizes `script` and writes it as CSV.
pub fn write_recording(
    script: &SessionScript,
    synth: &Synth,
    sample_rate_hz: u32,
    path: &Path,
) -> Result<SessionRecording, EmulatorError> {
    let rec = SessionRecording::synthesize(script, synth, sample_rate_hz)?;
    rec.save(path)?;
    Ok(rec)
}
