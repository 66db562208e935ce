//! Scoring a prediction log against a cue schedule.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::log::PredictionLog;
use super::RuntimeError;
use crate::emulator::SessionScript;
use crate::nn::CLASS_COUNT;

/// Default lag between a cue and the matching muscle activity, seconds.
pub const DEFAULT_OFFSET_S: f64 = 1.365;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cue {
    pub time_s: f64,
    pub class: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CueSchedule {
    pub cues: Vec<Cue>,
    pub offset_s: f64,
}

impl CueSchedule {
    pub fn new(cues: Vec<Cue>, offset_s: f64) -> Result<Self, RuntimeError> {
        let s = Self { cues, offset_s };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), RuntimeError> {
        if self.cues.is_empty() {
            return Err(RuntimeError::InvalidSchedule("no cues".into()));
        }
        if !self.offset_s.is_finite() {
            return Err(RuntimeError::InvalidSchedule("offset must be finite".into()));
        }
        for c in &self.cues {
            if !c.time_s.is_finite() || c.class as usize >= CLASS_COUNT {
                return Err(RuntimeError::InvalidSchedule(format!("bad cue {c:?}")));
            }
        }
        if self.cues.windows(2).any(|p| p[1].time_s <= p[0].time_s) {
            return Err(RuntimeError::InvalidSchedule(
                "cue times must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    /// One cue per script step, at the step's start time.
    pub fn from_script(script: &SessionScript, offset_s: f64) -> Result<Self, RuntimeError> {
        let mut t = 0.0;
        let mut cues = Vec::with_capacity(script.steps.len());
        for s in &script.steps {
            cues.push(Cue {
                time_s: t,
                class: s.class,
            });
            t += s.duration_s;
        }
        Self::new(cues, offset_s)
    }

    /// JSON list of `{time_s, class}`.
    pub fn load(path: &Path, offset_s: f64) -> Result<Self, RuntimeError> {
        let cues: Vec<Cue> = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::new(cues, offset_s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.cues).expect("cues serialize")
    }

    /// Index of the cue in force at `t_s` after shifting every cue later by
    /// the offset, or `None` before the first shifted cue.
    pub fn segment_at(&self, t_s: f64) -> Option<usize> {
        let n = self.cues.partition_point(|c| c.time_s + self.offset_s <= t_s);
        n.checked_sub(1)
    }

    pub fn truth_at(&self, t_s: f64) -> Option<u8> {
        self.segment_at(t_s).map(|i| self.cues[i].class)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    /// `confusion[truth][predicted]`
    pub confusion: Vec<Vec<u64>>,
    /// `None` for a class with no windows.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub windows_evaluated: u64,
    pub windows_excluded: u64,
    pub segments_evaluated: usize,
}

/// Raw per-window scoring with no smoothing. A window is timed by its
/// capture time.
pub fn evaluate(log: &PredictionLog, sched: &CueSchedule) -> Result<EvalResult, RuntimeError> {
    if log.rows.is_empty() {
        return Err(RuntimeError::EmptyLog);
    }
    sched.validate()?;
    let mut confusion = vec![vec![0u64; CLASS_COUNT]; CLASS_COUNT];
    let mut seen = vec![false; sched.cues.len()];
    let mut excluded = 0;
    for r in &log.rows {
        match sched.segment_at(r.capture_ms / 1000.0) {
            Some(seg) => {
                seen[seg] = true;
                let truth = sched.cues[seg].class as usize;
                confusion[truth][r.label.min(CLASS_COUNT - 1)] += 1;
            }
            None => excluded += 1,
        }
    }
    let total: u64 = confusion.iter().flatten().sum();
    let correct: u64 = (0..CLASS_COUNT).map(|i| confusion[i][i]).sum();
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[i] as f64 / n as f64)
        })
        .collect();
    Ok(EvalResult {
        accuracy: if total > 0 { correct as f64 / total as f64 } else { 0.0 },
        confusion,
        per_class_accuracy,
        windows_evaluated: total,
        windows_excluded: excluded,
        segments_evaluated: seen.iter().filter(|s| **s).count(),
    })
}
