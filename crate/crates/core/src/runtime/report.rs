//! Per-stage latency distributions and their summary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RuntimeError;

/// Raw per-window timings in milliseconds, index-aligned across stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Oldest frame arrival to window emission.
    pub fill_ms: Vec<f64>,
    /// Window emission to fetch completion on the inference side.
    pub transfer_ms: Vec<f64>,
    pub inference_ms: Vec<f64>,
    /// Window emission to prediction.
    pub end_to_end_ms: Vec<f64>,
    /// READY to ACK on the offering side, per transfer.
    pub link_ms: Vec<f64>,
    /// Windows fetched and inferred.
    pub windows: u64,
    /// Windows the bridge emitted.
    pub emitted: u64,
    /// Windows evicted from the bridge queue.
    pub dropped: u64,
    /// First post-warm-up instant to the last prediction.
    pub wall_s: f64,
}

impl LatencyReport {
    pub fn save(&self, path: &Path) -> Result<(), RuntimeError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RuntimeError> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub mean_ms: f64,
    pub p95_ms: f64,
    pub max_ms: f64,
}

impl StageSummary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            mean_ms: v.iter().sum::<f64>() / v.len() as f64,
            p95_ms: percentile(&v, 0.95),
            max_ms: v[v.len() - 1],
        })
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub windows: u64,
    pub dropped: u64,
    pub wall_s: f64,
    pub throughput_per_s: f64,
    pub fill: Option<StageSummary>,
    pub transfer: Option<StageSummary>,
    pub inference: Option<StageSummary>,
    pub end_to_end: Option<StageSummary>,
    pub link: Option<StageSummary>,
}

impl BenchSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "windows {}  dropped {}  wall {:.2} s  throughput {:.2} windows/s\n",
            self.windows, self.dropped, self.wall_s, self.throughput_per_s
        );
        s.push_str(&format!(
            "{:<12}{:>10}{:>10}{:>10}\n",
            "stage", "mean ms", "p95 ms", "max ms"
        ));
        for (name, st) in [
            ("fill", &self.fill),
            ("transfer", &self.transfer),
            ("inference", &self.inference),
            ("end_to_end", &self.end_to_end),
            ("link", &self.link),
        ] {
            match st {
                Some(st) => s.push_str(&format!(
                    "{name:<12}{:>10.3}{:>10.3}{:>10.3}\n",
                    st.mean_ms, st.p95_ms, st.max_ms
                )),
                None => s.push_str(&format!("{name:<12}{:>10}{:>10}{:>10}\n", "-", "-", "-")),
            }
        }
        s
    }
}

pub fn bench_report(report: &LatencyReport) -> Result<BenchSummary, RuntimeError> {
    if report.windows == 0 && report.end_to_end_ms.is_empty() {
        return Err(RuntimeError::EmptyReport);
    }
    let windows = report.windows.max(report.end_to_end_ms.len() as u64);
    Ok(BenchSummary {
        windows,
        dropped: report.dropped,
        wall_s: report.wall_s,
        throughput_per_s: if report.wall_s > 0.0 {
            windows as f64 / report.wall_s
        } else {
            0.0
        },
        fill: StageSummary::of(&report.fill_ms),
        transfer: StageSummary::of(&report.transfer_ms),
        inference: StageSummary::of(&report.inference_ms),
        end_to_end: StageSummary::of(&report.end_to_end_ms),
        link: StageSummary::of(&report.link_ms),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 0.95), 95.0);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 0.95), 3.0);
    }

    #[test]
    fn empty_report_rejected() {
        assert!(matches!(
            bench_report(&LatencyReport::default()),
            Err(RuntimeError::EmptyReport)
        ));
    }
}
