use std::fmt::Write as _;

use chunkexec::sim::EpisodeResult;
use serde::Serialize;

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

pub const CSV_HEADER: &str =
    "condition,method,episodes,successes,rate,ci_lo,ci_hi,mean_horizon,inf_hz,act_hz";

/// Wilson score interval for `successes` out of `n`, as fractions.
pub fn wilson_interval(successes: usize, n: usize) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = successes as f64 / n_f;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z95 * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub condition: String,
    pub method: String,
    pub episodes: usize,
    pub successes: usize,
    /// Percentages.
    pub rate: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Mean executed actions per inference.
    pub mean_horizon: f64,
    pub inf_hz: f64,
    pub act_hz: f64,
}

impl ResultRow {
    /// Aggregates episodes of one cell. Rates use a nominal per-inference
    /// time so they are reproducible.
    pub fn aggregate(
        condition: &str,
        method: &str,
        episodes: &[EpisodeResult],
        forward_ms: f64,
    ) -> Self {
        let n = episodes.len();
        let successes = episodes.iter().filter(|e| e.success).count();
        let (lo, hi) = wilson_interval(successes, n);
        let chunks: usize = episodes.iter().map(|e| e.chunks.len()).sum();
        let executed: usize = episodes
            .iter()
            .flat_map(|e| &e.chunks)
            .map(|c| c.horizon)
            .sum();
        let mean_horizon = if chunks == 0 {
            0.0
        } else {
            executed as f64 / chunks as f64
        };
        let inf_hz = 1000.0 / forward_ms;
        Self {
            condition: condition.into(),
            method: method.into(),
            episodes: n,
            successes,
            rate: if n == 0 {
                0.0
            } else {
                100.0 * successes as f64 / n as f64
            },
            ci_lo: 100.0 * lo,
            ci_hi: 100.0 * hi,
            mean_horizon,
            inf_hz,
            act_hz: inf_hz * mean_horizon,
        }
    }

    /// Formatted cells shared by both renderers.
    fn cells(&self) -> [String; 10] {
        [
            self.condition.clone(),
            self.method.clone(),
            self.episodes.to_string(),
            self.successes.to_string(),
            format!("{:.2}", self.rate),
            format!("{:.2}", self.ci_lo),
            format!("{:.2}", self.ci_hi),
            format!("{:.3}", self.mean_horizon),
            format!("{:.2}", self.inf_hz),
            format!("{:.2}", self.act_hz),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    pub fn row(&self, condition: &str, method: &str) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.method == method)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.cells().join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("# {title}\n\n");
        out.push_str("| Condition | Method | Episodes | Successes | Success rate (%) | 95% CI low | 95% CI high | Mean horizon | Inferences/s | Actions/s |\n");
        out.push_str("|---|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.cells().join(" | "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wilson_known_values() {
        // 8/10: center 0.7165, half-width 0.2236 (textbook value 0.4902..0.9433)
        let (lo, hi) = wilson_interval(8, 10);
        assert!(
            (lo - 0.4902).abs() < 1e-4 && (hi - 0.9433).abs() < 1e-4,
            "{lo} {hi}"
        );
        let (lo, hi) = wilson_interval(0, 20);
        assert_eq!(lo, 0.0);
        assert!((hi - 0.1611).abs() < 1e-4);
        let (lo, hi) = wilson_interval(20, 20);
        assert!((lo - 0.8389).abs() < 1e-4);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn csv_and_markdown_share_numbers() {
        let rows = vec![ResultRow {
            condition: "original".into(),
            method: "adahorizon".into(),
            episodes: 50,
            successes: 47,
            rate: 94.0,
            ci_lo: 83.8,
            ci_hi: 97.9,
            mean_horizon: 6.5,
            inf_hz: 100.0,
            act_hz: 650.0,
        }];
        let t = ResultsTable { rows };
        let csv = t.to_csv();
        let md = t.to_markdown("x");
        let data = csv.lines().nth(1).unwrap();
        for cell in data.split(',') {
            assert!(md.contains(&format!(" {cell} ")), "{cell}");
        }
    }
}
