//! Success-rate aggregation over seeded trials and CSV/JSON table output.

use std::io::Write;

use serde::{Deserialize, Serialize};

/// A trial succeeds above this sequence accuracy.
pub const SR_THRESHOLD: f64 = 0.95;

/// Above-baseline threshold: chance level for the leading node plus ten
/// points.
pub fn abb_threshold(d: usize) -> f64 {
    1.0 / d as f64 + 0.10
}

/// Final sequence accuracies of one seeded trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub seed: u64,
    pub teacher_forced: f64,
    pub generative: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub experiment: String,
    #[serde(rename = "D")]
    pub d: String,
    #[serde(rename = "M")]
    pub m: String,
    pub seeds: usize,
    /// Percentages in `[0, 100]`.
    pub test_force_sr: f64,
    pub test_force_abb: f64,
    pub test_gen_sr: Option<f64>,
    pub test_gen_abb: Option<f64>,
}

fn rates(scores: &[f64], abb: f64) -> (f64, f64) {
    let n = scores.len() as f64;
    let sr = scores.iter().filter(|&&s| s > SR_THRESHOLD).count() as f64 / n;
    let ab = scores.iter().filter(|&&s| s > abb).count() as f64 / n;
    (100.0 * sr, 100.0 * ab)
}

/// One table row over all trials. `threshold_d` sets the above-baseline
/// threshold (use the smallest degree when a range was trained).
pub fn aggregate(experiment: &str, d: &str, m: &str, threshold_d: usize, trials: &[TrialScores]) -> SummaryRow {
    assert!(!trials.is_empty(), "aggregation needs at least one trial");
    let abb = abb_threshold(threshold_d);
    let tf: Vec<f64> = trials.iter().map(|t| t.teacher_forced).collect();
    let (test_force_sr, test_force_abb) = rates(&tf, abb);
    let gen: Option<Vec<f64>> = trials.iter().map(|t| t.generative).collect();
    let (test_gen_sr, test_gen_abb) = match gen {
        Some(g) => {
            let (a, b) = rates(&g, abb);
            (Some(a), Some(b))
        }
        None => (None, None),
    };
    SummaryRow {
        experiment: experiment.into(),
        d: d.into(),
        m: m.into(),
        seeds: trials.len(),
        test_force_sr,
        test_force_abb,
        test_gen_sr,
        test_gen_abb,
    }
}

pub fn write_csv<W: Write>(rows: &[SummaryRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(rows: &[SummaryRow], out: W) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, rows)
}
