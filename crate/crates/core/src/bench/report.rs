//! Machine-readable experiment output.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::tune::TuneHistory;
use crate::error::{Error, Result};
use crate::optimizer::TuningPlan;

/// Columns written per step. `measured`, `predicted` and `seconds` vary
/// between runs; the rest is determined by the seeds.
pub const CSV_HEADER: [&str; 7] = [
    "variant",
    "seed",
    "step",
    "node",
    "measured",
    "predicted",
    "seconds",
];

#[derive(Serialize)]
struct Row<'a> {
    variant: &'a str,
    seed: Option<u64>,
    step: usize,
    node: &'a str,
    measured: f64,
    predicted: f64,
    seconds: f64,
}

/// Writes one row per step of every history, preceded by the header.
pub fn write_csv<W: Write>(histories: &[TuneHistory], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(CSV_HEADER)?;
    for h in histories {
        for r in &h.records {
            w.serialize(Row {
                variant: &h.variant,
                seed: h.seed,
                step: r.step,
                node: r.node.as_deref().unwrap_or(""),
                measured: r.measured,
                predicted: r.predicted,
                seconds: r.seconds,
            })?;
        }
    }
    w.flush().map_err(|e| Error::io("csv output", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistorySummary {
    pub variant: String,
    pub seed: Option<u64>,
    pub steps: usize,
    pub peak_measured: f64,
    pub final_measured: Option<f64>,
    pub final_predicted: Option<f64>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub histories: Vec<HistorySummary>,
    pub plans: Vec<TuningPlan>,
}

pub fn summarize(histories: &[TuneHistory], plans: &[TuningPlan]) -> Summary {
    Summary {
        histories: histories
            .iter()
            .map(|h| HistorySummary {
                variant: h.variant.clone(),
                seed: h.seed,
                steps: h.records.len().saturating_sub(1),
                peak_measured: h.peak_measured(),
                final_measured: h.records.last().map(|r| r.measured),
                final_predicted: h.records.last().map(|r| r.predicted),
                diagnostic: h.diagnostic.clone(),
            })
            .collect(),
        plans: plans.to_vec(),
    }
}

/// Short human-readable digest of a set of runs.
pub fn text_summary(summary: &Summary) -> String {
    let mut s = String::new();
    for h in &summary.histories {
        let seed = h.seed.map_or(String::new(), |s| format!(" seed {s}"));
        s.push_str(&format!(
            "{}{}: {} steps, peak {:.3} mb/s, final measured {} predicted {}\n",
            h.variant,
            seed,
            h.steps,
            h.peak_measured,
            h.final_measured.map_or("-".into(), |v| format!("{v:.3}")),
            h.final_predicted.map_or("-".into(), |v| format!("{v:.3}")),
        ));
        if let Some(d) = &h.diagnostic {
            s.push_str(&format!("  {d}\n"));
        }
    }
    s
}

/// Writes `results.csv` and `summary.json` into `dir`.
pub fn write_report(
    dir: &Path,
    histories: &[TuneHistory],
    plans: &[TuningPlan],
) -> Result<Summary> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("results.csv");
    let file = std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    write_csv(histories, file)?;
    let summary = summarize(histories, plans);
    let json_path = dir.join("summary.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)?)
        .map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::presets;
    use crate::bench::tune::StepRecord;

    fn history(variant: &str, seed: Option<u64>, steps: usize) -> TuneHistory {
        TuneHistory {
            variant: variant.into(),
            seed,
            records: (0..steps)
                .map(|step| StepRecord {
                    step,
                    node: (step > 0).then(|| "decode".to_string()),
                    parallelism: Default::default(),
                    measured: step as f64 + 1.0,
                    elements: 10,
                    predicted: 10.0,
                    bottleneck: None,
                    seconds: 0.5 * step as f64,
                })
                .collect(),
            diagnostic: None,
            spec: presets::resnet_shape(),
        }
    }

    fn csv_of(h: &[TuneHistory]) -> String {
        let mut buf = Vec::new();
        write_csv(h, &mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_history_is_header_only() {
        assert_eq!(
            csv_of(&[]),
            "variant,seed,step,node,measured,predicted,seconds\n"
        );
        assert_eq!(csv_of(&[history("iterative", None, 0)]).lines().count(), 1);
    }

    #[test]
    fn both_variants_are_labeled() {
        let text = csv_of(&[
            history("iterative", None, 3),
            history("random_walk", Some(7), 2),
        ]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "iterative,,0,,1.0,10.0,0.0");
        assert!(lines[5].starts_with("random_walk,7,1,decode,"));
    }

    #[test]
    fn summary_is_deterministic() {
        let h = [history("iterative", None, 3)];
        let a = serde_json::to_string(&summarize(&h, &[])).unwrap();
        let b = serde_json::to_string(&summarize(&h, &[])).unwrap();
        assert_eq!(a, b);
        assert!(text_summary(&summarize(&h, &[])).contains("2 steps, peak 3.000"));
    }
}
