//! Activation-timeline export for external plotting.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::blockworld::TaskSpec;
use crate::error::Result;
use crate::trainer::{EvalReport, RolloutRecord};

use super::ExpertStageMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub control_steps: usize,
    pub rollouts: usize,
    pub purity: Option<f64>,
    pub usage_histogram: Vec<usize>,
    /// Experts that conditioned at least one step.
    pub collapse_count: usize,
    pub mean_entropy: Option<f64>,
    pub stage_to_expert: Option<std::collections::BTreeMap<u8, usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Analysis {
    pub csv: String,
    pub summary: AnalysisSummary,
}

/// One CSV row per control step: `t,stage,expert,entropy,w1..wk`, where
/// `stage` is the stage code and `w1..wk` are the combine weights of the
/// selected experts in selection order (zero-padded).
pub fn timeline_csv(records: &[RolloutRecord]) -> String {
    let k = records
        .iter()
        .flat_map(|r| &r.telemetry)
        .filter_map(|s| s.gate.as_ref().map(|g| g.selected.len()))
        .max()
        .unwrap_or(0);
    let mut out = String::from("t,stage,expert,entropy");
    for i in 1..=k {
        write!(out, ",w{i}").expect("writing to a String");
    }
    out.push('\n');
    for s in records.iter().flat_map(|r| &r.telemetry) {
        write!(out, "{},{}", s.t, s.stage).expect("writing to a String");
        match &s.gate {
            Some(g) => {
                write!(out, ",{},{}", g.selected[0], g.entropy()).expect("writing to a String");
                for i in 0..k {
                    write!(out, ",{}", g.combine_weights.get(i).copied().unwrap_or(0.0))
                        .expect("writing to a String");
                }
            }
            None => {
                out.push_str(",,");
                out.push_str(&",".repeat(k));
            }
        }
        out.push('\n');
    }
    out
}

pub fn analyze(report: &EvalReport, task: &TaskSpec) -> Result<Analysis> {
    let steps = || report.episodes.iter().flat_map(|r| &r.telemetry);
    let n = steps()
        .find_map(|s| s.gate.as_ref().map(|g| g.probabilities.len()))
        .unwrap_or(0);
    let mut usage = vec![0; n];
    let mut entropy = 0.0;
    for g in steps().filter_map(|s| s.gate.as_ref()) {
        usage[g.selected[0]] += 1;
        entropy += g.entropy();
    }
    let gated: usize = usage.iter().sum();
    let map = if n > 0 {
        Some(ExpertStageMap::from_records(&report.episodes, n, task)?)
    } else {
        None
    };
    Ok(Analysis {
        csv: timeline_csv(&report.episodes),
        summary: AnalysisSummary {
            control_steps: steps().count(),
            rollouts: report.episodes.len(),
            purity: map.as_ref().map(|m| m.purity),
            collapse_count: usage.iter().filter(|&&c| c > 0).count(),
            usage_histogram: usage,
            mean_entropy: (gated > 0).then(|| entropy / gated as f64),
            stage_to_expert: map.map(|m| m.stage_to_expert),
        },
    })
}
