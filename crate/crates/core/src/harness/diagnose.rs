use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate, write_trace, TraceRow};
use super::svg::timeline_svg;
use super::train::{load_policy, load_surrogate};
use super::{write_json, ExperimentConfig, PolicyKind};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDiagnostics {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub speedup: f64,
    pub mean_rho: f64,
    /// Steps whose probe score is below the teacher's lowest threshold.
    pub low_rho_steps: usize,
    pub level0_rate: f64,
    /// Level-0 backbone frequency over the low-score steps, if any.
    pub level0_rate_low_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub config_hash: String,
    pub policy: PolicyKind,
    pub training_seed: Option<u64>,
    pub low_rho_threshold: f64,
    pub episodes: Vec<EpisodeDiagnostics>,
    #[serde(skip)]
    pub traces: Vec<Vec<TraceRow>>,
}

pub fn diagnostics(seed: u64, rows: &[TraceRow], threshold: f64) -> EpisodeDiagnostics {
    let n = rows.len().max(1) as f64;
    let level0 = rows.iter().filter(|r| r.backbone == 0).count();
    let low: Vec<&TraceRow> = rows.iter().filter(|r| r.rho < threshold).collect();
    let low0 = low.iter().filter(|r| r.backbone == 0).count();
    let executed: u64 = rows.iter().map(|r| r.flops).sum();
    let full: u64 = rows.iter().map(|r| r.full_flops).sum();
    EpisodeDiagnostics {
        seed,
        success: rows.last().is_some_and(|r| r.success),
        steps: rows.len(),
        speedup: if executed > 0 { full as f64 / executed as f64 } else { 0.0 },
        mean_rho: rows.iter().map(|r| r.rho).sum::<f64>() / n,
        low_rho_steps: low.len(),
        level0_rate: level0 as f64 / n,
        level0_rate_low_rho: (!low.is_empty()).then(|| low0 as f64 / low.len() as f64),
    }
}

/// Runs the configured schedule on the diagnose seeds and keeps the full
/// per-step traces.
pub fn run_diagnose(config: &ExperimentConfig) -> Result<DiagnoseReport> {
    let model = load_surrogate(config)?;
    let kind = config.schedule();
    let seed = config.seeds[0];
    let net = match kind.stage() {
        Some(stage) => Some(load_policy(config, stage, config.ppo.observation, seed)?),
        None => None,
    };
    let (report, traces) = evaluate(&model, config, kind, net.as_ref(), Some(seed), &config.diagnose_seeds)?;
    let threshold = config.teacher.rho_thresholds[3];
    let episodes = config
        .diagnose_seeds
        .iter()
        .zip(&traces)
        .map(|(&s, rows)| diagnostics(s, rows, threshold))
        .collect();
    Ok(DiagnoseReport {
        config_hash: config.hash(),
        policy: kind,
        training_seed: report.training_seed,
        low_rho_threshold: threshold,
        episodes,
        traces,
    })
}

pub(crate) fn write_diagnose(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let report = run_diagnose(config)?;
    let mut files = Vec::new();
    for (d, rows) in report.episodes.iter().zip(&report.traces) {
        let trace = config.out_dir.join(format!("trace_{}.csv", d.seed));
        write_trace(&trace, rows)?;
        let svg = config.out_dir.join(format!("timeline_{}.svg", d.seed));
        let title = format!("{} schedule, episode {}, speedup {:.2}", report.policy.name(), d.seed, d.speedup);
        fs::write(&svg, timeline_svg(rows, &title))?;
        files.push(trace);
        files.push(svg);
    }
    let json = config.out_dir.join("report.json");
    write_json(&json, &report)?;
    let csv_path = config.out_dir.join("table.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["seed", "success", "steps", "speedup", "mean_rho", "low_rho_steps", "level0_rate", "level0_rate_low_rho"])?;
    for d in &report.episodes {
        w.write_record([
            d.seed.to_string(),
            (d.success as u8).to_string(),
            d.steps.to_string(),
            d.speedup.to_string(),
            d.mean_rho.to_string(),
            d.low_rho_steps.to_string(),
            d.level0_rate.to_string(),
            d.level0_rate_low_rho.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush()?;
    files.push(json);
    files.push(csv_path);
    Ok(files)
}
