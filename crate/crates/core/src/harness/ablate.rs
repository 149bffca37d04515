use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::train::{ensure_policy, load_policy, load_surrogate};
use super::{observation_name, write_json, ExperimentConfig, PolicyKind};
use crate::error::Result;
use crate::scheduler::ObservationSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub policy: PolicyKind,
    pub observation: Option<ObservationSet>,
    /// Empty for schedules that are not trained.
    pub training_seeds: Vec<u64>,
    pub success_rates: Vec<f64>,
    pub speedups: Vec<f64>,
    pub mean_success: f64,
    pub mean_speedup: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config_hash: String,
    pub eval_seeds: Vec<u64>,
    pub training_seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn row(name: String, policy: PolicyKind, observation: Option<ObservationSet>, seeds: Vec<u64>, results: Vec<(f64, f64)>) -> AblationRow {
    let (success_rates, speedups): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
    AblationRow {
        name,
        policy,
        observation,
        training_seeds: seeds,
        mean_success: mean(&success_rates),
        mean_speedup: mean(&speedups),
        success_rates,
        speedups,
    }
}

/// Compares the fixed schedules, both training stages, the single-branch
/// restrictions and the observation ablations on the shared eval seeds.
/// Learned rows average over all training seeds. Ablated observations are
/// retrained (both stages) when their checkpoints are missing.
pub fn run_ablation(config: &ExperimentConfig) -> Result<AblationReport> {
    let model = load_surrogate(config)?;
    let seeds = &config.eval_seeds;
    let mut rows = Vec::new();
    for kind in [PolicyKind::Full, PolicyKind::Threshold, PolicyKind::Random] {
        let (r, _) = evaluate(&model, config, kind, None, None, seeds)?;
        let a = r.aggregate;
        rows.push(row(kind.name().into(), kind, None, vec![], vec![(a.success_rate, a.speedup)]));
    }

    let learned = [
        (PolicyKind::Stage1, ObservationSet::All),
        (PolicyKind::Stage2, ObservationSet::All),
        (PolicyKind::ForceLlmFull, ObservationSet::All),
        (PolicyKind::ForceAhFull, ObservationSet::All),
        (PolicyKind::Stage2, ObservationSet::CkaProgress),
        (PolicyKind::Stage2, ObservationSet::SpeedProgress),
    ];
    for (kind, obs) in learned {
        let stage = kind.stage().expect("learned schedule");
        let mut results = Vec::with_capacity(config.seeds.len());
        for &seed in &config.seeds {
            let net = match obs {
                ObservationSet::All => load_policy(config, stage, obs, seed)?,
                _ => ensure_policy(config, stage, obs, seed)?,
            };
            let (r, _) = evaluate(&model, config, kind, Some(&net), Some(seed), seeds)?;
            results.push((r.aggregate.success_rate, r.aggregate.speedup));
        }
        let name = match obs {
            ObservationSet::All => kind.name().to_string(),
            _ => format!("{}/{}", kind.name(), observation_name(obs)),
        };
        rows.push(row(name, kind, Some(obs), config.seeds.clone(), results));
    }
    Ok(AblationReport {
        config_hash: config.hash(),
        eval_seeds: seeds.clone(),
        training_seeds: config.seeds.clone(),
        rows,
    })
}

pub(crate) fn write_ablation(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let report = run_ablation(config)?;
    let json = config.out_dir.join("report.json");
    write_json(&json, &report)?;
    let csv_path = config.out_dir.join("table.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["schedule", "observation", "training_seeds", "mean_success", "mean_speedup"])?;
    for r in &report.rows {
        w.write_record([
            r.name.clone(),
            r.observation.map_or("-", observation_name).to_string(),
            r.training_seeds.len().to_string(),
            r.mean_success.to_string(),
            r.mean_speedup.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(vec![json, csv_path])
}
