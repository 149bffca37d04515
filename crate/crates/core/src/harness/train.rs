use std::fs::{self, File};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{observation_name, write_json, ExperimentConfig};
use crate::error::{input_err, Error, Result};
use crate::scheduler::{train_scheduler, write_train_log, Checkpoint, ObservationSet, PolicyNet, TrainLogRow};
use crate::surrogate::{clone_behavior, collect_dataset, evaluate_policy, load_bundle, save_bundle, CloneReport, Surrogate};

pub fn surrogate_dir(config: &ExperimentConfig) -> PathBuf {
    config.artifacts().join("surrogate")
}

pub fn checkpoint_path(config: &ExperimentConfig, stage: u8, observation: ObservationSet, seed: u64) -> PathBuf {
    config
        .artifacts()
        .join("checkpoints")
        .join(format!("stage{stage}_{}_seed{seed}.json", observation_name(observation)))
}

fn train_log_path(config: &ExperimentConfig, stage: u8, observation: ObservationSet, seed: u64) -> PathBuf {
    config
        .artifacts()
        .join("checkpoints")
        .join(format!("train_stage{stage}_{}_seed{seed}.csv", observation_name(observation)))
}

pub(crate) fn load_surrogate(config: &ExperimentConfig) -> Result<Surrogate> {
    let dir = surrogate_dir(config);
    if !dir.join("manifest.json").is_file() {
        return input_err(format!("no surrogate bundle in {}; run clone first", dir.display()));
    }
    let (model, _) = load_bundle(&dir)?;
    if model.config() != &config.pipeline {
        return input_err("surrogate bundle was built with a different pipeline config");
    }
    Ok(model)
}

pub(crate) fn load_policy(config: &ExperimentConfig, stage: u8, observation: ObservationSet, seed: u64) -> Result<PolicyNet> {
    let path = checkpoint_path(config, stage, observation, seed);
    if !path.is_file() {
        return input_err(format!("missing stage-{stage} checkpoint {}", path.display()));
    }
    let c = Checkpoint::load(&path)?;
    if c.stage != stage || c.seed != seed || c.net.observation != observation {
        return input_err(format!("checkpoint {} does not match its name", path.display()));
    }
    Ok(c.net)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneRunReport {
    pub config_hash: String,
    pub clone_seed: u64,
    pub eval_seeds: Vec<u64>,
    pub training: CloneReport,
    /// Success rate of the unscheduled pipeline on the eval seeds.
    pub baseline_success: f64,
}

/// Collects demonstrations, clones the expert and freezes the result into
/// the artifact directory.
pub fn run_clone(config: &ExperimentConfig) -> Result<CloneRunReport> {
    config.pipeline.validate()?;
    let data = collect_dataset(&config.dataset);
    let (model, training) = clone_behavior(&config.pipeline, &data, &config.clone, config.clone_seed)?;
    save_bundle(&model, &surrogate_dir(config))?;
    let baseline_success = evaluate_policy(&model, config.eval_seeds.iter().copied())?;
    Ok(CloneRunReport {
        config_hash: config.hash(),
        clone_seed: config.clone_seed,
        eval_seeds: config.eval_seeds.clone(),
        training,
        baseline_success,
    })
}

pub(crate) fn write_clone(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let report = run_clone(config)?;
    let json = config.out_dir.join("report.json");
    write_json(&json, &report)?;
    let csv_path = config.out_dir.join("table.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["epoch", "loss"])?;
    for (e, l) in report.training.epoch_losses.iter().enumerate() {
        w.write_record([e.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(vec![json, csv_path])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSeedReport {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub log: Vec<TrainLogRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub stage: u8,
    pub observation: ObservationSet,
    pub seeds: Vec<TrainSeedReport>,
}

/// Trains one stage for every training seed with `observation`, saving a
/// checkpoint and a log per seed. Stage 2 starts from the matching stage-1
/// checkpoint.
pub fn run_train(config: &ExperimentConfig, stage: u8, observation: ObservationSet) -> Result<TrainReport> {
    let model = load_surrogate(config)?;
    let mut ppo = config.ppo.clone();
    ppo.stage = stage;
    ppo.observation = observation;
    fs::create_dir_all(config.artifacts().join("checkpoints"))?;
    let mut seeds = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let init = match stage {
            2 => Some(load_policy(config, 1, observation, seed)?),
            _ => None,
        };
        let (net, log) = train_scheduler(&model, &ppo, &config.reward, &config.teacher, seed, init.as_ref())
            .map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("stage {stage}, seed {seed}: {msg}")),
                other => other,
            })?;
        let path = checkpoint_path(config, stage, observation, seed);
        Checkpoint::new(net, stage, seed, config.hash()).save(&path)?;
        write_train_log(&log, File::create(train_log_path(config, stage, observation, seed))?)?;
        seeds.push(TrainSeedReport {
            seed,
            checkpoint: path,
            log,
        });
    }
    Ok(TrainReport {
        config_hash: config.hash(),
        stage,
        observation,
        seeds,
    })
}

/// Loads a checkpoint, training it (and its stage-1 parent) first if it
/// does not exist yet.
pub(crate) fn ensure_policy(
    config: &ExperimentConfig,
    stage: u8,
    observation: ObservationSet,
    seed: u64,
) -> Result<PolicyNet> {
    if !checkpoint_path(config, stage, observation, seed).is_file() {
        let mut one = config.clone();
        one.seeds = vec![seed];
        if stage == 2 && !checkpoint_path(config, 1, observation, seed).is_file() {
            run_train(&one, 1, observation)?;
        }
        run_train(&one, stage, observation)?;
    }
    load_policy(config, stage, observation, seed)
}

pub(crate) fn write_train(config: &ExperimentConfig, stage: u8) -> Result<Vec<PathBuf>> {
    let report = run_train(config, stage, config.ppo.observation)?;
    let json = config.out_dir.join("report.json");
    write_json(&json, &report)?;
    let csv_path = config.out_dir.join("table.csv");
    write_log_table(&csv_path, &report)?;
    Ok(vec![json, csv_path])
}

fn write_log_table(path: &Path, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "seed",
        "update",
        "mean_reward",
        "mean_speedup",
        "success_rate",
        "entropy",
        "policy_loss",
        "value_loss",
    ])?;
    for s in &report.seeds {
        for r in &s.log {
            w.write_record([
                s.seed.to_string(),
                r.update.to_string(),
                r.mean_reward.to_string(),
                r.mean_speedup.to_string(),
                r.success_rate.to_string(),
                r.entropy.to_string(),
                r.policy_loss.to_string(),
                r.value_loss.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
