use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::train::{load_policy, load_surrogate};
use super::{write_json, ExperimentConfig, PolicyKind};
use crate::error::{input_err, Result};
use crate::executor::{ComputeAction, JOINT_ACTIONS};
use crate::numerics::Rng;
use crate::scheduler::{
    run_episode, Decider, EpisodeRecord, FixedDecider, ObservationSet, PolicyDecider, PolicyNet, RandomDecider,
    Restriction, ThresholdDecider, ThresholdScheduler,
};
use crate::surrogate::Surrogate;

const RANDOM_STREAM: u64 = 0xa11;
const POLICY_STREAM: u64 = 0x5a4d;

/// One control step as written to `trace_<seed>.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    /// Probe score the scheduler saw when deciding.
    pub rho: f64,
    pub v_grip: f64,
    pub v_trans: f64,
    pub v_rot: f64,
    pub progress: f64,
    pub backbone: u8,
    pub head: u8,
    pub forced: bool,
    pub teacher_backbone: u8,
    pub teacher_head: u8,
    pub flops: u64,
    pub full_flops: u64,
    pub normalized_cost: f64,
    pub done: bool,
    pub success: bool,
}

pub fn trace_rows(ep: &EpisodeRecord) -> Vec<TraceRow> {
    let full = ep.ledger.table().full_step();
    ep.steps
        .iter()
        .zip(ep.ledger.step_costs())
        .map(|(s, &flops)| TraceRow {
            step: s.step,
            rho: s.obs.rho,
            v_grip: s.obs.v_grip,
            v_trans: s.obs.v_trans,
            v_rot: s.obs.v_rot,
            progress: s.obs.progress,
            backbone: s.action.backbone,
            head: s.action.head,
            forced: s.forced,
            teacher_backbone: s.teacher.backbone,
            teacher_head: s.teacher.head,
            flops,
            full_flops: full,
            normalized_cost: s.cost,
            done: s.done,
            success: s.transition.success,
        })
        .collect()
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub executed_flops: u64,
    pub full_flops: u64,
    pub speedup: f64,
    pub mean_rho: f64,
    /// Step counts by joint index `3·ℓB + ℓH`.
    pub histogram: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub steps: usize,
    pub executed_flops: u64,
    pub full_flops: u64,
    pub speedup: f64,
    pub mean_normalized_cost: f64,
    pub mean_rho: f64,
    pub histogram: Vec<u64>,
    pub backbone_usage: Vec<u64>,
    pub head_usage: Vec<u64>,
}

impl Aggregate {
    /// Everything here is a plain sum or ratio of trace columns.
    pub fn from_traces<'a>(traces: impl IntoIterator<Item = &'a [TraceRow]>) -> Self {
        let mut a = Aggregate {
            histogram: vec![0; JOINT_ACTIONS],
            backbone_usage: vec![0; 5],
            head_usage: vec![0; 3],
            ..Default::default()
        };
        let mut rho = 0.0;
        let mut cost = 0.0;
        for rows in traces {
            a.episodes += 1;
            a.successes += rows.last().is_some_and(|r| r.success) as usize;
            for r in rows {
                a.steps += 1;
                a.executed_flops += r.flops;
                a.full_flops += r.full_flops;
                rho += r.rho;
                cost += r.normalized_cost;
                a.histogram[3 * r.backbone as usize + r.head as usize] += 1;
                a.backbone_usage[r.backbone as usize] += 1;
                a.head_usage[r.head as usize] += 1;
            }
        }
        if a.episodes > 0 {
            a.success_rate = a.successes as f64 / a.episodes as f64;
        }
        if a.steps > 0 {
            a.mean_rho = rho / a.steps as f64;
            a.mean_normalized_cost = cost / a.steps as f64;
        }
        if a.executed_flops > 0 {
            a.speedup = a.full_flops as f64 / a.executed_flops as f64;
        }
        a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub policy: PolicyKind,
    /// Scheduler training seed, for learned schedules.
    pub training_seed: Option<u64>,
    pub observation: Option<ObservationSet>,
    pub greedy: bool,
    pub eval_seeds: Vec<u64>,
    pub aggregate: Aggregate,
    pub episodes: Vec<EpisodeSummary>,
}

pub(crate) fn make_decider<'a>(
    kind: PolicyKind,
    net: Option<&'a PolicyNet>,
    config: &ExperimentConfig,
    eval_seed: u64,
) -> Result<Box<dyn Decider + 'a>> {
    let learned = |restriction| -> Result<Box<dyn Decider + 'a>> {
        match net {
            Some(net) => Ok(Box::new(PolicyDecider {
                net,
                rng: Rng::stream(eval_seed, POLICY_STREAM),
                greedy: config.greedy,
                restriction,
            })),
            None => input_err(format!("schedule {} needs a checkpoint", kind.name())),
        }
    };
    match kind {
        PolicyKind::Full => Ok(Box::new(FixedDecider(ComputeAction::FULL))),
        PolicyKind::Threshold => Ok(Box::new(ThresholdDecider(ThresholdScheduler::new(config.teacher.clone())))),
        PolicyKind::Random => Ok(Box::new(RandomDecider(Rng::stream(eval_seed, RANDOM_STREAM)))),
        PolicyKind::Stage1 | PolicyKind::Stage2 => learned(Restriction::None),
        PolicyKind::ForceLlmFull => learned(Restriction::BackboneFull),
        PolicyKind::ForceAhFull => learned(Restriction::HeadFull),
    }
}

/// Runs `kind` on every seed of `seeds`. Returns the report and the per-step
/// trace of every episode, in seed order.
pub fn evaluate(
    model: &Surrogate,
    config: &ExperimentConfig,
    kind: PolicyKind,
    net: Option<&PolicyNet>,
    training_seed: Option<u64>,
    seeds: &[u64],
) -> Result<(EvalReport, Vec<Vec<TraceRow>>)> {
    let mut traces = Vec::with_capacity(seeds.len());
    let mut episodes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut decider = make_decider(kind, net, config, seed)?;
        let ep = run_episode(model, seed, decider.as_mut(), &config.teacher)?;
        let rows = trace_rows(&ep);
        let a = Aggregate::from_traces([rows.as_slice()]);
        episodes.push(EpisodeSummary {
            seed,
            success: ep.success,
            steps: a.steps,
            executed_flops: a.executed_flops,
            full_flops: a.full_flops,
            speedup: a.speedup,
            mean_rho: a.mean_rho,
            histogram: a.histogram,
        });
        traces.push(rows);
    }
    let aggregate = Aggregate::from_traces(traces.iter().map(Vec::as_slice));
    let report = EvalReport {
        config_hash: config.hash(),
        policy: kind,
        training_seed: kind.stage().and(training_seed),
        observation: net.map(|n| n.observation),
        greedy: config.greedy && net.is_some(),
        eval_seeds: seeds.to_vec(),
        aggregate,
        episodes,
    };
    Ok((report, traces))
}

/// Evaluates the configured schedule over the eval seeds. Learned schedules
/// use the checkpoint of the first training seed.
pub fn run_eval(config: &ExperimentConfig) -> Result<EvalReport> {
    Ok(eval_with_traces(config)?.0)
}

fn eval_with_traces(config: &ExperimentConfig) -> Result<(EvalReport, Vec<Vec<TraceRow>>)> {
    let model = load_surrogate(config)?;
    let kind = config.schedule();
    let seed = config.seeds[0];
    let net = match kind.stage() {
        Some(stage) => Some(load_policy(config, stage, config.ppo.observation, seed)?),
        None => None,
    };
    evaluate(&model, config, kind, net.as_ref(), Some(seed), &config.eval_seeds)
}

pub(crate) fn write_eval(config: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let (report, traces) = eval_with_traces(config)?;
    let mut files = Vec::new();
    for (seed, rows) in report.eval_seeds.iter().zip(&traces) {
        let path = config.out_dir.join(format!("trace_{seed}.csv"));
        write_trace(&path, rows)?;
        files.push(path);
    }
    let json = config.out_dir.join("report.json");
    write_json(&json, &report)?;
    let csv_path = config.out_dir.join("table.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(["seed", "success", "steps", "executed_flops", "full_flops", "speedup", "mean_rho"])?;
    for e in &report.episodes {
        w.write_record([
            e.seed.to_string(),
            (e.success as u8).to_string(),
            e.steps.to_string(),
            e.executed_flops.to_string(),
            e.full_flops.to_string(),
            e.speedup.to_string(),
            e.mean_rho.to_string(),
        ])?;
    }
    let a = &report.aggregate;
    w.write_record([
        "all".to_string(),
        a.success_rate.to_string(),
        a.steps.to_string(),
        a.executed_flops.to_string(),
        a.full_flops.to_string(),
        a.speedup.to_string(),
        a.mean_rho.to_string(),
    ])?;
    w.flush()?;
    files.push(json);
    files.push(csv_path);
    Ok(files)
}
