//! Experiment driver behind the `phasesched` binary: configuration, the six
//! modes and their report files.

mod ablate;
mod diagnose;
mod eval;
mod svg;
mod train;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{input_err, Result};
use crate::scheduler::{ObservationSet, PpoConfig, RewardConfig, TeacherConfig};
use crate::surrogate::{CloneOptions, DatasetOptions, PipelineConfig};

pub use ablate::{run_ablation, AblationReport, AblationRow};
pub use diagnose::{diagnostics, run_diagnose, DiagnoseReport, EpisodeDiagnostics};
pub use eval::{evaluate, run_eval, trace_rows, write_trace, Aggregate, EpisodeSummary, EvalReport, TraceRow};
pub use svg::timeline_svg;
pub use train::{checkpoint_path, run_clone, run_train, surrogate_dir, CloneRunReport, TrainReport, TrainSeedReport};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Clone,
    TrainStage1,
    TrainStage2,
    #[default]
    Eval,
    Ablate,
    Diagnose,
}

/// A schedule to run in place of the configured default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Full,
    Threshold,
    Stage1,
    Stage2,
    ForceLlmFull,
    ForceAhFull,
    Random,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::Full => "full",
            PolicyKind::Threshold => "threshold",
            PolicyKind::Stage1 => "stage1",
            PolicyKind::Stage2 => "stage2",
            PolicyKind::ForceLlmFull => "force-llm-full",
            PolicyKind::ForceAhFull => "force-ah-full",
            PolicyKind::Random => "random",
        }
    }

    /// The checkpoint stage this schedule needs, if any.
    pub fn stage(&self) -> Option<u8> {
        match self {
            PolicyKind::Stage1 => Some(1),
            PolicyKind::Stage2 | PolicyKind::ForceLlmFull | PolicyKind::ForceAhFull => Some(2),
            _ => None,
        }
    }
}

/// One experiment. Every field has a default, so `{}` is a valid config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Scheduler training seeds. Eval and diagnose use the first one.
    pub seeds: Vec<u64>,
    pub eval_seeds: Vec<u64>,
    pub diagnose_seeds: Vec<u64>,
    /// Schedule for eval and diagnose; stage 2 when unset.
    pub schedule: Option<PolicyKind>,
    /// Take the most likely action instead of a seeded sample.
    pub greedy: bool,
    pub out_dir: PathBuf,
    /// Where the surrogate bundle and checkpoints live; `out_dir` if unset.
    pub artifacts_dir: Option<PathBuf>,
    pub clone_seed: u64,
    pub pipeline: PipelineConfig,
    pub dataset: DatasetOptions,
    pub clone: CloneOptions,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub teacher: TeacherConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            mode: Mode::default(),
            seeds: (0..5).collect(),
            eval_seeds: (1000..1100).collect(),
            diagnose_seeds: vec![1000],
            schedule: None,
            greedy: false,
            out_dir: PathBuf::from("out"),
            artifacts_dir: None,
            clone_seed: 0,
            pipeline: PipelineConfig::default(),
            dataset: DatasetOptions::default(),
            clone: CloneOptions::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            teacher: TeacherConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        self.ppo.validate()?;
        self.reward.validate()?;
        self.teacher.validate()?;
        if self.seeds.is_empty() {
            return input_err("no training seeds");
        }
        if self.eval_seeds.is_empty() {
            return input_err("no evaluation seeds");
        }
        Ok(())
    }

    pub fn artifacts(&self) -> &Path {
        self.artifacts_dir.as_deref().unwrap_or(&self.out_dir)
    }

    pub fn schedule(&self) -> PolicyKind {
        self.schedule.unwrap_or(PolicyKind::Stage2)
    }

    /// SHA-256 over everything that can change a result. Output locations
    /// and the mode are left out so the same experiment hashes the same
    /// wherever it is written.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.mode = Mode::default();
        c.out_dir = PathBuf::new();
        c.artifacts_dir = None;
        let json = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Summary handed back to the CLI after a successful run.
#[derive(Clone, Debug, Serialize)]
pub struct RunOutcome {
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub config_hash: String,
    pub files: Vec<PathBuf>,
}

/// Runs `config.mode` and writes its artifacts.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let files = match config.mode {
        Mode::Clone => train::write_clone(config)?,
        Mode::TrainStage1 => train::write_train(config, 1)?,
        Mode::TrainStage2 => train::write_train(config, 2)?,
        Mode::Eval => eval::write_eval(config)?,
        Mode::Ablate => ablate::write_ablation(config)?,
        Mode::Diagnose => diagnose::write_diagnose(config)?,
    };
    Ok(RunOutcome {
        mode: config.mode,
        out_dir: config.out_dir.clone(),
        config_hash: config.hash(),
        files,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub(crate) fn observation_name(set: ObservationSet) -> &'static str {
    match set {
        ObservationSet::All => "all",
        ObservationSet::CkaProgress => "cka-progress",
        ObservationSet::SpeedProgress => "speed-progress",
    }
}
