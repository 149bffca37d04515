use serde::{Deserialize, Serialize};

use crate::envsim::{EnvState, MAX_LINEAR};
use crate::error::{input_err, Result};
use crate::executor::ComputeAction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// Weight of the normalized step cost.
    pub lambda_cost: f64,
    /// Weight of backbone disagreement with the teacher.
    pub lambda_backbone: f64,
    /// Weight of head disagreement with the teacher.
    pub lambda_head: f64,
    /// Weight of the reuse horizon opened by a skip level.
    pub lambda_reuse: f64,
    pub success_bonus: f64,
    /// Weight of the per-step distance-decrease bonus.
    pub shaping: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_cost: 0.1,
            lambda_backbone: 0.15,
            lambda_head: 0.05,
            lambda_reuse: 0.01,
            success_bonus: 10.0,
            shaping: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_cost,
            self.lambda_backbone,
            self.lambda_head,
            self.lambda_reuse,
            self.success_bonus,
            self.shaping,
        ];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return input_err("reward weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// What the reward functions need to know about one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTransition {
    /// The episode ended in success at this step.
    pub success: bool,
    /// Decrease of the remaining task distance, in units of one maximal
    /// translation step.
    pub progress: f64,
    /// Normalized compute cost of the step.
    pub cost: f64,
    pub action: ComputeAction,
    /// The backbone level was dictated by an open skip window.
    pub forced: bool,
}

impl StepTransition {
    pub fn progress_between(prev: &EnvState, cur: &EnvState) -> f64 {
        (prev.remaining_distance() - cur.remaining_distance()) / MAX_LINEAR
    }
}

/// Reuse horizon opened by choosing backbone level `b`.
pub fn reuse_horizon(b: u8) -> f64 {
    if b >= 2 {
        (b - 1) as f64
    } else {
        0.0
    }
}

fn task_reward(t: &StepTransition, cfg: &RewardConfig) -> f64 {
    let bonus = if t.success { cfg.success_bonus } else { 0.0 };
    bonus + cfg.shaping * t.progress
}

/// Teacher-shaped reward. The horizon penalty is charged once, on the step
/// that opens the window.
pub fn stage1_reward(t: &StepTransition, teacher: ComputeAction, cfg: &RewardConfig) -> f64 {
    let horizon = if t.forced { 0.0 } else { reuse_horizon(t.action.backbone) };
    task_reward(t, cfg)
        - cfg.lambda_cost * t.cost
        - cfg.lambda_backbone * t.action.backbone.abs_diff(teacher.backbone) as f64
        - cfg.lambda_head * t.action.head.abs_diff(teacher.head) as f64
        - cfg.lambda_reuse * horizon
}

pub fn stage2_reward(t: &StepTransition, cfg: &RewardConfig) -> f64 {
    task_reward(t, cfg) - cfg.lambda_cost * t.cost
}
