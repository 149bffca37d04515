use serde::{Deserialize, Serialize};

use super::ActionMask;
use crate::error::{input_err, Result};
use crate::executor::ComputeAction;
use crate::signals::SchedulerObservation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    /// ρ cutoffs for backbone levels 4, 3, 2, 1; below the last one the
    /// teacher asks for a full pass.
    pub rho_thresholds: [f64; 4],
    /// Head level 2 needs `v_trans` above this ...
    pub fast_trans: f64,
    /// ... and `v_grip` below this.
    pub still_grip: f64,
    /// Head level 1 needs `v_trans` above this.
    pub slow_trans: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            rho_thresholds: [0.995, 0.99, 0.97, 0.90],
            fast_trans: 0.03,
            still_grip: 0.01,
            slow_trans: 0.01,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.rho_thresholds;
        if !t.windows(2).all(|w| w[0] > w[1]) {
            return input_err("rho thresholds must be strictly descending");
        }
        if !(self.fast_trans > self.slow_trans) {
            return input_err("head speed thresholds must be strictly descending");
        }
        if self.still_grip < 0.0 {
            return input_err("grip threshold must be non-negative");
        }
        Ok(())
    }

    /// Unprojected teacher levels.
    pub fn levels(&self, obs: &SchedulerObservation) -> (u8, u8) {
        let backbone = self
            .rho_thresholds
            .iter()
            .position(|&t| obs.rho >= t)
            .map_or(0, |i| 4 - i as u8);
        let head = if obs.v_trans > self.fast_trans && obs.v_grip < self.still_grip {
            2
        } else if obs.v_trans > self.slow_trans {
            1
        } else {
            0
        };
        (backbone, head)
    }
}

/// Rule-based levels projected onto the mask.
pub fn teacher_action(obs: &SchedulerObservation, mask: &ActionMask, cfg: &TeacherConfig) -> Result<ComputeAction> {
    let (b, h) = cfg.levels(obs);
    mask.project(b, h)
}

/// The teacher with memory. The probe score is only refreshed by levels 0
/// and 1, so after a skip window the next free decision is capped at level 1;
/// otherwise a stale high score would keep the backbone skipped forever.
///
/// Used both as a stand-alone scheduler ([`ThresholdScheduler::decide`]) and
/// as the shaping target while another policy acts
/// ([`ThresholdScheduler::target`] then [`ThresholdScheduler::observe`]).
#[derive(Clone, Debug)]
pub struct ThresholdScheduler {
    cfg: TeacherConfig,
    stale: bool,
}

fn window_forced(mask: &ActionMask) -> bool {
    let mut valid = mask.valid();
    match valid.next() {
        Some(first) => valid.all(|a| a.backbone == first.backbone),
        None => false,
    }
}

impl ThresholdScheduler {
    pub fn new(cfg: TeacherConfig) -> Self {
        Self { cfg, stale: false }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    pub fn reset(&mut self) {
        self.stale = false;
    }

    /// What the teacher would choose now, without updating its memory.
    pub fn target(&self, obs: &SchedulerObservation, mask: &ActionMask) -> Result<ComputeAction> {
        let (mut b, h) = self.cfg.levels(obs);
        if self.stale && !window_forced(mask) {
            b = b.min(1);
        }
        mask.project(b, h)
    }

    /// Records the action actually executed under `mask`.
    pub fn observe(&mut self, executed: ComputeAction, mask: &ActionMask) {
        if !window_forced(mask) {
            self.stale = executed.backbone >= 2;
        }
    }

    pub fn decide(&mut self, obs: &SchedulerObservation, mask: &ActionMask) -> Result<ComputeAction> {
        let a = self.target(obs, mask)?;
        self.observe(a, mask);
        Ok(a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(rho: f64, v_grip: f64, v_trans: f64) -> SchedulerObservation {
        SchedulerObservation {
            rho,
            v_grip,
            v_trans,
            v_rot: 0.0,
            progress: 0.3,
        }
    }

    #[test]
    fn examples() {
        let cfg = TeacherConfig::default();
        let all = ActionMask::all();
        assert_eq!(
            teacher_action(&obs(1.0, 0.0, 0.05), &all, &cfg).unwrap(),
            ComputeAction::new(4, 2).unwrap()
        );
        assert_eq!(teacher_action(&obs(0.5, 0.0, 0.001), &all, &cfg).unwrap(), ComputeAction::FULL);
        let window = ActionMask::backbone_fixed(3);
        assert_eq!(teacher_action(&obs(0.5, 0.0, 0.0), &window, &cfg).unwrap().backbone, 3);
        assert_eq!(cfg.levels(&obs(0.992, 0.2, 0.05)), (3, 1));
        assert_eq!(cfg.levels(&obs(0.95, 0.0, 0.02)), (1, 1));
    }

    #[test]
    fn thresholds_validated() {
        let mut cfg = TeacherConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.rho_thresholds = [0.9, 0.95, 0.97, 0.99];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn scheduler_refreshes_after_skip() {
        let mut s = ThresholdScheduler::new(TeacherConfig::default());
        let o = obs(1.0, 0.0, 0.05);
        assert_eq!(s.decide(&o, &ActionMask::all()).unwrap().backbone, 4);
        assert_eq!(s.decide(&o, &ActionMask::backbone_fixed(4)).unwrap().backbone, 4);
        assert_eq!(s.decide(&o, &ActionMask::backbone_fixed(4)).unwrap().backbone, 4);
        assert_eq!(s.decide(&o, &ActionMask::all()).unwrap().backbone, 1);
        assert_eq!(s.decide(&o, &ActionMask::all()).unwrap().backbone, 4);
    }

    #[test]
    fn shadow_teacher_follows_executed_actions() {
        let mut s = ThresholdScheduler::new(TeacherConfig::default());
        let o = obs(1.0, 0.0, 0.05);
        let all = ActionMask::all();
        assert_eq!(s.target(&o, &all).unwrap().backbone, 4);
        // the agent skips on its own; the teacher then wants a refresh
        s.observe(ComputeAction::new(2, 0).unwrap(), &all);
        assert_eq!(s.target(&o, &all).unwrap().backbone, 1);
        s.observe(ComputeAction::new(1, 0).unwrap(), &all);
        assert_eq!(s.target(&o, &all).unwrap().backbone, 4);
    }
}
