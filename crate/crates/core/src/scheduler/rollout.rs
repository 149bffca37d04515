use serde::{Deserialize, Serialize};

use super::{policy_forward, ActionMask, PolicyNet, TeacherConfig, ThresholdScheduler};
use crate::costmodel::FlopsLedger;
use crate::envsim::{self, EnvState};
use crate::error::{state_err, Result};
use crate::executor::{ComputeAction, Executor};
use crate::numerics::Rng;
use crate::scheduler::StepTransition;
use crate::signals::{build_observation, SchedulerObservation};
use crate::surrogate::Surrogate;

/// A chosen action plus what the learner needs to remember about it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub action: ComputeAction,
    /// Log-probability under the deciding policy (NaN for rule-based ones).
    pub log_prob: f64,
    pub value: f64,
}

impl Decision {
    pub fn plain(action: ComputeAction) -> Self {
        Self {
            action,
            log_prob: f64::NAN,
            value: f64::NAN,
        }
    }
}

/// Anything that picks a compute action each control step.
pub trait Decider {
    fn decide(&mut self, obs: &SchedulerObservation, mask: &ActionMask) -> Result<Decision>;

    /// Called at the start of every episode.
    fn reset(&mut self) {}
}

/// Always asks for the same levels (projected onto the mask).
pub struct FixedDecider(pub ComputeAction);

impl Decider for FixedDecider {
    fn decide(&mut self, _: &SchedulerObservation, mask: &ActionMask) -> Result<Decision> {
        Ok(Decision::plain(mask.project(self.0.backbone, self.0.head)?))
    }
}

/// Uniform over the valid actions.
pub struct RandomDecider(pub Rng);

impl Decider for RandomDecider {
    fn decide(&mut self, _: &SchedulerObservation, mask: &ActionMask) -> Result<Decision> {
        let valid: Vec<ComputeAction> = mask.valid().collect();
        if valid.is_empty() {
            return state_err("every action is masked");
        }
        Ok(Decision::plain(valid[self.0.below(valid.len())]))
    }
}

pub struct ThresholdDecider(pub ThresholdScheduler);

impl Decider for ThresholdDecider {
    fn decide(&mut self, obs: &SchedulerObservation, mask: &ActionMask) -> Result<Decision> {
        Ok(Decision::plain(self.0.decide(obs, mask)?))
    }

    fn reset(&mut self) {
        self.0.reset();
    }
}

/// Restricts a learned policy to one branch at full compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Restriction {
    None,
    BackboneFull,
    HeadFull,
}

impl Restriction {
    pub fn apply(&self, mask: &ActionMask) -> ActionMask {
        let mut m = *mask;
        for a in mask.valid() {
            let drop = match self {
                Restriction::None => false,
                Restriction::BackboneFull => a.backbone != 0,
                Restriction::HeadFull => a.head != 0,
            };
            if drop {
                m.0[a.index()] = false;
            }
        }
        // a forced window can leave nothing; fall back to the window itself
        if m.count() == 0 {
            *mask
        } else {
            m
        }
    }
}

/// Samples from (or takes the mode of) a trained scheduler.
pub struct PolicyDecider<'a> {
    pub net: &'a PolicyNet,
    pub rng: Rng,
    pub greedy: bool,
    pub restriction: Restriction,
}

impl Decider for PolicyDecider<'_> {
    fn decide(&mut self, obs: &SchedulerObservation, mask: &ActionMask) -> Result<Decision> {
        let mask = self.restriction.apply(mask);
        let (dist, value) = policy_forward(self.net, obs, &mask)?;
        let action = if self.greedy { dist.mode() } else { dist.sample(&mut self.rng) };
        Ok(Decision {
            action,
            log_prob: dist.log_probs[action.index()],
            value,
        })
    }
}

/// Everything logged about one control step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub obs: SchedulerObservation,
    pub mask: ActionMask,
    pub teacher: ComputeAction,
    pub action: ComputeAction,
    pub forced: bool,
    pub log_prob: f64,
    pub value: f64,
    pub cost: f64,
    /// Probe score produced by this step (stale on skipped steps).
    pub rho: f64,
    pub transition: StepTransition,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub steps: Vec<StepLog>,
    pub success: bool,
    pub ledger: FlopsLedger,
    pub final_state: EnvState,
}

/// Runs one episode with scheduled inference.
pub fn run_episode(model: &Surrogate, seed: u64, decider: &mut dyn Decider, teacher: &TeacherConfig) -> Result<EpisodeRecord> {
    decider.reset();
    let (mut state, mut obs) = envsim::reset(seed);
    let mut prev = state.clone();
    let mut ex = Executor::new(model)?;
    let mut steps = Vec::new();
    let mut shadow = ThresholdScheduler::new(teacher.clone());
    while !state.done {
        let mask = ex.mask();
        let xi = build_observation(ex.caches().backbone.rho, &prev, &state)?;
        let teacher_choice = shadow.target(&xi, &mask)?;
        let d = decider.decide(&xi, &mask)?;
        if !mask.allows(d.action) {
            return state_err(format!("decider chose masked action {:?}", d.action));
        }
        let (out, cost) = ex.step(d.action, &obs, &state)?;
        debug_assert_eq!(out.executed, d.action);
        shadow.observe(out.executed, &mask);
        let t = envsim::step(&state, &out.action)?;
        steps.push(StepLog {
            step: state.step,
            obs: xi,
            mask,
            teacher: teacher_choice,
            action: out.executed,
            forced: out.forced,
            log_prob: d.log_prob,
            value: d.value,
            cost,
            rho: out.rho,
            transition: StepTransition {
                success: t.success,
                progress: StepTransition::progress_between(&state, &t.state),
                cost,
                action: out.executed,
                forced: out.forced,
            },
            done: t.done,
        });
        prev = state;
        state = t.state;
        obs = t.obs;
    }
    Ok(EpisodeRecord {
        seed,
        success: state.success,
        steps,
        ledger: ex.into_ledger(),
        final_state: state,
    })
}
