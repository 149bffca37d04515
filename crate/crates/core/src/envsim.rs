//! A deterministic 2-D pick-and-place world with a scripted expert.
//!
//! The effector starts at the origin with the gripper open. The object has
//! to be grasped (close enough, gripper closed), carried to the goal and
//! released there (gripper opened past the release aperture). Opening the
//! gripper anywhere else drops the object.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{state_err, Result};
use crate::numerics::Rng;

pub const OBS_DIM: usize = 16;
pub const STATE_DIM: usize = 6;
pub const ACTION_DIM: usize = 4;
pub const DEFAULT_T_MAX: usize = 200;

pub const MAX_LINEAR: f64 = 0.05;
pub const MAX_ANGULAR: f64 = 0.1;
pub const MAX_APERTURE_RATE: f64 = 0.2;

/// Distance under which grasping and placing are possible.
pub const REACH_TOLERANCE: f64 = 0.02;
pub const GRASP_APERTURE: f64 = 0.2;
pub const RELEASE_APERTURE: f64 = 0.8;
/// Standard deviation of the distractor entries of every observation.
pub const DISTRACTOR_SIGMA: f64 = 0.01;
/// The effector is confined to this box.
pub const WORKSPACE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub effector: [f64; 2],
    pub orientation: f64,
    pub aperture: f64,
    pub object: [f64; 2],
    pub goal: [f64; 2],
    pub holding: bool,
    pub step: usize,
    pub t_max: usize,
    /// Seed of the episode; drives the distractor noise.
    pub seed: u64,
    pub done: bool,
    pub success: bool,
}

/// Fixed-length feature vector standing in for the camera image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFrame(pub [f64; OBS_DIM]);

impl ObservationFrame {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RobotAction {
    pub velocity: [f64; 2],
    pub angular: f64,
    pub aperture_rate: f64,
}

impl RobotAction {
    pub fn clipped(self) -> Self {
        Self {
            velocity: [
                self.velocity[0].clamp(-MAX_LINEAR, MAX_LINEAR),
                self.velocity[1].clamp(-MAX_LINEAR, MAX_LINEAR),
            ],
            angular: self.angular.clamp(-MAX_ANGULAR, MAX_ANGULAR),
            aperture_rate: self.aperture_rate.clamp(-MAX_APERTURE_RATE, MAX_APERTURE_RATE),
        }
    }

    /// Components divided by their clip bounds, so a clipped action lies in
    /// `[-1, 1]⁴`.
    pub fn normalized(&self) -> [f64; ACTION_DIM] {
        [
            self.velocity[0] / MAX_LINEAR,
            self.velocity[1] / MAX_LINEAR,
            self.angular / MAX_ANGULAR,
            self.aperture_rate / MAX_APERTURE_RATE,
        ]
    }

    pub fn from_normalized(v: &[f64]) -> Self {
        Self {
            velocity: [v[0] * MAX_LINEAR, v[1] * MAX_LINEAR],
            angular: v[2] * MAX_ANGULAR,
            aperture_rate: v[3] * MAX_APERTURE_RATE,
        }
    }
}

/// Result of [`step`].
#[derive(Clone, Debug)]
pub struct Transition {
    pub state: EnvState,
    pub obs: ObservationFrame,
    pub done: bool,
    pub success: bool,
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl EnvState {
    pub fn object_distance(&self) -> f64 {
        dist(self.effector, self.object)
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.effector, self.goal)
    }

    /// Remaining path length to task completion, in meters.
    pub fn remaining_distance(&self) -> f64 {
        if self.holding {
            self.goal_distance()
        } else {
            self.object_distance() + dist(self.object, self.goal)
        }
    }

    /// Proprioceptive robot state fed to the action head.
    pub fn robot_state(&self) -> [f64; STATE_DIM] {
        [
            self.effector[0],
            self.effector[1],
            self.orientation.sin(),
            self.orientation.cos(),
            self.aperture,
            if self.holding { 1.0 } else { 0.0 },
        ]
    }

    pub fn observe(&self) -> ObservationFrame {
        let mut noise = Rng::stream(self.seed, self.step as u64 + 1);
        let rel_obj = [self.object[0] - self.effector[0], self.object[1] - self.effector[1]];
        let rel_goal = [self.goal[0] - self.effector[0], self.goal[1] - self.effector[1]];
        let obj_goal = [self.goal[0] - self.object[0], self.goal[1] - self.object[1]];
        let mut f = [0.0; OBS_DIM];
        f[0] = rel_obj[0];
        f[1] = rel_obj[1];
        f[2] = rel_goal[0];
        f[3] = rel_goal[1];
        f[4] = self.object_distance();
        f[5] = self.goal_distance();
        f[6] = obj_goal[0];
        f[7] = obj_goal[1];
        f[8] = self.aperture;
        f[9] = self.orientation.sin();
        f[10] = self.orientation.cos();
        f[11] = if self.holding { 1.0 } else { 0.0 };
        for v in &mut f[12..] {
            *v = DISTRACTOR_SIGMA * noise.gaussian();
        }
        ObservationFrame(f)
    }
}

/// Starts an episode. The object is drawn from `x ∈ [0.15, 0.45]`, the goal
/// from `x ∈ [-0.45, -0.15]` (both with `y ∈ [-0.35, 0.35]`), so they are
/// always at least 0.3 m apart.
pub fn reset(seed: u64) -> (EnvState, ObservationFrame) {
    let mut rng = Rng::stream(seed, 0);
    let object = [rng.uniform_range(0.15, 0.45), rng.uniform_range(-0.35, 0.35)];
    let goal = [rng.uniform_range(-0.45, -0.15), rng.uniform_range(-0.35, 0.35)];
    let state = EnvState {
        effector: [0.0, 0.0],
        orientation: 0.0,
        aperture: 1.0,
        object,
        goal,
        holding: false,
        step: 0,
        t_max: DEFAULT_T_MAX,
        seed,
        done: false,
        success: false,
    };
    let obs = state.observe();
    (state, obs)
}

/// Applies one clipped action.
pub fn step(state: &EnvState, action: &RobotAction) -> Result<Transition> {
    if state.done || state.step >= state.t_max {
        return state_err("stepping a finished episode");
    }
    let a = action.clipped();
    let mut s = state.clone();
    s.effector[0] = (s.effector[0] + a.velocity[0]).clamp(-WORKSPACE, WORKSPACE);
    s.effector[1] = (s.effector[1] + a.velocity[1]).clamp(-WORKSPACE, WORKSPACE);
    s.orientation = wrap_angle(s.orientation + a.angular);
    s.aperture = (s.aperture + a.aperture_rate).clamp(0.0, 1.0);
    s.step += 1;

    if s.holding {
        s.object = s.effector;
        if s.aperture > RELEASE_APERTURE {
            s.holding = false;
            if s.goal_distance() < REACH_TOLERANCE {
                s.success = true;
            }
        }
    } else if s.object_distance() < REACH_TOLERANCE && s.aperture < GRASP_APERTURE {
        s.holding = true;
        s.object = s.effector;
    }
    s.done = s.success || s.step >= s.t_max;
    let obs = s.observe();
    Ok(Transition {
        done: s.done,
        success: s.success,
        state: s,
        obs,
    })
}

/// Gain of the expert's proportional controllers.
const EXPERT_GAIN: f64 = 0.5;
/// The expert starts opening the gripper this close to the goal.
const EXPERT_RELEASE_DISTANCE: f64 = 0.012;

/// Phase-conditioned proportional controller: approach the object while
/// turning to the carry heading, close the gripper on it, carry it to the
/// goal, open the gripper.
pub fn expert_action(state: &EnvState) -> RobotAction {
    let toward = |target: [f64; 2]| {
        [
            EXPERT_GAIN * (target[0] - state.effector[0]),
            EXPERT_GAIN * (target[1] - state.effector[1]),
        ]
    };
    let action = if !state.holding {
        let heading = (state.goal[1] - state.object[1]).atan2(state.goal[0] - state.object[0]);
        let at_object = state.object_distance() < REACH_TOLERANCE;
        RobotAction {
            velocity: toward(state.object),
            angular: EXPERT_GAIN * wrap_angle(heading - state.orientation),
            aperture_rate: if at_object { -MAX_APERTURE_RATE } else { MAX_APERTURE_RATE },
        }
    } else {
        let at_goal = state.goal_distance() < EXPERT_RELEASE_DISTANCE;
        RobotAction {
            velocity: toward(state.goal),
            angular: 0.0,
            aperture_rate: if at_goal { MAX_APERTURE_RATE } else { -MAX_APERTURE_RATE },
        }
    };
    action.clipped()
}

/// Gripper, translation and rotation speed between consecutive states.
pub fn motion_signals(prev: &EnvState, cur: &EnvState) -> (f64, f64, f64) {
    let v_grip = (cur.aperture - prev.aperture).abs();
    let v_trans = dist(cur.effector, prev.effector);
    let v_rot = wrap_angle(cur.orientation - prev.orientation).abs();
    (v_grip, v_trans, v_rot)
}

/// Runs the expert from `seed` until the episode ends.
pub fn expert_rollout(seed: u64) -> Vec<(EnvState, RobotAction)> {
    let (mut state, _) = reset(seed);
    let mut out = Vec::new();
    while !state.done {
        let a = expert_action(&state);
        let t = step(&state, &a).expect("episode not done");
        out.push((state, a));
        state = t.state;
    }
    out.push((state, RobotAction::default()));
    out
}

/// One row of a trajectory log.
#[derive(Clone, Debug, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub effector_x: f64,
    pub effector_y: f64,
    pub orientation: f64,
    pub aperture: f64,
    pub object_x: f64,
    pub object_y: f64,
    pub goal_x: f64,
    pub goal_y: f64,
    pub holding: bool,
    pub vx: f64,
    pub vy: f64,
    pub angular: f64,
    pub aperture_rate: f64,
    pub v_grip: f64,
    pub v_trans: f64,
    pub v_rot: f64,
    pub done: bool,
    pub success: bool,
}

impl TrajectoryRow {
    pub fn new(state: &EnvState, action: &RobotAction, next: &EnvState) -> Self {
        let (v_grip, v_trans, v_rot) = motion_signals(state, next);
        Self {
            step: state.step,
            effector_x: state.effector[0],
            effector_y: state.effector[1],
            orientation: state.orientation,
            aperture: state.aperture,
            object_x: state.object[0],
            object_y: state.object[1],
            goal_x: state.goal[0],
            goal_y: state.goal[1],
            holding: state.holding,
            vx: action.velocity[0],
            vy: action.velocity[1],
            angular: action.angular,
            aperture_rate: action.aperture_rate,
            v_grip,
            v_trans,
            v_rot,
            done: next.done,
            success: next.success,
        }
    }
}

/// Writes a trajectory log with a header row.
pub fn write_trajectory_csv<W: Write>(rows: &[TrajectoryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
