use serde::{Deserialize, Serialize};

use super::ActionMask;
use crate::error::{input_err, state_err, Result};
use crate::executor::{ComputeAction, JOINT_ACTIONS};
use crate::numerics::{Activation, DenseNet, ParamKey, Parameters, Rng};
use crate::signals::SchedulerObservation;

pub const TAG_POLICY: u32 = 100;
pub const TAG_VALUE: u32 = 101;

/// Which observation components the scheduler may see; hidden ones are fed
/// as zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservationSet {
    #[default]
    All,
    CkaProgress,
    SpeedProgress,
}

impl ObservationSet {
    pub fn keeps(&self, component: usize) -> bool {
        match self {
            ObservationSet::All => true,
            ObservationSet::CkaProgress => component == 0 || component == 4,
            ObservationSet::SpeedProgress => component != 0,
        }
    }
}

/// Fixed rescaling of `ξ` into a range the networks handle well: `1 − ρ` on
/// a log scale (the interesting values are between 1e-4 and 1e-1), speeds
/// divided by their per-step maxima.
pub fn features(obs: &SchedulerObservation, set: ObservationSet) -> [f64; 5] {
    let f = [
        ((1.0 - obs.rho).max(0.0) + 1e-6).log10() / 6.0 + 1.0,
        obs.v_grip / crate::envsim::MAX_APERTURE_RATE,
        obs.v_trans / (crate::envsim::MAX_LINEAR * std::f64::consts::SQRT_2),
        obs.v_rot / crate::envsim::MAX_ANGULAR,
        obs.progress,
    ];
    let mut out = [0.0; 5];
    for (i, v) in f.iter().enumerate() {
        if set.keeps(i) {
            out[i] = *v;
        }
    }
    out
}

/// Policy and value networks of the scheduler.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyNet {
    pub policy: DenseNet,
    pub value: DenseNet,
    pub observation: ObservationSet,
}

impl PolicyNet {
    pub fn new(hidden: usize, observation: ObservationSet, rng: &mut Rng) -> Result<Self> {
        if hidden == 0 {
            return input_err("hidden width must be positive");
        }
        let acts = [Activation::Tanh, Activation::Tanh, Activation::Identity];
        let mut policy = DenseNet::new(&[5, hidden, hidden, JOINT_ACTIONS], &acts, rng)?;
        policy.scale_output_layer(0.01);
        let mut value = DenseNet::new(&[5, hidden, hidden, 1], &acts, rng)?;
        value.scale_output_layer(0.1);
        Ok(Self {
            policy,
            value,
            observation,
        })
    }

    pub fn features(&self, obs: &SchedulerObservation) -> [f64; 5] {
        features(obs, self.observation)
    }
}

impl Parameters for PolicyNet {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        self.policy.visit_params_mut(TAG_POLICY, f);
        self.value.visit_params_mut(TAG_VALUE, f);
    }
}

/// Categorical distribution with exact zeros on masked entries.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedCategorical {
    pub probs: [f64; JOINT_ACTIONS],
    pub log_probs: [f64; JOINT_ACTIONS],
}

impl MaskedCategorical {
    pub fn from_logits(logits: &[f64], mask: &ActionMask) -> Result<Self> {
        mask.check()?;
        if logits.len() != JOINT_ACTIONS {
            return input_err("need one logit per joint action");
        }
        let max = (0..JOINT_ACTIONS)
            .filter(|&i| mask.0[i])
            .map(|i| logits[i])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return state_err("non-finite policy logits");
        }
        let mut probs = [0.0; JOINT_ACTIONS];
        let mut log_probs = [f64::NEG_INFINITY; JOINT_ACTIONS];
        let z: f64 = (0..JOINT_ACTIONS)
            .filter(|&i| mask.0[i])
            .map(|i| (logits[i] - max).exp())
            .sum();
        let log_z = z.ln();
        for i in 0..JOINT_ACTIONS {
            if mask.0[i] {
                log_probs[i] = logits[i] - max - log_z;
                probs[i] = log_probs[i].exp();
            }
        }
        Ok(Self { probs, log_probs })
    }

    pub fn sample(&self, rng: &mut Rng) -> ComputeAction {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return ComputeAction::from_index(i).expect("index in range");
                }
            }
        }
        ComputeAction::from_index(last).expect("index in range")
    }

    pub fn mode(&self) -> ComputeAction {
        let (i, _) = self
            .probs
            .iter()
            .enumerate()
            .fold((0, -1.0), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        ComputeAction::from_index(i).expect("index in range")
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, l)| -p * l)
            .sum()
    }
}

/// Distribution and value estimate for one observation.
pub fn policy_forward(net: &PolicyNet, obs: &SchedulerObservation, mask: &ActionMask) -> Result<(MaskedCategorical, f64)> {
    let x = net.features(obs);
    if x.iter().any(|v| !v.is_finite()) {
        return input_err("non-finite scheduler observation");
    }
    let logits = net.policy.forward(&x, None)?;
    let dist = MaskedCategorical::from_logits(&logits, mask)?;
    let value = net.value.forward(&x, None)?[0];
    Ok((dist, value))
}
