use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    compute_gae, run_episode, stage1_reward, stage2_reward, ActionMask, MaskedCategorical, ObservationSet,
    PolicyDecider, PolicyNet, RandomDecider, RewardConfig, Restriction, TeacherConfig, TAG_POLICY, TAG_VALUE,
};
use crate::costmodel::FlopsLedger;
use crate::error::{input_err, Error, Result};
use crate::executor::JOINT_ACTIONS;
use crate::numerics::{Adam, GradTape, Gradients, Matrix, Rng};
use crate::surrogate::Surrogate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub hidden: usize,
    pub clip: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub lr: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub episodes_per_update: usize,
    pub updates: usize,
    pub stage: u8,
    pub observation: ObservationSet,
    /// Consecutive below-baseline updates tolerated before aborting.
    pub divergence_patience: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            clip: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            epochs: 10,
            minibatch: 64,
            lr: 1e-3,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            episodes_per_update: 16,
            updates: 60,
            stage: 1,
            observation: ObservationSet::All,
            divergence_patience: 10,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return input_err("discount must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return input_err("GAE lambda must be in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return input_err("clip must be positive");
        }
        if self.stage != 1 && self.stage != 2 {
            return input_err("stage must be 1 or 2");
        }
        if self.epochs == 0 || self.minibatch == 0 || self.episodes_per_update == 0 || self.hidden == 0 {
            return input_err("epochs, minibatch, episodes and width must be positive");
        }
        if !(self.lr >= 0.0) || !(self.entropy_coef >= 0.0) || !(self.value_coef >= 0.0) {
            return input_err("learning rate and loss weights must be non-negative");
        }
        Ok(())
    }
}

/// Flattened experience of one update.
#[derive(Clone, Debug, Default)]
pub struct PpoBatch {
    pub features: Vec<[f64; 5]>,
    pub masks: Vec<ActionMask>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl PpoBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub total: f64,
}

/// Clipped-surrogate loss, value loss and entropy bonus over `idx`, with
/// gradients for both networks.
pub fn ppo_loss(net: &PolicyNet, batch: &PpoBatch, idx: &[usize], cfg: &PpoConfig) -> Result<(LossParts, Gradients)> {
    let n = idx.len();
    if n == 0 {
        return input_err("empty minibatch");
    }
    let mut x = Matrix::zeros(n, 5);
    for (r, &i) in idx.iter().enumerate() {
        x.row_mut(r).copy_from_slice(&batch.features[i]);
    }
    let nf = n as f64;

    let mut tape = GradTape::new();
    let xv = tape.constant(x.clone());
    let logits = net.policy.record(&mut tape, xv, TAG_POLICY)?;
    let mut g_logits = Matrix::zeros(n, JOINT_ACTIONS);
    let mut parts = LossParts::default();
    for (r, &i) in idx.iter().enumerate() {
        let dist = MaskedCategorical::from_logits(tape.value(logits).row(r), &batch.masks[i])?;
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let ratio = (dist.log_probs[a] - batch.old_log_probs[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        parts.policy -= (ratio * adv).min(clipped * adv) / nf;
        let entropy = dist.entropy();
        parts.entropy += entropy / nf;
        let active = if adv >= 0.0 { ratio <= 1.0 + cfg.clip } else { ratio >= 1.0 - cfg.clip };
        let g_logp = if active { -adv * ratio / nf } else { 0.0 };
        let row = g_logits.row_mut(r);
        for k in 0..JOINT_ACTIONS {
            let p = dist.probs[k];
            if p == 0.0 {
                continue;
            }
            let onehot = if k == a { 1.0 } else { 0.0 };
            row[k] = g_logp * (onehot - p) + cfg.entropy_coef / nf * p * (dist.log_probs[k] + entropy);
        }
    }
    let mut grads = tape.backward_from(logits, &g_logits)?;

    let mut vtape = GradTape::new();
    let xv = vtape.constant(x);
    let v = net.value.record(&mut vtape, xv, TAG_VALUE)?;
    let mut g_v = Matrix::zeros(n, 1);
    for (r, &i) in idx.iter().enumerate() {
        let e = vtape.value(v).get(r, 0) - batch.returns[i];
        parts.value += e * e / nf;
        g_v.set(r, 0, 2.0 * cfg.value_coef * e / nf);
    }
    grads.accumulate(&vtape.backward_from(v, &g_v)?);
    parts.total = parts.policy + cfg.value_coef * parts.value - cfg.entropy_coef * parts.entropy;
    Ok((parts, grads))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub update: usize,
    pub mean_reward: f64,
    pub mean_speedup: f64,
    pub success_rate: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

pub fn write_train_log<W: Write>(rows: &[TrainLogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Training seeds are far from the evaluation range.
pub fn training_seed(seed: u64, update: usize, episode: usize, per_update: usize) -> u64 {
    1_000_000 + seed * 100_000 + (update * per_update + episode) as u64
}

struct Collected {
    batch: PpoBatch,
    mean_reward: f64,
    success_rate: f64,
    speedup: f64,
}

#[allow(clippy::too_many_arguments)]
fn collect(
    model: &Surrogate,
    net: &PolicyNet,
    ppo: &PpoConfig,
    reward: &RewardConfig,
    teacher: &TeacherConfig,
    seed: u64,
    update: usize,
    rng: &mut Rng,
) -> Result<Collected> {
    let mut batch = PpoBatch::default();
    let mut total_reward = 0.0;
    let mut wins = 0;
    let mut ledger: Option<FlopsLedger> = None;
    for e in 0..ppo.episodes_per_update {
        let mut decider = PolicyDecider {
            net,
            rng: rng.split(),
            greedy: false,
            restriction: Restriction::None,
        };
        let ep = run_episode(model, training_seed(seed, update, e, ppo.episodes_per_update), &mut decider, teacher)?;
        let rewards: Vec<f64> = ep
            .steps
            .iter()
            .map(|s| match ppo.stage {
                1 => stage1_reward(&s.transition, s.teacher, reward),
                _ => stage2_reward(&s.transition, reward),
            })
            .collect();
        let mut values: Vec<f64> = ep.steps.iter().map(|s| s.value).collect();
        values.push(0.0);
        let dones: Vec<bool> = ep.steps.iter().map(|s| s.done).collect();
        let (adv, ret) = compute_gae(&rewards, &values, &dones, ppo.gamma, ppo.gae_lambda)?;
        total_reward += rewards.iter().sum::<f64>();
        wins += ep.success as usize;
        for (k, s) in ep.steps.iter().enumerate() {
            batch.features.push(net.features(&s.obs));
            batch.masks.push(s.mask);
            batch.actions.push(s.action.index());
            batch.old_log_probs.push(s.log_prob);
            batch.advantages.push(adv[k]);
            batch.returns.push(ret[k]);
        }
        match &mut ledger {
            Some(l) => l.merge(&ep.ledger)?,
            None => ledger = Some(ep.ledger),
        }
    }
    let n = ppo.episodes_per_update as f64;
    Ok(Collected {
        batch,
        mean_reward: total_reward / n,
        success_rate: wins as f64 / n,
        speedup: ledger.expect("at least one episode").speedup()?,
    })
}

/// Mean episode reward of the uniform-random scheduler on the first
/// update's seeds.
fn random_baseline(model: &Surrogate, ppo: &PpoConfig, reward: &RewardConfig, teacher: &TeacherConfig, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut decider = RandomDecider(Rng::stream(seed, 7));
    for e in 0..ppo.episodes_per_update {
        let ep = run_episode(model, training_seed(seed, 0, e, ppo.episodes_per_update), &mut decider, teacher)?;
        total += ep
            .steps
            .iter()
            .map(|s| match ppo.stage {
                1 => stage1_reward(&s.transition, s.teacher, reward),
                _ => stage2_reward(&s.transition, reward),
            })
            .sum::<f64>();
    }
    Ok(total / ppo.episodes_per_update as f64)
}

/// Trains a scheduler with masked PPO. Stage 2 must start from a stage-1
/// network.
pub fn train_scheduler(
    model: &Surrogate,
    ppo: &PpoConfig,
    reward: &RewardConfig,
    teacher: &TeacherConfig,
    seed: u64,
    init: Option<&PolicyNet>,
) -> Result<(PolicyNet, Vec<TrainLogRow>)> {
    ppo.validate()?;
    reward.validate()?;
    teacher.validate()?;
    let mut rng = Rng::stream(seed, 0x5eed);
    let mut net = match (ppo.stage, init) {
        (2, None) => return input_err("stage 2 needs a stage-1 initialization"),
        (_, Some(n)) => {
            let mut n = n.clone();
            n.observation = ppo.observation;
            n
        }
        (_, None) => PolicyNet::new(ppo.hidden, ppo.observation, &mut rng)?,
    };
    let baseline = random_baseline(model, ppo, reward, teacher, seed)?;
    let mut adam = Adam::new(ppo.lr);
    let mut log = Vec::with_capacity(ppo.updates);
    let mut below = 0;
    for update in 0..ppo.updates {
        let c = collect(model, &net, ppo, reward, teacher, seed, update, &mut rng)?;
        let mut batch = c.batch;
        let mean = batch.advantages.iter().sum::<f64>() / batch.len() as f64;
        let var = batch.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / batch.len() as f64;
        let std = var.sqrt().max(1e-8);
        batch.advantages.iter_mut().for_each(|a| *a = (*a - mean) / std);

        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut last = LossParts::default();
        for _ in 0..ppo.epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(ppo.minibatch) {
                let (parts, mut grads) = ppo_loss(&net, &batch, chunk, ppo)?;
                let norm = grads.global_norm();
                if norm > ppo.max_grad_norm {
                    grads.scale(ppo.max_grad_norm / norm);
                }
                adam.step(&mut net, &grads);
                last = parts;
            }
        }
        log.push(TrainLogRow {
            update,
            mean_reward: c.mean_reward,
            mean_speedup: c.speedup,
            success_rate: c.success_rate,
            entropy: last.entropy,
            policy_loss: last.policy,
            value_loss: last.value,
        });
        if c.mean_reward < baseline {
            below += 1;
            if below >= ppo.divergence_patience {
                return Err(Error::Diverged(format!(
                    "mean episode reward {:.3} below the random-policy baseline {:.3} for {} consecutive updates (update {})",
                    c.mean_reward, baseline, below, update
                )));
            }
        } else {
            below = 0;
        }
    }
    Ok((net, log))
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// A trained scheduler with its provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: u8,
    pub seed: u64,
    pub config_hash: String,
    pub net: PolicyNet,
}

impl Checkpoint {
    pub fn new(net: PolicyNet, stage: u8, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            stage,
            seed,
            config_hash: config_hash.into(),
            net,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::RejectedInput(format!("cannot read checkpoint {}: {e}", path.display())))?;
        let c: Checkpoint = serde_json::from_str(&text)?;
        if c.format_version != CHECKPOINT_FORMAT_VERSION {
            return input_err(format!("unsupported checkpoint format_version {}", c.format_version));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ComputeAction;
    use crate::numerics::Parameters;

    fn random_batch(n: usize, seed: u64, net: &PolicyNet) -> PpoBatch {
        let mut rng = Rng::new(seed);
        let mut b = PpoBatch::default();
        for _ in 0..n {
            let f = [rng.uniform(), rng.uniform() * 0.2, rng.uniform(), rng.uniform(), rng.uniform()];
            let mask = match rng.below(3) {
                0 => ActionMask::all(),
                1 => ActionMask::backbone_fixed(rng.below(5) as u8),
                _ => ActionMask::only(ComputeAction::from_index(rng.below(15)).unwrap()),
            };
            let logits = net.policy.forward(&f, None).unwrap();
            let dist = MaskedCategorical::from_logits(&logits, &mask).unwrap();
            let a = dist.sample(&mut rng);
            b.features.push(f);
            b.masks.push(mask);
            b.actions.push(a.index());
            // perturbed so ratios differ from 1 but stay inside the clip range
            b.old_log_probs.push(dist.log_probs[a.index()] + 0.05 * (rng.uniform() - 0.5));
            b.advantages.push(rng.gaussian());
            b.returns.push(rng.gaussian());
        }
        b
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = PpoConfig {
            entropy_coef: 0.05,
            ..Default::default()
        };
        for trial in 0..5 {
            let mut net = PolicyNet::new(8, ObservationSet::All, &mut Rng::new(trial)).unwrap();
            net.policy.scale_output_layer(50.0);
            let batch = random_batch(12, 100 + trial, &net);
            let idx: Vec<usize> = (0..batch.len()).collect();
            let (_, grads) = ppo_loss(&net, &batch, &idx, &cfg).unwrap();
            let mut checked = 0;
            for (key, g) in grads.iter() {
                for p in (0..g.data().len()).step_by(7) {
                    let analytic = g.data()[p];
                    let loss_at = |delta: f64| {
                        let mut n2 = net.clone();
                        n2.visit_params_mut(&mut |k, v| {
                            if k == *key {
                                v[p] += delta;
                            }
                        });
                        ppo_loss(&n2, &batch, &idx, &cfg).unwrap().0.total
                    };
                    let eps = 1e-5;
                    let fd = (loss_at(eps) - loss_at(-eps)) / (2.0 * eps);
                    let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                    assert!(rel < 1e-4, "{key:?}[{p}] analytic {analytic} fd {fd}");
                    checked += 1;
                }
            }
            assert!(checked > 20);
        }
    }

    /// One-step episodes: the right action depends on the first feature.
    #[test]
    fn learns_a_contextual_bandit() {
        let cfg = PpoConfig::default();
        let mut rng = Rng::new(3);
        let mut net = PolicyNet::new(cfg.hidden, ObservationSet::All, &mut rng).unwrap();
        let mut adam = Adam::new(1e-3);
        let target = |f0: f64| if f0 > 0.5 { 0 } else { 4 };
        let obs_of = |f0: f64| crate::signals::SchedulerObservation {
            rho: if f0 > 0.5 { 0.5 } else { 0.999 },
            v_grip: 0.0,
            v_trans: 0.03,
            v_rot: 0.0,
            progress: 0.5,
        };
        let accuracy = |net: &PolicyNet| {
            [0.0, 1.0]
                .iter()
                .map(|&f| {
                    let (d, _) = super::super::policy_forward(net, &obs_of(f), &ActionMask::all()).unwrap();
                    d.probs[target(f)]
                })
                .fold(1.0, f64::min)
        };
        let before = accuracy(&net);
        for _ in 0..80 {
            let mut b = PpoBatch::default();
            for _ in 0..256 {
                let f0 = rng.below(2) as f64;
                let o = obs_of(f0);
                let (d, v) = super::super::policy_forward(&net, &o, &ActionMask::all()).unwrap();
                let a = d.sample(&mut rng).index();
                let r = if a == target(f0) { 1.0 } else { 0.0 };
                b.features.push(net.features(&o));
                b.masks.push(ActionMask::all());
                b.actions.push(a);
                b.old_log_probs.push(d.log_probs[a]);
                b.advantages.push(r - v);
                b.returns.push(r);
            }
            let idx: Vec<usize> = (0..b.len()).collect();
            for _ in 0..cfg.epochs {
                let (_, g) = ppo_loss(&net, &b, &idx, &cfg).unwrap();
                adam.step(&mut net, &g);
            }
        }
        let after = accuracy(&net);
        assert!(after > 0.8 && after > before, "{before} -> {after}");
    }

    #[test]
    fn config_validation() {
        let ok = PpoConfig::default();
        assert!(ok.validate().is_ok());
        assert!(PpoConfig { gamma: 0.0, ..ok.clone() }.validate().is_err());
        assert!(PpoConfig { gae_lambda: 1.5, ..ok.clone() }.validate().is_err());
        assert!(PpoConfig { clip: 0.0, ..ok.clone() }.validate().is_err());
        assert!(PpoConfig { stage: 3, ..ok }.validate().is_err());
    }
}
