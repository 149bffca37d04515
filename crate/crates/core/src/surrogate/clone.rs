use serde::{Deserialize, Serialize};

use super::{PipelineConfig, Surrogate, SurrogateWeights, TAG_BLOCK_BASE, TAG_ENCODER, TAG_HEAD, TAG_READOUT};
use crate::envsim::{self, RobotAction, ACTION_DIM, OBS_DIM, STATE_DIM};
use crate::error::{input_err, Result};
use crate::numerics::{Adam, GradTape, Gradients, Matrix, Rng, Var};

/// One supervised example: what the model sees and what the expert did.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub obs: [f64; OBS_DIM],
    pub state: [f64; STATE_DIM],
    /// Expert action in normalized units.
    pub action: [f64; ACTION_DIM],
    /// Observation from a few steps earlier in the same episode (or `obs`
    /// itself at the first step). Used as the stale anchor when training
    /// through the partial-recompute path.
    pub anchor_obs: [f64; OBS_DIM],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetOptions {
    /// Clean expert episodes, seeds `0..episodes`.
    pub episodes: u64,
    /// Episodes where the executed action is perturbed but the label is the
    /// clean expert action.
    pub noisy_episodes: u64,
    /// Perturbation std in normalized action units.
    pub noise_std: f64,
    /// Anchor lag is drawn uniformly from `1..=max_anchor_lag`.
    pub max_anchor_lag: usize,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            episodes: 200,
            noisy_episodes: 200,
            noise_std: 0.3,
            max_anchor_lag: 8,
        }
    }
}

const NOISY_SEED_BASE: u64 = 100_000;

/// Expert demonstrations. Seeds stay below the evaluation range.
pub fn collect_dataset(opts: &DatasetOptions) -> Vec<Sample> {
    let mut data = Vec::new();
    for seed in 0..opts.episodes {
        rollout_into(&mut data, seed, 0.0, opts.max_anchor_lag);
    }
    for k in 0..opts.noisy_episodes {
        rollout_into(&mut data, NOISY_SEED_BASE + k, opts.noise_std, opts.max_anchor_lag);
    }
    data
}

fn rollout_into(data: &mut Vec<Sample>, seed: u64, noise_std: f64, max_lag: usize) {
    let (mut state, mut obs) = envsim::reset(seed);
    let mut noise = Rng::stream(seed, u64::MAX);
    let mut lags = Rng::stream(seed, u64::MAX - 1);
    let mut history: Vec<[f64; OBS_DIM]> = Vec::new();
    while !state.done {
        let expert = envsim::expert_action(&state);
        let lag = 1 + lags.below(max_lag.max(1));
        let anchor_obs = match history.len().checked_sub(lag) {
            Some(i) => history[i],
            None => history.first().copied().unwrap_or(obs.0),
        };
        history.push(obs.0);
        data.push(Sample {
            obs: obs.0,
            state: state.robot_state(),
            action: expert.normalized(),
            anchor_obs,
        });
        let mut exec = expert.normalized();
        if noise_std > 0.0 {
            for v in &mut exec {
                *v += noise_std * noise.gaussian();
            }
        }
        let t = envsim::step(&state, &RobotAction::from_normalized(&exec)).expect("episode running");
        state = t.state;
        obs = t.obs;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CloneOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate reached at the last epoch (geometric decay).
    pub lr_final: f64,
    /// Share of every minibatch routed through the partial-recompute path
    /// (first and last layer fresh, the rest from the anchor).
    pub partial_fraction: f64,
}

impl Default for CloneOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            lr: 3e-3,
            lr_final: 1e-4,
            partial_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneReport {
    /// Mean minibatch loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub samples: usize,
}

fn record_encoder(cfg: &PipelineConfig, w: &SurrogateWeights, tape: &mut GradTape, obs: &[&[f64; OBS_DIM]]) -> Result<Var> {
    let t = cfg.tokens;
    let mut enc_in = Matrix::zeros(obs.len() * t, cfg.encoder_input());
    for (n, o) in obs.iter().enumerate() {
        for i in 0..t {
            let row = enc_in.row_mut(n * t + i);
            row[..cfg.obs_dim].copy_from_slice(&o[..]);
            row[cfg.obs_dim + i] = 1.0;
        }
    }
    let x = tape.constant(enc_in);
    w.encoder.record(tape, x, TAG_ENCODER)
}

fn record_layer(cfg: &PipelineConfig, w: &SurrogateWeights, tape: &mut GradTape, h: Var, l: usize) -> Result<Var> {
    let t = cfg.tokens;
    let rows = tape.value(h).rows();
    let q = tape.constant(Matrix::row_vector(&cfg.instruction));
    let q = tape.repeat_rows(q, rows);
    let mean = tape.group_mean(h, t)?;
    let mean = tape.repeat_rows(mean, t);
    let mixed = tape.add(h, mean)?;
    let input = tape.concat(&[mixed, q])?;
    let r = w.blocks[l].record(tape, input, TAG_BLOCK_BASE + l as u32)?;
    tape.add(h, r)
}

/// Records the pipeline on `tape`. Samples in `full` run every layer;
/// samples in `partial` recompute only the first and last layer, with the
/// intermediate layers replayed from their anchor observation. Returns the
/// readout of every refinement state `x¹…x^M` side by side, `B × (M·A)`,
/// rows ordered `full` then `partial`.
pub(crate) fn record_batch(
    cfg: &PipelineConfig,
    w: &SurrogateWeights,
    tape: &mut GradTape,
    full: &[&Sample],
    partial: &[&Sample],
) -> Result<Var> {
    let t = cfg.tokens;
    let depth = cfg.depth;
    let mut zs = Vec::with_capacity(2);
    if !full.is_empty() {
        let obs: Vec<_> = full.iter().map(|s| &s.obs).collect();
        let mut h = record_encoder(cfg, w, tape, &obs)?;
        for l in 0..depth {
            h = record_layer(cfg, w, tape, h, l)?;
        }
        zs.push(tape.group_mean(h, t)?);
    }
    if !partial.is_empty() {
        let anchors: Vec<_> = partial.iter().map(|s| &s.anchor_obs).collect();
        let ha = record_encoder(cfg, w, tape, &anchors)?;
        let h1a = record_layer(cfg, w, tape, ha, 0)?;
        let mut u = h1a;
        for l in 1..depth - 1 {
            u = record_layer(cfg, w, tape, u, l)?;
        }
        let obs: Vec<_> = partial.iter().map(|s| &s.obs).collect();
        let hc = record_encoder(cfg, w, tape, &obs)?;
        let h1c = record_layer(cfg, w, tape, hc, 0)?;
        let neg = tape.scale(h1a, -1.0);
        let shift = tape.add(h1c, neg)?;
        let input = tape.add(u, shift)?;
        let h = record_layer(cfg, w, tape, input, depth - 1)?;
        zs.push(tape.group_mean(h, t)?);
    }
    let z = if zs.len() == 1 { zs[0] } else { tape.stack_rows(&zs)? };

    let b = full.len() + partial.len();
    let mut states = Matrix::zeros(b, cfg.state_dim);
    for (n, s) in full.iter().chain(partial).enumerate() {
        states.row_mut(n).copy_from_slice(&s.state);
    }
    let s = tape.constant(states);
    let mut xm = tape.constant(Matrix::zeros(b, cfg.action_dim));
    let mut outs = Vec::with_capacity(cfg.refine_steps);
    for m in 0..cfg.refine_steps {
        let mut code = Matrix::zeros(b, cfg.refine_steps);
        for n in 0..b {
            code.set(n, m, 1.0);
        }
        let code = tape.constant(code);
        let input = tape.concat(&[xm, z, s, code])?;
        let d = w.head.record(tape, input, TAG_HEAD)?;
        xm = tape.add(xm, d)?;
        outs.push(w.readout.record(tape, xm, TAG_READOUT)?);
    }
    tape.concat(&outs)
}

/// Weight of refinement state `m` (1-based) in the loss: proportional to
/// `m`, so the final state dominates but every state is pulled toward the
/// target.
fn step_weights(steps: usize) -> Vec<f64> {
    let total = (steps * (steps + 1) / 2) as f64;
    (1..=steps).map(|m| m as f64 / total).collect()
}

/// Step-weighted mean squared error over all refinement readouts, and its
/// gradient.
fn mse(pred: &Matrix, batch: &[&Sample]) -> (f64, Matrix) {
    let a = ACTION_DIM;
    let steps = pred.cols() / a;
    let weights = step_weights(steps);
    let n = (batch.len() * a) as f64;
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    let mut loss = 0.0;
    for (r, s) in batch.iter().enumerate() {
        for (m, w) in weights.iter().enumerate() {
            for (k, target) in s.action.iter().enumerate() {
                let e = pred.get(r, m * a + k) - target;
                loss += w * e * e / n;
                grad.set(r, m * a + k, 2.0 * w * e / n);
            }
        }
    }
    (loss, grad)
}

/// Behavior-cloning loss of one minibatch and its gradient. `full` samples
/// run the whole backbone, `partial` ones the level-1 path from their anchor.
pub fn clone_loss(
    cfg: &PipelineConfig,
    w: &SurrogateWeights,
    full: &[&Sample],
    partial: &[&Sample],
) -> Result<(f64, Gradients)> {
    let mut tape = GradTape::new();
    let out = record_batch(cfg, w, &mut tape, full, partial)?;
    let batch: Vec<&Sample> = full.iter().chain(partial).copied().collect();
    let (loss, grad) = mse(tape.value(out), &batch);
    Ok((loss, tape.backward_from(out, &grad)?))
}

/// Trains every pipeline component end to end on `data` and returns the
/// frozen result.
pub fn clone_behavior(
    cfg: &PipelineConfig,
    data: &[Sample],
    opts: &CloneOptions,
    seed: u64,
) -> Result<(Surrogate, CloneReport)> {
    if data.is_empty() {
        return input_err("empty behavior-cloning dataset");
    }
    if opts.epochs == 0
        || opts.batch_size == 0
        || !(opts.lr >= 0.0)
        || !(opts.lr_final >= 0.0)
        || !(0.0..=1.0).contains(&opts.partial_fraction)
    {
        return input_err("invalid behavior-cloning options");
    }
    let mut rng = Rng::new(seed);
    let mut w = SurrogateWeights::new(cfg, &mut rng)?;
    let mut adam = Adam::new(opts.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        adam.lr = if opts.epochs == 1 || opts.lr == 0.0 {
            opts.lr
        } else {
            let frac = epoch as f64 / (opts.epochs - 1) as f64;
            opts.lr * (opts.lr_final / opts.lr).powf(frac)
        };
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let n_partial = (batch.len() as f64 * opts.partial_fraction).round() as usize;
            let (full, partial) = batch.split_at(batch.len() - n_partial);
            let (loss, grads) = clone_loss(cfg, &w, full, partial)?;
            adam.step(&mut w, &grads);
            total += loss * batch.len() as f64;
        }
        epoch_losses.push(total / data.len() as f64);
    }
    let surrogate = Surrogate::new(cfg.clone(), w)?;
    Ok((
        surrogate,
        CloneReport {
            epoch_losses,
            samples: data.len(),
        },
    ))
}

/// Success rate of the unscheduled pipeline over `seeds`.
pub fn evaluate_policy(model: &Surrogate, seeds: impl IntoIterator<Item = u64>) -> Result<f64> {
    let mut n = 0usize;
    let mut wins = 0usize;
    for seed in seeds {
        let (mut state, mut obs) = envsim::reset(seed);
        while !state.done {
            let a = model.act(&obs, &state)?;
            let t = envsim::step(&state, &a)?;
            state = t.state;
            obs = t.obs;
        }
        n += 1;
        wins += state.success as usize;
    }
    if n == 0 {
        return input_err("no evaluation seeds");
    }
    Ok(wins as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamKey;

    fn small() -> PipelineConfig {
        let mut cfg = PipelineConfig::new(3, 6, 3, 3);
        cfg.ff_width = 5;
        cfg.head_hidden = 7;
        cfg
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            clone_behavior(&small(), &[], &CloneOptions::default(), 0),
            Err(crate::Error::RejectedInput(_))
        ));
    }

    #[test]
    fn batched_tape_matches_plain_pipeline() {
        let cfg = PipelineConfig::default();
        let w = SurrogateWeights::new(&cfg, &mut Rng::new(3)).unwrap();
        let model = Surrogate::new(cfg.clone(), w.clone()).unwrap();
        let data = collect_dataset(&DatasetOptions {
            episodes: 1,
            noisy_episodes: 0,
            noise_std: 0.0,
            max_anchor_lag: 4,
        });
        let batch: Vec<&Sample> = data.iter().take(5).collect();
        let mut tape = GradTape::new();
        let out = record_batch(&cfg, &w, &mut tape, &batch, &[]).unwrap();
        for (r, s) in batch.iter().enumerate() {
            let (state, obs) = (s.state, crate::envsim::ObservationFrame(s.obs));
            let tokens = model.encode(&obs).unwrap();
            let trace = model.backbone_full(&tokens).unwrap();
            let head = model.head_full(&trace.z, &state, &model.x0()).unwrap();
            let y = w.readout.forward(head.last(), None).unwrap();
            let last = (cfg.refine_steps - 1) * ACTION_DIM;
            for k in 0..ACTION_DIM {
                assert!((tape.value(out).get(r, last + k) - y[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn partial_rows_match_replay_formula() {
        let cfg = PipelineConfig::default();
        let w = SurrogateWeights::new(&cfg, &mut Rng::new(4)).unwrap();
        let model = Surrogate::new(cfg.clone(), w.clone()).unwrap();
        let data = collect_dataset(&DatasetOptions {
            episodes: 1,
            noisy_episodes: 0,
            noise_std: 0.0,
            max_anchor_lag: 6,
        });
        let batch: Vec<&Sample> = data.iter().skip(10).take(4).collect();
        assert!(batch.iter().any(|s| s.anchor_obs != s.obs));
        let mut tape = GradTape::new();
        let out = record_batch(&cfg, &w, &mut tape, &[], &batch).unwrap();
        let depth = cfg.depth;
        for (r, s) in batch.iter().enumerate() {
            let anchor = model
                .backbone_full(&model.encode(&crate::envsim::ObservationFrame(s.anchor_obs)).unwrap())
                .unwrap();
            let h1 = model
                .backbone_layer(0, &model.encode(&crate::envsim::ObservationFrame(s.obs)).unwrap())
                .unwrap();
            let input = anchor.hidden[depth - 1]
                .add(&h1)
                .unwrap()
                .add(&anchor.hidden[1].scale(-1.0))
                .unwrap();
            let z = model.backbone_layer(depth - 1, &input).unwrap().column_means();
            let head = model.head_full(&z, &s.state, &model.x0()).unwrap();
            let y = w.readout.forward(head.last(), None).unwrap();
            let last = (cfg.refine_steps - 1) * ACTION_DIM;
            for k in 0..ACTION_DIM {
                assert!((tape.value(out).get(r, last + k) - y[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pipeline_gradient_matches_finite_differences() {
        let cfg = small();
        let mut w = SurrogateWeights::new(&cfg, &mut Rng::new(11)).unwrap();
        // un-shrink residual branches so every parameter matters
        for b in &mut w.blocks {
            b.scale_output_layer(10.0);
        }
        w.head.scale_output_layer(10.0);
        let data = collect_dataset(&DatasetOptions {
            episodes: 1,
            noisy_episodes: 0,
            noise_std: 0.0,
            max_anchor_lag: 4,
        });
        let batch: Vec<&Sample> = data.iter().step_by(7).take(3).collect();
        let (full, partial) = batch.split_at(1);
        let loss_of = |w: &SurrogateWeights| {
            let mut tape = GradTape::new();
            let out = record_batch(&cfg, w, &mut tape, full, partial).unwrap();
            mse(tape.value(out), &batch).0
        };
        let mut tape = GradTape::new();
        let out = record_batch(&cfg, &w, &mut tape, full, partial).unwrap();
        let (_, g) = mse(tape.value(out), &batch);
        let grads = tape.backward_from(out, &g).unwrap();

        let keys = [
            (ParamKey::weight(TAG_ENCODER, 0), 5),
            (ParamKey::bias(TAG_BLOCK_BASE, 0), 2),
            (ParamKey::weight(TAG_BLOCK_BASE + 2, 1), 4),
            (ParamKey::weight(TAG_HEAD, 1), 3),
            (ParamKey::bias(TAG_READOUT, 0), 1),
        ];
        let eps = 1e-5;
        for (key, idx) in keys {
            let analytic = grads.get(&key).unwrap().data()[idx];
            let bump = |delta: f64| {
                let mut w2 = w.clone();
                crate::numerics::Parameters::visit_params_mut(&mut w2, &mut |k, p| {
                    if k == key {
                        p[idx] += delta;
                    }
                });
                loss_of(&w2)
            };
            let fd = (bump(eps) - bump(-eps)) / (2.0 * eps);
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-4, "{key:?}[{idx}]: analytic {analytic} fd {fd}");
        }
    }

    #[test]
    fn memorizes_one_sample() {
        let cfg = small();
        let data = vec![Sample {
            obs: [0.1; OBS_DIM],
            state: [0.2, -0.1, 0.0, 1.0, 1.0, 0.0],
            action: [0.5, -0.3, 0.2, 1.0],
            anchor_obs: [0.1; OBS_DIM],
        }];
        let opts = CloneOptions {
            epochs: 600,
            batch_size: 1,
            lr: 1e-2,
            lr_final: 1e-3,
            partial_fraction: 0.0,
        };
        let (model, report) = clone_behavior(&cfg, &data, &opts, 1).unwrap();
        assert!(*report.epoch_losses.last().unwrap() < 1e-6);
        let a = model
            .act(&crate::envsim::ObservationFrame(data[0].obs), &{
                let (mut s, _) = crate::envsim::reset(0);
                s.effector = [0.2, -0.1];
                s
            })
            .unwrap()
            .normalized();
        for (p, t) in a.iter().zip(&data[0].action) {
            assert!((p - t).abs() < 5e-3, "{p} vs {t}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small();
        let data = collect_dataset(&DatasetOptions {
            episodes: 2,
            noisy_episodes: 1,
            noise_std: 0.3,
            max_anchor_lag: 4,
        });
        let opts = CloneOptions {
            epochs: 2,
            ..Default::default()
        };
        let (a, ra) = clone_behavior(&cfg, &data, &opts, 5).unwrap();
        let (b, rb) = clone_behavior(&cfg, &data, &opts, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
