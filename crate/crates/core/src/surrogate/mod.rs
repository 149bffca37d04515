//! The frozen stand-in for a vision-language-action model: a token encoder,
//! a stack of residual backbone blocks and an iterative action head.

mod bundle;
mod clone;

use serde::{Deserialize, Serialize};

use crate::envsim::{EnvState, ObservationFrame, RobotAction, ACTION_DIM, OBS_DIM, STATE_DIM};
use crate::error::{input_err, Result};
use crate::numerics::{Activation, DenseNet, Matrix, ParamKey, Parameters, Rng};

pub use bundle::{load_bundle, save_bundle, BundleManifest, BUNDLE_FORMAT_VERSION};
pub use clone::{
    clone_behavior, clone_loss, collect_dataset, evaluate_policy, CloneOptions, CloneReport, DatasetOptions,
    Sample,
};

/// Network tags under which parameters appear on a gradient tape.
pub const TAG_ENCODER: u32 = 1;
pub const TAG_HEAD: u32 = 2;
pub const TAG_READOUT: u32 = 3;
pub const TAG_BLOCK_BASE: u32 = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub obs_dim: usize,
    pub tokens: usize,
    pub width: usize,
    pub depth: usize,
    pub refine_steps: usize,
    pub chunk: usize,
    /// Hidden width of every backbone block.
    pub ff_width: usize,
    /// Hidden width of the refinement network.
    pub head_hidden: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// The instruction embedding. One task, so one fixed vector.
    pub instruction: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::new(8, 32, 6, 4)
    }
}

impl PipelineConfig {
    /// A config with the given shape; the instruction vector is a fixed
    /// unit-variance Gaussian draw.
    pub fn new(tokens: usize, width: usize, depth: usize, refine_steps: usize) -> Self {
        Self {
            obs_dim: OBS_DIM,
            tokens,
            width,
            depth,
            refine_steps,
            chunk: 1,
            ff_width: 2 * width,
            head_hidden: 96,
            state_dim: STATE_DIM,
            action_dim: ACTION_DIM,
            instruction: Rng::stream(0x9e37, 1).draw_gaussian(width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 3 {
            return input_err(format!("backbone depth {} < 3", self.depth));
        }
        if self.refine_steps < 3 {
            return input_err(format!("refinement steps {} < 3", self.refine_steps));
        }
        if self.tokens < 2 {
            return input_err("need at least 2 tokens");
        }
        if self.chunk != 1 {
            return input_err("only single-action chunks are supported");
        }
        if self.width == 0 || self.ff_width == 0 || self.head_hidden == 0 {
            return input_err("widths must be positive");
        }
        if self.obs_dim != OBS_DIM || self.state_dim != STATE_DIM || self.action_dim != ACTION_DIM {
            return input_err("observation, state and action sizes are fixed by the environment");
        }
        if self.instruction.len() != self.width || self.instruction.iter().any(|v| !v.is_finite()) {
            return input_err("instruction must be a finite width-length vector");
        }
        Ok(())
    }

    pub fn encoder_input(&self) -> usize {
        self.obs_dim + self.tokens
    }

    pub fn head_input(&self) -> usize {
        self.action_dim + self.width + self.state_dim + self.refine_steps
    }
}

/// All parameters of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct SurrogateWeights {
    pub encoder: DenseNet,
    pub blocks: Vec<DenseNet>,
    pub head: DenseNet,
    pub readout: DenseNet,
}

impl SurrogateWeights {
    pub fn new(cfg: &PipelineConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let encoder = DenseNet::new(&[cfg.encoder_input(), cfg.width], &[Activation::Tanh], rng)?;
        let blocks = (0..cfg.depth)
            .map(|_| {
                let mut b = DenseNet::new(
                    &[2 * cfg.width, cfg.ff_width, cfg.width],
                    &[Activation::Tanh, Activation::Identity],
                    rng,
                )?;
                b.scale_output_layer(0.1);
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut head = DenseNet::new(
            &[cfg.head_input(), cfg.head_hidden, cfg.head_hidden, cfg.action_dim],
            &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            rng,
        )?;
        head.scale_output_layer(0.1);
        let readout = DenseNet::new(
            &[cfg.action_dim, cfg.action_dim * cfg.chunk],
            &[Activation::Identity],
            rng,
        )?;
        Ok(Self {
            encoder,
            blocks,
            head,
            readout,
        })
    }

    pub fn zeros(cfg: &PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder: DenseNet::zeros(&[cfg.encoder_input(), cfg.width], &[Activation::Tanh])?,
            blocks: (0..cfg.depth)
                .map(|_| {
                    DenseNet::zeros(
                        &[2 * cfg.width, cfg.ff_width, cfg.width],
                        &[Activation::Tanh, Activation::Identity],
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            head: DenseNet::zeros(
                &[cfg.head_input(), cfg.head_hidden, cfg.head_hidden, cfg.action_dim],
                &[Activation::Tanh, Activation::Tanh, Activation::Identity],
            )?,
            readout: DenseNet::zeros(&[cfg.action_dim, cfg.action_dim * cfg.chunk], &[Activation::Identity])?,
        })
    }

    /// Checks that every net has the shape `cfg` prescribes.
    pub fn check_shapes(&self, cfg: &PipelineConfig) -> Result<()> {
        let want = Self::zeros(cfg)?;
        let ok = self.encoder.sizes() == want.encoder.sizes()
            && self.blocks.len() == want.blocks.len()
            && self.blocks.iter().all(|b| b.sizes() == want.blocks[0].sizes())
            && self.head.sizes() == want.head.sizes()
            && self.readout.sizes() == want.readout.sizes();
        if ok {
            Ok(())
        } else {
            input_err("weights do not match the pipeline config")
        }
    }
}

impl Parameters for SurrogateWeights {
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(ParamKey, &mut [f64])) {
        self.encoder.visit_params_mut(TAG_ENCODER, f);
        for (l, b) in self.blocks.iter_mut().enumerate() {
            b.visit_params_mut(TAG_BLOCK_BASE + l as u32, f);
        }
        self.head.visit_params_mut(TAG_HEAD, f);
        self.readout.visit_params_mut(TAG_READOUT, f);
    }
}

/// Hidden matrices of one full backbone pass. `hidden[0]` is the encoder
/// output, `hidden[l]` the output of layer `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrace {
    pub hidden: Vec<Matrix>,
    pub z: Vec<f64>,
}

impl BackboneTrace {
    pub fn first_layer(&self) -> &Matrix {
        &self.hidden[1]
    }
}

/// Refinement states `x⁰…x^M` and the deltas between them.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrace {
    pub states: Vec<Vec<f64>>,
    pub deltas: Vec<Vec<f64>>,
}

impl HeadTrace {
    pub fn last(&self) -> &[f64] {
        &self.states[self.states.len() - 1]
    }
}

/// A trained, immutable pipeline. There is no way to mutate the weights
/// through this type.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    config: PipelineConfig,
    weights: SurrogateWeights,
}

impl Surrogate {
    pub fn new(config: PipelineConfig, weights: SurrogateWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn weights(&self) -> &SurrogateWeights {
        &self.weights
    }

    pub fn encode(&self, obs: &ObservationFrame) -> Result<Matrix> {
        encode(&self.config, &self.weights, obs.as_slice())
    }

    /// Runs backbone layer `l` (zero-based) on hidden matrix `h`.
    pub fn backbone_layer(&self, l: usize, h: &Matrix) -> Result<Matrix> {
        backbone_layer(&self.config, &self.weights, l, h)
    }

    pub fn backbone_full(&self, tokens: &Matrix) -> Result<BackboneTrace> {
        backbone_full(&self.config, &self.weights, tokens)
    }

    /// The change `x^{m+1} - x^m` produced by refinement step `m`.
    pub fn head_delta(&self, m: usize, x: &[f64], z: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        head_delta(&self.config, &self.weights, m, x, z, s)
    }

    pub fn head_full(&self, z: &[f64], s: &[f64], x0: &[f64]) -> Result<HeadTrace> {
        head_full(&self.config, &self.weights, z, s, x0)
    }

    pub fn decode(&self, x: &[f64]) -> Result<Vec<RobotAction>> {
        decode(&self.config, &self.weights, x)
    }

    /// The initial refinement state.
    pub fn x0(&self) -> Vec<f64> {
        vec![0.0; self.config.action_dim]
    }

    /// One unscheduled control step: every component runs in full.
    pub fn act(&self, obs: &ObservationFrame, state: &EnvState) -> Result<RobotAction> {
        let tokens = self.encode(obs)?;
        let trace = self.backbone_full(&tokens)?;
        let head = self.head_full(&trace.z, &state.robot_state(), &self.x0())?;
        Ok(self.decode(head.last())?[0])
    }
}

pub fn encode(cfg: &PipelineConfig, w: &SurrogateWeights, obs: &[f64]) -> Result<Matrix> {
    if obs.len() != cfg.obs_dim {
        return input_err(format!("observation length {} != {}", obs.len(), cfg.obs_dim));
    }
    w.encoder.forward_batch(&encoder_input(cfg, obs))
}

/// Row `i` is the observation followed by a one-hot position code for
/// token `i`.
pub(crate) fn encoder_input(cfg: &PipelineConfig, obs: &[f64]) -> Matrix {
    let cols = cfg.encoder_input();
    let mut x = Matrix::zeros(cfg.tokens, cols);
    for i in 0..cfg.tokens {
        let row = x.row_mut(i);
        row[..cfg.obs_dim].copy_from_slice(obs);
        row[cfg.obs_dim + i] = 1.0;
    }
    x
}

pub fn backbone_layer(cfg: &PipelineConfig, w: &SurrogateWeights, l: usize, h: &Matrix) -> Result<Matrix> {
    if h.shape() != (cfg.tokens, cfg.width) {
        return input_err(format!(
            "hidden matrix is {:?}, expected {:?}",
            h.shape(),
            (cfg.tokens, cfg.width)
        ));
    }
    let Some(block) = w.blocks.get(l) else {
        return input_err(format!("no backbone layer {l}"));
    };
    let mean = h.column_means();
    let mut input = Matrix::zeros(cfg.tokens, 2 * cfg.width);
    for i in 0..cfg.tokens {
        let row = input.row_mut(i);
        for (k, v) in row[..cfg.width].iter_mut().enumerate() {
            *v = h.get(i, k) + mean[k];
        }
        row[cfg.width..].copy_from_slice(&cfg.instruction);
    }
    h.add(&block.forward_batch(&input)?)
}

pub fn backbone_full(cfg: &PipelineConfig, w: &SurrogateWeights, tokens: &Matrix) -> Result<BackboneTrace> {
    let mut hidden = Vec::with_capacity(cfg.depth + 1);
    hidden.push(tokens.clone());
    for l in 0..cfg.depth {
        let next = backbone_layer(cfg, w, l, &hidden[l])?;
        hidden.push(next);
    }
    let z = hidden[cfg.depth].column_means();
    Ok(BackboneTrace { hidden, z })
}

pub fn head_delta(
    cfg: &PipelineConfig,
    w: &SurrogateWeights,
    m: usize,
    x: &[f64],
    z: &[f64],
    s: &[f64],
) -> Result<Vec<f64>> {
    if m >= cfg.refine_steps {
        return input_err(format!("no refinement step {m}"));
    }
    if x.len() != cfg.action_dim || z.len() != cfg.width || s.len() != cfg.state_dim {
        return input_err("head input has the wrong length");
    }
    let mut input = Vec::with_capacity(cfg.head_input());
    input.extend_from_slice(x);
    input.extend_from_slice(z);
    input.extend_from_slice(s);
    input.extend((0..cfg.refine_steps).map(|k| if k == m { 1.0 } else { 0.0 }));
    w.head.forward(&input, None)
}

pub fn head_full(cfg: &PipelineConfig, w: &SurrogateWeights, z: &[f64], s: &[f64], x0: &[f64]) -> Result<HeadTrace> {
    let mut states = vec![x0.to_vec()];
    let mut deltas = Vec::with_capacity(cfg.refine_steps);
    for m in 0..cfg.refine_steps {
        let step = head_delta(cfg, w, m, &states[m], z, s)?;
        let next: Vec<f64> = states[m].iter().zip(&step).map(|(a, b)| a + b).collect();
        // stored as the realized difference so that it is exact in floating point
        deltas.push(next.iter().zip(&states[m]).map(|(a, b)| a - b).collect());
        states.push(next);
    }
    Ok(HeadTrace { states, deltas })
}

/// Maps the final refinement state to `chunk` actions. Readout outputs are
/// in normalized units.
pub fn decode(cfg: &PipelineConfig, w: &SurrogateWeights, x: &[f64]) -> Result<Vec<RobotAction>> {
    let y = w.readout.forward(x, None)?;
    Ok(y.chunks(cfg.action_dim).map(RobotAction::from_normalized).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envsim;

    fn seeded() -> (PipelineConfig, SurrogateWeights) {
        let cfg = PipelineConfig::default();
        let w = SurrogateWeights::new(&cfg, &mut Rng::new(42)).unwrap();
        (cfg, w)
    }

    fn oracle_dense(x: &[f64], net: &DenseNet) -> Vec<f64> {
        let mut h = x.to_vec();
        for layer in net.layers() {
            let mut out = vec![0.0; layer.bias.len()];
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = layer.bias[i];
                for (j, hj) in h.iter().enumerate() {
                    acc += layer.weight.get(i, j) * hj;
                }
                *o = layer.activation.apply(acc);
            }
            h = out;
        }
        h
    }

    #[test]
    fn invalid_configs_rejected() {
        let cfg = PipelineConfig { depth: 0, ..PipelineConfig::default() };
        assert!(SurrogateWeights::new(&cfg, &mut Rng::new(0)).is_err());
        let cfg = PipelineConfig { refine_steps: 2, ..PipelineConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = PipelineConfig { chunk: 2, ..PipelineConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let (cfg, w) = seeded();
        let (_, obs) = envsim::reset(3);
        assert_eq!(
            encode(&cfg, &w, obs.as_slice()).unwrap(),
            encode(&cfg, &w, obs.as_slice()).unwrap()
        );
        assert!(encode(&cfg, &w, &[0.0; 3]).is_err());
    }

    #[test]
    fn zero_encoder_gives_bias_tokens() {
        let cfg = PipelineConfig::default();
        let mut w = SurrogateWeights::zeros(&cfg).unwrap();
        let bias: Vec<f64> = (0..cfg.width).map(|k| 0.01 * k as f64).collect();
        w.encoder.layers_mut()[0].bias = bias.clone();
        let (_, obs) = envsim::reset(1);
        let tokens = encode(&cfg, &w, obs.as_slice()).unwrap();
        for i in 0..cfg.tokens {
            for k in 0..cfg.width {
                assert_eq!(tokens.get(i, k), bias[k].tanh());
            }
        }
    }

    #[test]
    fn encode_matches_scalar_oracle() {
        let (cfg, w) = seeded();
        let (_, obs) = envsim::reset(9);
        let tokens = encode(&cfg, &w, obs.as_slice()).unwrap();
        for i in 0..cfg.tokens {
            let mut input = obs.as_slice().to_vec();
            input.extend((0..cfg.tokens).map(|k| if k == i { 1.0 } else { 0.0 }));
            let want = oracle_dense(&input, &w.encoder);
            for k in 0..cfg.width {
                assert!((tokens.get(i, k) - want[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_blocks_are_identity() {
        let (cfg, seeded_w) = seeded();
        let mut w = SurrogateWeights::zeros(&cfg).unwrap();
        w.encoder = seeded_w.encoder;
        let (_, obs) = envsim::reset(2);
        let tokens = encode(&cfg, &w, obs.as_slice()).unwrap();
        let trace = backbone_full(&cfg, &w, &tokens).unwrap();
        assert_eq!(trace.hidden.len(), cfg.depth + 1);
        for h in &trace.hidden {
            assert_eq!(h, &tokens);
        }
    }

    #[test]
    fn backbone_matches_layer_oracle() {
        let (cfg, w) = seeded();
        let (_, obs) = envsim::reset(4);
        let tokens = encode(&cfg, &w, obs.as_slice()).unwrap();
        let trace = backbone_full(&cfg, &w, &tokens).unwrap();

        let mut h: Vec<Vec<f64>> = (0..cfg.tokens).map(|i| tokens.row(i).to_vec()).collect();
        for block in &w.blocks {
            let mut mean = vec![0.0; cfg.width];
            for row in &h {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v / cfg.tokens as f64;
                }
            }
            h = h
                .iter()
                .map(|row| {
                    let mut input: Vec<f64> = row.iter().zip(&mean).map(|(a, b)| a + b).collect();
                    input.extend_from_slice(&cfg.instruction);
                    let r = oracle_dense(&input, block);
                    row.iter().zip(&r).map(|(a, b)| a + b).collect()
                })
                .collect();
        }
        for k in 0..cfg.width {
            let z: f64 = h.iter().map(|row| row[k]).sum::<f64>() / cfg.tokens as f64;
            assert!((trace.z[k] - z).abs() < 1e-12);
        }
    }

    #[test]
    fn backbone_is_pure() {
        let (cfg, w) = seeded();
        let (_, obs) = envsim::reset(5);
        let tokens = encode(&cfg, &w, obs.as_slice()).unwrap();
        assert_eq!(
            backbone_full(&cfg, &w, &tokens).unwrap(),
            backbone_full(&cfg, &w, &tokens).unwrap()
        );
    }

    #[test]
    fn zero_head_leaves_x0() {
        let cfg = PipelineConfig::default();
        let w = SurrogateWeights::zeros(&cfg).unwrap();
        let trace = head_full(&cfg, &w, &vec![0.3; cfg.width], &[0.1; 6], &[0.0; 4]).unwrap();
        assert_eq!(trace.states.len(), 5);
        assert_eq!(trace.deltas.len(), 4);
        assert!(trace.deltas.iter().flatten().all(|&d| d == 0.0));
        assert_eq!(trace.last(), &[0.0; 4]);
    }

    #[test]
    fn head_matches_step_oracle() {
        let (cfg, w) = seeded();
        let z: Vec<f64> = (0..cfg.width).map(|k| (k as f64 * 0.37).sin()).collect();
        let s = [0.1, -0.2, 0.0, 1.0, 0.5, 0.0];
        let trace = head_full(&cfg, &w, &z, &s, &[0.0; 4]).unwrap();
        let mut x = vec![0.0; 4];
        for m in 0..cfg.refine_steps {
            let mut input = x.clone();
            input.extend_from_slice(&z);
            input.extend_from_slice(&s);
            input.extend((0..cfg.refine_steps).map(|k| if k == m { 1.0 } else { 0.0 }));
            let d = oracle_dense(&input, &w.head);
            for (xi, di) in x.iter_mut().zip(&d) {
                *xi += di;
            }
        }
        for (a, b) in trace.last().iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        for m in 0..cfg.refine_steps {
            for k in 0..4 {
                assert_eq!(trace.deltas[m][k], trace.states[m + 1][k] - trace.states[m][k]);
            }
        }
    }
}
