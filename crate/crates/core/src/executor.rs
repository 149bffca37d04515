//! Scheduled inference: runs one control step at a requested backbone and
//! head level while keeping the reuse caches consistent.

use serde::{Deserialize, Serialize};

use crate::costmodel::{component_flops, Component, FlopsLedger};
use crate::envsim::{EnvState, ObservationFrame, RobotAction};
use crate::error::{input_err, state_err, Result};
use crate::numerics::Matrix;
use crate::scheduler::ActionMask;
use crate::signals::cka;
use crate::surrogate::Surrogate;

pub const BACKBONE_LEVELS: u8 = 5;
pub const HEAD_LEVELS: u8 = 3;
pub const JOINT_ACTIONS: usize = 15;

/// Joint decision `(ℓB, ℓH)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ComputeAction {
    pub backbone: u8,
    pub head: u8,
}

impl ComputeAction {
    pub const FULL: ComputeAction = ComputeAction { backbone: 0, head: 0 };

    pub fn new(backbone: u8, head: u8) -> Result<Self> {
        if backbone >= BACKBONE_LEVELS || head >= HEAD_LEVELS {
            return input_err(format!("no compute action ({backbone}, {head})"));
        }
        Ok(Self { backbone, head })
    }

    pub fn from_index(i: usize) -> Result<Self> {
        if i >= JOINT_ACTIONS {
            return input_err(format!("joint index {i} out of range"));
        }
        Ok(Self {
            backbone: (i / 3) as u8,
            head: (i % 3) as u8,
        })
    }

    pub fn index(&self) -> usize {
        3 * self.backbone as usize + self.head as usize
    }

    /// Steps whose backbone output is reused when this level is chosen,
    /// counting the decision step itself.
    pub fn reuse_steps(&self) -> usize {
        if self.backbone >= 2 {
            self.backbone as usize - 1
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BackboneCache {
    /// First-layer output of the last full pass.
    pub anchor: Option<Matrix>,
    pub output: Option<Vec<f64>>,
    /// Outputs of layers `1..L-1` from the last full pass.
    pub intermediates: Option<Vec<Matrix>>,
    pub first_layer: Option<Matrix>,
    /// Upcoming steps whose backbone decision is forced.
    pub skip_remaining: usize,
    /// Level that opened the current skip window.
    pub skip_level: u8,
    /// Most recently computed stability score.
    pub rho: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadCache {
    pub deltas: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Caches {
    pub backbone: BackboneCache,
    pub head: HeadCache,
}

impl Default for Caches {
    fn default() -> Self {
        Self {
            backbone: BackboneCache {
                rho: 1.0,
                ..Default::default()
            },
            head: HeadCache::default(),
        }
    }
}

impl Caches {
    pub fn is_cold(&self) -> bool {
        self.backbone.output.is_none() || self.head.deltas.is_none()
    }

    /// Joint actions allowed at the next step.
    pub fn mask(&self) -> ActionMask {
        if self.is_cold() {
            ActionMask::only(ComputeAction::FULL)
        } else if self.backbone.skip_remaining > 0 {
            ActionMask::backbone_fixed(self.backbone.skip_level)
        } else {
            ActionMask::all()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneOutcome {
    pub z: Vec<f64>,
    /// Fresh at levels 0 and 1, otherwise the last computed value.
    pub rho: f64,
    pub components: Vec<Component>,
}

pub fn exec_backbone(level: u8, obs: &ObservationFrame, caches: &mut BackboneCache, model: &Surrogate) -> Result<BackboneOutcome> {
    let cfg = model.config();
    if caches.skip_remaining > 0 {
        return state_err("backbone decision inside an active skip window");
    }
    match level {
        0 => {
            let tokens = model.encode(obs)?;
            let trace = model.backbone_full(&tokens)?;
            let h1 = trace.first_layer().clone();
            let rho = match &caches.anchor {
                Some(anchor) => cka(&h1, anchor)?,
                None => 1.0,
            };
            caches.anchor = Some(h1.clone());
            caches.first_layer = Some(h1);
            caches.intermediates = Some(trace.hidden[1..cfg.depth].to_vec());
            caches.output = Some(trace.z.clone());
            caches.rho = rho;
            let mut components = vec![Component::Encoder];
            components.extend((0..cfg.depth).map(Component::Layer));
            components.push(Component::Probe);
            Ok(BackboneOutcome {
                z: trace.z,
                rho,
                components,
            })
        }
        1 => {
            let (Some(anchor), Some(mid), Some(h1_cached)) =
                (&caches.anchor, &caches.intermediates, &caches.first_layer)
            else {
                return state_err("level 1 needs a previous full pass");
            };
            let tokens = model.encode(obs)?;
            let h1 = model.backbone_layer(0, &tokens)?;
            let rho = cka(&h1, anchor)?;
            let penultimate = &mid[cfg.depth - 2];
            let input = penultimate.add(&h1.sub(h1_cached)?)?;
            let out = model.backbone_layer(cfg.depth - 1, &input)?;
            let z = out.column_means();
            caches.output = Some(z.clone());
            caches.rho = rho;
            Ok(BackboneOutcome {
                z,
                rho,
                components: vec![
                    Component::Encoder,
                    Component::Layer(0),
                    Component::Layer(cfg.depth - 1),
                    Component::Probe,
                ],
            })
        }
        2..=4 => {
            let Some(z) = &caches.output else {
                return state_err("skip level needs a cached backbone output");
            };
            let z = z.clone();
            caches.skip_remaining = level as usize - 2;
            caches.skip_level = level;
            Ok(BackboneOutcome {
                z,
                rho: caches.rho,
                components: Vec::new(),
            })
        }
        _ => input_err(format!("no backbone level {level}")),
    }
}

/// Refinement steps whose cached deltas are replayed at head level `level`.
pub fn reused_steps(level: u8, refine_steps: usize) -> std::ops::Range<usize> {
    match level {
        1 => 1..refine_steps - 1,
        2 => 1..refine_steps,
        _ => 0..0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutcome {
    pub actions: Vec<RobotAction>,
    pub final_state: Vec<f64>,
    pub components: Vec<Component>,
}

pub fn exec_head(level: u8, z: &[f64], s: &[f64], caches: &mut HeadCache, model: &Surrogate) -> Result<HeadOutcome> {
    let m_total = model.config().refine_steps;
    if level >= HEAD_LEVELS {
        return input_err(format!("no head level {level}"));
    }
    if level > 0 && caches.deltas.is_none() {
        return state_err("head reuse needs cached deltas");
    }
    let reused = reused_steps(level, m_total);
    let mut deltas = caches
        .deltas
        .clone()
        .unwrap_or_else(|| vec![Vec::new(); m_total]);
    let mut x = model.x0();
    let mut components = Vec::new();
    for (m, delta) in deltas.iter_mut().enumerate() {
        if reused.contains(&m) {
            x.iter_mut().zip(delta.iter()).for_each(|(a, d)| *a += d);
        } else {
            let step = model.head_delta(m, &x, z, s)?;
            let next: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + b).collect();
            *delta = next.iter().zip(&x).map(|(a, b)| a - b).collect();
            x = next;
            components.push(Component::HeadStep(m));
        }
    }
    caches.deltas = Some(deltas);
    let actions = model.decode(&x)?;
    components.push(Component::Readout);
    Ok(HeadOutcome {
        actions,
        final_state: x,
        components,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub requested: ComputeAction,
    /// What actually ran after cold-start and skip-window overrides.
    pub executed: ComputeAction,
    /// The backbone level was dictated by an open skip window.
    pub forced: bool,
    pub action: RobotAction,
    pub z: Vec<f64>,
    pub rho: f64,
    pub components: Vec<Component>,
}

pub fn exec_step(
    requested: ComputeAction,
    obs: &ObservationFrame,
    state: &EnvState,
    caches: &mut Caches,
    model: &Surrogate,
) -> Result<StepOutcome> {
    let mut executed = requested;
    let mut forced = false;
    if caches.is_cold() {
        executed = ComputeAction::FULL;
    }
    let bb = if caches.backbone.skip_remaining > 0 {
        forced = true;
        executed.backbone = caches.backbone.skip_level;
        caches.backbone.skip_remaining -= 1;
        let Some(z) = &caches.backbone.output else {
            return state_err("skip window without a cached output");
        };
        BackboneOutcome {
            z: z.clone(),
            rho: caches.backbone.rho,
            components: Vec::new(),
        }
    } else {
        exec_backbone(executed.backbone, obs, &mut caches.backbone, model)?
    };
    let head = exec_head(executed.head, &bb.z, &state.robot_state(), &mut caches.head, model)?;
    let mut components = bb.components;
    components.extend(head.components);
    Ok(StepOutcome {
        requested,
        executed,
        forced,
        action: head.actions[0],
        z: bb.z,
        rho: bb.rho,
        components,
    })
}

/// One episode's worth of scheduled inference with its cost ledger.
#[derive(Clone, Debug)]
pub struct Executor<'a> {
    model: &'a Surrogate,
    caches: Caches,
    ledger: FlopsLedger,
}

impl<'a> Executor<'a> {
    pub fn new(model: &'a Surrogate) -> Result<Self> {
        Ok(Self {
            model,
            caches: Caches::default(),
            ledger: FlopsLedger::new(component_flops(model.config())?),
        })
    }

    pub fn model(&self) -> &Surrogate {
        self.model
    }

    pub fn caches(&self) -> &Caches {
        &self.caches
    }

    pub fn ledger(&self) -> &FlopsLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> FlopsLedger {
        self.ledger
    }

    pub fn mask(&self) -> ActionMask {
        self.caches.mask()
    }

    /// Runs one step; returns the outcome and its normalized cost.
    pub fn step(&mut self, requested: ComputeAction, obs: &ObservationFrame, state: &EnvState) -> Result<(StepOutcome, f64)> {
        let out = exec_step(requested, obs, state, &mut self.caches, self.model)?;
        let cost = self.ledger.record_step(&out.components, out.executed)?;
        Ok((out, cost))
    }
}
