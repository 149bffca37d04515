//! Analytic FLOPs accounting. A dense layer `in → out` costs `2·in·out`;
//! biases and activations are free.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{input_err, state_err, Result};
use crate::executor::ComputeAction;
use crate::numerics::DenseNet;
use crate::surrogate::PipelineConfig;

/// A unit of work the executor can run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Component {
    Encoder,
    /// Zero-based backbone layer.
    Layer(usize),
    /// Zero-based refinement step.
    HeadStep(usize),
    Readout,
    Probe,
}

/// Static per-component costs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub encoder: u64,
    pub layers: Vec<u64>,
    pub head_steps: Vec<u64>,
    pub readout: u64,
    pub probe: u64,
}

pub fn dense_flops(sizes: &[usize]) -> u64 {
    sizes.windows(2).map(|w| 2 * (w[0] * w[1]) as u64).sum()
}

fn net_flops(net: &DenseNet) -> u64 {
    dense_flops(&net.sizes())
}

/// Closed-form costs of every component for `cfg`. The probe is charged as
/// the three `T × T` Gram products of the linear-kernel similarity.
pub fn component_flops(cfg: &PipelineConfig) -> Result<CostTable> {
    cfg.validate()?;
    let t = cfg.tokens as u64;
    let d = cfg.width;
    let layer = t * dense_flops(&[2 * d, cfg.ff_width, d]);
    let head = dense_flops(&[cfg.head_input(), cfg.head_hidden, cfg.head_hidden, cfg.action_dim]);
    Ok(CostTable {
        encoder: t * dense_flops(&[cfg.encoder_input(), d]),
        layers: vec![layer; cfg.depth],
        head_steps: vec![head; cfg.refine_steps],
        readout: dense_flops(&[cfg.action_dim, cfg.action_dim * cfg.chunk]),
        probe: 3 * 2 * t * t * d as u64,
    })
}

/// Costs read off actual network shapes; must agree with
/// [`component_flops`].
pub fn measured_flops(model: &crate::surrogate::Surrogate) -> CostTable {
    let cfg = model.config();
    let w = model.weights();
    let t = cfg.tokens as u64;
    CostTable {
        encoder: t * net_flops(&w.encoder),
        layers: w.blocks.iter().map(|b| t * net_flops(b)).collect(),
        head_steps: vec![net_flops(&w.head); cfg.refine_steps],
        readout: net_flops(&w.readout),
        probe: 3 * 2 * t * t * cfg.width as u64,
    }
}

impl CostTable {
    pub fn full_step(&self) -> u64 {
        self.encoder
            + self.layers.iter().sum::<u64>()
            + self.head_steps.iter().sum::<u64>()
            + self.readout
            + self.probe
    }

    pub fn cost(&self, c: Component) -> Result<u64> {
        match c {
            Component::Encoder => Ok(self.encoder),
            Component::Layer(l) => match self.layers.get(l) {
                Some(v) => Ok(*v),
                None => input_err(format!("unknown backbone layer {l}")),
            },
            Component::HeadStep(m) => match self.head_steps.get(m) {
                Some(v) => Ok(*v),
                None => input_err(format!("unknown refinement step {m}")),
            },
            Component::Readout => Ok(self.readout),
            Component::Probe => Ok(self.probe),
        }
    }

    pub fn backbone_share(&self) -> f64 {
        let b = self.encoder + self.layers.iter().sum::<u64>() + self.probe;
        b as f64 / self.full_step() as f64
    }
}

/// Per-episode (or merged) record of executed work.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsLedger {
    table: CostTable,
    step_costs: Vec<u64>,
    histogram: BTreeMap<usize, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub steps: usize,
    pub mean_normalized_cost: f64,
    pub speedup: f64,
    /// Step counts keyed by joint index `3·ℓB + ℓH`.
    pub per_level_histogram: BTreeMap<usize, usize>,
}

impl FlopsLedger {
    pub fn new(table: CostTable) -> Self {
        Self {
            table,
            step_costs: Vec::new(),
            histogram: BTreeMap::new(),
        }
    }

    pub fn table(&self) -> &CostTable {
        &self.table
    }

    pub fn steps(&self) -> usize {
        self.step_costs.len()
    }

    pub fn step_costs(&self) -> &[u64] {
        &self.step_costs
    }

    pub fn histogram(&self) -> &BTreeMap<usize, usize> {
        &self.histogram
    }

    /// Appends one step and returns its cost normalized by the full step.
    pub fn record_step(&mut self, executed: &[Component], action: ComputeAction) -> Result<f64> {
        let mut seen = std::collections::BTreeSet::new();
        let mut total = 0u64;
        for &c in executed {
            if !seen.insert(c) {
                return input_err(format!("component {c:?} executed twice in one step"));
            }
            total += self.table.cost(c)?;
        }
        self.step_costs.push(total);
        *self.histogram.entry(action.index()).or_insert(0) += 1;
        Ok(total as f64 / self.table.full_step() as f64)
    }

    pub fn total_cost(&self) -> u64 {
        self.step_costs.iter().sum()
    }

    /// `steps · full / Σ actual`.
    pub fn speedup(&self) -> Result<f64> {
        if self.step_costs.is_empty() {
            return state_err("speedup of an empty ledger");
        }
        let total = self.total_cost();
        if total == 0 {
            return state_err("ledger recorded no work");
        }
        Ok(self.step_costs.len() as f64 * self.table.full_step() as f64 / total as f64)
    }

    /// Appends `other`'s steps. Totals and histograms add.
    pub fn merge(&mut self, other: &FlopsLedger) -> Result<()> {
        if other.table != self.table {
            return input_err("merging ledgers with different cost tables");
        }
        self.step_costs.extend_from_slice(&other.step_costs);
        for (k, v) in &other.histogram {
            *self.histogram.entry(*k).or_insert(0) += v;
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<LedgerSummary> {
        let speedup = self.speedup()?;
        Ok(LedgerSummary {
            steps: self.steps(),
            mean_normalized_cost: self.total_cost() as f64
                / (self.steps() as f64 * self.table.full_step() as f64),
            speedup,
            per_level_histogram: self.histogram.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_components(t: &CostTable) -> Vec<Component> {
        let mut v = vec![Component::Encoder, Component::Probe, Component::Readout];
        v.extend((0..t.layers.len()).map(Component::Layer));
        v.extend((0..t.head_steps.len()).map(Component::HeadStep));
        v
    }

    #[test]
    fn dense_convention() {
        assert_eq!(dense_flops(&[32, 32]), 2048);
        let mut cfg = PipelineConfig::default();
        let a = component_flops(&cfg).unwrap().layers[0];
        cfg = PipelineConfig::new(8, 64, 6, 4);
        let b = component_flops(&cfg).unwrap().layers[0];
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn default_table_matches_recount() {
        let t = component_flops(&PipelineConfig::default()).unwrap();
        // 8 tokens × 2·(16+8)·32
        assert_eq!(t.encoder, 12_288);
        // 8 tokens × 2·(64·64 + 64·32)
        assert_eq!(t.layers, vec![98_304; 6]);
        // 2·(46·96 + 96·96 + 96·4)
        assert_eq!(t.head_steps, vec![28_032; 4]);
        assert_eq!(t.readout, 32);
        // 3 × 2·8·8·32
        assert_eq!(t.probe, 12_288);
        assert_eq!(t.full_step(), 12_288 + 589_824 + 112_128 + 32 + 12_288);
    }

    #[test]
    fn full_step_normalizes_to_one() {
        let t = component_flops(&PipelineConfig::default()).unwrap();
        let mut l = FlopsLedger::new(t.clone());
        let c = l.record_step(&full_components(&t), ComputeAction::FULL).unwrap();
        assert_eq!(c, 1.0);
        assert_eq!(l.speedup().unwrap(), 1.0);
    }

    #[test]
    fn skip_step_with_head_reuse() {
        let t = component_flops(&PipelineConfig::default()).unwrap();
        let mut l = FlopsLedger::new(t.clone());
        let c = l
            .record_step(&[Component::HeadStep(0), Component::Readout], ComputeAction::new(4, 2).unwrap())
            .unwrap();
        assert_eq!(c, (28_032.0 + 32.0) / t.full_step() as f64);
    }

    #[test]
    fn errors() {
        let t = component_flops(&PipelineConfig::default()).unwrap();
        let mut l = FlopsLedger::new(t);
        assert!(l.speedup().is_err());
        assert!(l.record_step(&[Component::Layer(6)], ComputeAction::FULL).is_err());
        assert!(l.record_step(&[Component::HeadStep(9)], ComputeAction::FULL).is_err());
        assert!(l
            .record_step(&[Component::Readout, Component::Readout], ComputeAction::FULL)
            .is_err());
    }

    #[test]
    fn merge_adds() {
        let t = component_flops(&PipelineConfig::default()).unwrap();
        let mut a = FlopsLedger::new(t.clone());
        let mut b = FlopsLedger::new(t.clone());
        a.record_step(&full_components(&t), ComputeAction::FULL).unwrap();
        b.record_step(&[Component::Readout], ComputeAction::new(2, 2).unwrap()).unwrap();
        b.record_step(&[Component::Encoder], ComputeAction::new(1, 0).unwrap()).unwrap();
        let mut ab = a.clone();
        ab.merge(&b).unwrap();
        let mut ba = b.clone();
        ba.merge(&a).unwrap();
        assert_eq!(ab.total_cost(), a.total_cost() + b.total_cost());
        assert_eq!(ab.steps(), 3);
        assert_eq!(ab.speedup().unwrap(), ba.speedup().unwrap());
        assert_eq!(ab.histogram(), ba.histogram());
        let s = ab.summary().unwrap();
        assert_eq!(s.per_level_histogram.values().sum::<usize>(), 3);
    }
}
