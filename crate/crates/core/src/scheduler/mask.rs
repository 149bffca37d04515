use serde::{Deserialize, Serialize};

use crate::error::{state_err, Result};
use crate::executor::{ComputeAction, BACKBONE_LEVELS, HEAD_LEVELS, JOINT_ACTIONS};

/// Which joint actions may be chosen, indexed by `3·ℓB + ℓH`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask(pub [bool; JOINT_ACTIONS]);

impl ActionMask {
    pub fn all() -> Self {
        Self([true; JOINT_ACTIONS])
    }

    pub fn only(a: ComputeAction) -> Self {
        let mut m = [false; JOINT_ACTIONS];
        m[a.index()] = true;
        Self(m)
    }

    /// Backbone pinned to `level`, head free.
    pub fn backbone_fixed(level: u8) -> Self {
        let mut m = [false; JOINT_ACTIONS];
        for h in 0..HEAD_LEVELS {
            m[3 * level as usize + h as usize] = true;
        }
        Self(m)
    }

    pub fn allows(&self, a: ComputeAction) -> bool {
        self.0[a.index()]
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&v| v).count()
    }

    pub fn check(&self) -> Result<()> {
        if self.count() == 0 {
            return state_err("every action is masked");
        }
        Ok(())
    }

    pub fn valid(&self) -> impl Iterator<Item = ComputeAction> + '_ {
        (0..JOINT_ACTIONS)
            .filter(|&i| self.0[i])
            .map(|i| ComputeAction::from_index(i).expect("index in range"))
    }

    /// The valid action nearest to the desired levels: backbone distance
    /// first, then head distance, ties toward more compute.
    pub fn project(&self, backbone: u8, head: u8) -> Result<ComputeAction> {
        self.check()?;
        let mut best = None;
        for b in 0..BACKBONE_LEVELS {
            for h in 0..HEAD_LEVELS {
                let a = ComputeAction { backbone: b, head: h };
                if !self.allows(a) {
                    continue;
                }
                let key = (b.abs_diff(backbone), h.abs_diff(head), b, h);
                if best.is_none_or(|(k, _)| key < k) {
                    best = Some((key, a));
                }
            }
        }
        Ok(best.expect("mask has a valid entry").1)
    }
}
