use crate::error::{input_err, Result};

/// Generalized advantage estimation. `values` has one more entry than
/// `rewards`: the bootstrap value after the last step. `dones[t]` cuts the
/// recursion after step `t`.
pub fn compute_gae(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return input_err(format!(
            "gae lengths: {} rewards, {} values, {} dones",
            n,
            values.len(),
            dones.len()
        ));
    }
    let mut adv = vec![0.0; n];
    let mut next = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next = delta + gamma * lambda * live * next;
        adv[t] = next;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}
